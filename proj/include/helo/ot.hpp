#pragma once

// Optimal-transport heterogeneity mining: cosine cost between physiological
// and behavioral tokens, a log-domain entropic Sinkhorn solver, and the
// transport-guided fusion that feeds both streams through transformer
// encoders. The coupling is treated as a constant by the backward pass.

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "helo/attention.hpp"
#include "helo/numerics.hpp"

namespace helo {

struct SinkhornOptions {
  double epsilon = 0.1;
  int max_iter = 200;
  double tol = 1e-6;
};

struct TransportPlan {
  Matrix coupling;  // T
  std::vector<double> u;
  std::vector<double> v;
  Matrix cost;
  double wd = 0.0;  // <T, cost>_F
  double epsilon = 0.0;
  int iterations = 0;
  bool converged = false;
  double marginal_violation = 0.0;
  /// max(|T1 - u|_inf, |Tᵀ1 - v|_inf) after each iteration.
  std::vector<double> violation_history;
};

/// Cost(i, j) = 1 - cos(x_phy_i, x_v_j), clamped to [0, 2]. Zero-norm rows have
/// similarity 0, hence cost 1.
Matrix cost_matrix(const Matrix& x_phy, const Matrix& x_v);

/// Entropic OT: T = diag(a) exp(-cost / epsilon) diag(b), with the scalings
/// kept as log-potentials and updated by log-sum-exp until the marginal
/// violation is at most tol or max_iter iterations have run.
TransportPlan sinkhorn(const Matrix& cost, std::vector<double> u, std::vector<double> v,
                       const SinkhornOptions& options);

/// Uniform marginals 1/n on both sides.
TransportPlan sinkhorn_uniform(const Matrix& cost, const SinkhornOptions& options);

/// max(|T1 - u|_inf, |Tᵀ1 - v|_inf)
double marginal_violation(const Matrix& coupling, const std::vector<double>& u,
                          const std::vector<double>& v);

/// Writes "iteration,violation" rows for every recorded iteration.
void write_violation_csv(std::ostream& out, const TransportPlan& plan);

struct OthmCache {
  double transport_scale = 1.0;
  Matrix coupling;
  EncoderCache phy;
  EncoderCache behavioral;
  std::size_t phy_rows = 0;
};

/// x^m = [Encode_phy(s · T · x_phy) ; Encode_v(x_v)] stacked along tokens, where s
/// is the token count (restoring unit row mass under uniform marginals) when
/// `rescale` is set and 1 otherwise.
Matrix othm_fuse(const Matrix& x_phy, const Matrix& x_v, const TransportPlan& plan,
                 const EncoderParams& enc_phy, const EncoderParams& enc_v, bool rescale,
                 OthmCache* cache = nullptr);

struct OthmGrads {
  Matrix d_phy;
  Matrix d_v;
};

OthmGrads othm_backward(const OthmCache& cache, const Matrix& d_fused, EncoderParams& enc_phy,
                        EncoderParams& enc_v);

}  // namespace helo
