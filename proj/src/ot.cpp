#include "helo/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "helo/error.hpp"

namespace helo {

Matrix cost_matrix(const Matrix& x_phy, const Matrix& x_v) {
  require_shape(x_phy.cols() == x_v.cols(), "cost_matrix", x_phy, x_v);
  Matrix cost = cosine_rows(x_phy, x_v).similarity;
  for (double& c : cost.values()) c = std::clamp(1.0 - c, 0.0, 2.0);
  return cost;
}

double marginal_violation(const Matrix& coupling, const std::vector<double>& u,
                          const std::vector<double>& v) {
  double worst = 0.0;
  std::vector<double> col(coupling.cols(), 0.0);
  for (std::size_t i = 0; i < coupling.rows(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < coupling.cols(); ++j) {
      row += coupling(i, j);
      col[j] += coupling(i, j);
    }
    worst = std::max(worst, std::abs(row - u[i]));
  }
  for (std::size_t j = 0; j < col.size(); ++j) worst = std::max(worst, std::abs(col[j] - v[j]));
  return worst;
}

namespace {

void validate_marginal(const std::vector<double>& m, std::size_t expected, const char* name) {
  if (m.size() != expected) {
    throw DimensionError(std::string("sinkhorn: marginal ") + name + " has length " +
                         std::to_string(m.size()) + ", expected " + std::to_string(expected));
  }
  double total = 0.0;
  for (double x : m) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw ConfigError(std::string("sinkhorn: marginal ") + name + " must be strictly positive");
    }
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError(std::string("sinkhorn: marginal ") + name + " must sum to 1");
  }
}

double log_sum_exp(const std::vector<double>& xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

TransportPlan sinkhorn(const Matrix& cost, std::vector<double> u, std::vector<double> v,
                       const SinkhornOptions& options) {
  if (!(options.epsilon > 0.0)) {
    throw ConfigError("sinkhorn: epsilon must be positive");
  }
  if (options.max_iter < 1) throw ConfigError("sinkhorn: max_iter must be at least 1");
  if (cost.empty()) throw DimensionError("sinkhorn: empty cost matrix");
  for (double c : cost.values()) {
    if (!std::isfinite(c) || c < 0.0) throw ConfigError("sinkhorn: cost must be finite and >= 0");
  }
  const std::size_t n = cost.rows(), m = cost.cols();
  validate_marginal(u, n, "u");
  validate_marginal(v, m, "v");

  const double eps = options.epsilon;
  std::vector<double> f(n, 0.0), g(m, 0.0), log_u(n), log_v(m), scratch;
  for (std::size_t i = 0; i < n; ++i) log_u[i] = std::log(u[i]);
  for (std::size_t j = 0; j < m; ++j) log_v[j] = std::log(v[j]);

  TransportPlan plan;
  plan.coupling = Matrix(n, m);
  plan.epsilon = eps;
  auto rebuild = [&] {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        plan.coupling(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / eps);
  };

  for (int it = 1; it <= options.max_iter; ++it) {
    scratch.resize(m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) scratch[j] = (g[j] - cost(i, j)) / eps;
      f[i] = eps * (log_u[i] - log_sum_exp(scratch));
    }
    scratch.resize(n);
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) scratch[i] = (f[i] - cost(i, j)) / eps;
      g[j] = eps * (log_v[j] - log_sum_exp(scratch));
    }
    rebuild();
    const double violation = marginal_violation(plan.coupling, u, v);
    plan.violation_history.push_back(violation);
    plan.iterations = it;
    plan.marginal_violation = violation;
    if (violation <= options.tol) {
      plan.converged = true;
      break;
    }
  }

  if (!all_finite(plan.coupling)) {
    std::ostringstream msg;
    msg << "sinkhorn: non-finite transport plan at epsilon=" << eps;
    throw NumericalError(msg.str());
  }
  plan.wd = frobenius_dot(plan.coupling, cost);
  plan.cost = cost;
  plan.u = std::move(u);
  plan.v = std::move(v);
  return plan;
}

TransportPlan sinkhorn_uniform(const Matrix& cost, const SinkhornOptions& options) {
  std::vector<double> u(cost.rows(), 1.0 / static_cast<double>(cost.rows()));
  std::vector<double> v(cost.cols(), 1.0 / static_cast<double>(cost.cols()));
  return sinkhorn(cost, std::move(u), std::move(v), options);
}

void write_violation_csv(std::ostream& out, const TransportPlan& plan) {
  out << "iteration,violation\n";
  out.precision(17);
  for (std::size_t i = 0; i < plan.violation_history.size(); ++i) {
    out << (i + 1) << ',' << plan.violation_history[i] << '\n';
  }
}

Matrix othm_fuse(const Matrix& x_phy, const Matrix& x_v, const TransportPlan& plan,
                 const EncoderParams& enc_phy, const EncoderParams& enc_v, bool rescale,
                 OthmCache* cache) {
  const Matrix& t = plan.coupling;
  require_shape(t.rows() == t.cols() && t.cols() == x_phy.rows(), "othm_fuse(plan)", t, x_phy);
  require_shape(x_phy.cols() == x_v.cols(), "othm_fuse(streams)", x_phy, x_v);
  const double s = rescale ? static_cast<double>(t.rows()) : 1.0;
  const Matrix transported = scale(matmul(t, x_phy), s);
  const Matrix parts[] = {
      transformer_encode(transported, enc_phy, cache ? &cache->phy : nullptr),
      transformer_encode(x_v, enc_v, cache ? &cache->behavioral : nullptr)};
  if (cache) {
    cache->transport_scale = s;
    cache->coupling = t;
    cache->phy_rows = x_phy.rows();
  }
  return vstack(parts);
}

OthmGrads othm_backward(const OthmCache& cache, const Matrix& d_fused, EncoderParams& enc_phy,
                        EncoderParams& enc_v) {
  const std::size_t top = cache.phy_rows;
  const Matrix d_top = slice_rows(d_fused, 0, top);
  const Matrix d_bottom = slice_rows(d_fused, top, d_fused.rows() - top);
  const Matrix d_transported = transformer_encode_backward(cache.phy, d_top, enc_phy);
  OthmGrads g;
  g.d_phy = scale(matmul_tn(cache.coupling, d_transported), cache.transport_scale);
  g.d_v = transformer_encode_backward(cache.behavioral, d_bottom, enc_v);
  return g;
}

}  // namespace helo
