#include "helo/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "helo/error.hpp"

namespace helo {

// ---------------------------------------------------------------------- Adam

AdamState make_adam_state(const ParameterList& params, const TrainConfig& config) {
  AdamState s;
  s.beta1 = config.adam_beta1;
  s.beta2 = config.adam_beta2;
  s.eps = config.adam_eps;
  for (const Parameter* p : params) {
    s.m.emplace_back(p->value.rows(), p->value.cols());
    s.v.emplace_back(p->value.rows(), p->value.cols());
  }
  return s;
}

void adam_step(const ParameterList& params, AdamState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(state.m.size()) + " moment buffers for " +
                         std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols() || v.rows() != m.rows() ||
        v.cols() != m.cols() || p.grad.size() != p.value.size()) {
      throw DimensionError("adam_step: moment shape " + m.shape_string() + " drifted from '" +
                           p.name + "' " + p.value.shape_string());
    }
    auto val = p.value.values();
    auto g = p.grad.values();
    auto mv = m.values();
    auto vv = v.values();
    for (std::size_t k = 0; k < val.size(); ++k) {
      mv[k] = state.beta1 * mv[k] + (1.0 - state.beta1) * g[k];
      vv[k] = state.beta2 * vv[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double m_hat = mv[k] / c1;
      const double v_hat = vv[k] / c2;
      val[k] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

// --------------------------------------------------------------- train loop

MetricVector evaluate_indices(const HeloModel& model, std::span<const Sample> samples,
                              std::span<const std::size_t> indices, std::size_t threads) {
  std::vector<Sample> subset;
  subset.reserve(indices.size());
  for (std::size_t i : indices) subset.push_back(samples[i]);
  const auto preds = model.predict_all(subset, threads);
  std::vector<EmotionDistribution> truths;
  truths.reserve(subset.size());
  for (const auto& s : subset) truths.push_back(s.label);
  return evaluate_set(preds, truths);
}

std::vector<EpochRecord> train(HeloModel& model, AdamState& adam, std::span<const Sample> samples,
                               const Fold& fold, const TrainOptions& options) {
  const TrainConfig& config = model.config();
  for (std::size_t i : fold.train)
    if (i >= samples.size()) throw SplitError("train: fold index out of range");
  for (std::size_t i : fold.test)
    if (i >= samples.size()) throw SplitError("train: fold index out of range");
  if (config.epochs > 0 && fold.train.empty()) throw EmptySetError("train: empty training set");

  const ParameterList params = model.parameters();
  if (adam.m.size() != params.size()) adam = make_adam_state(params, config);

  std::optional<Matrix> m_gt;
  const bool global = options.global_label_correlation.value_or(config.global_label_correlation);
  if (global && model.uses_label_correlation()) {
    std::vector<EmotionDistribution> labels;
    for (std::size_t i : fold.train) labels.push_back(samples[i].label);
    m_gt = batch_label_correlation(labels).values;
  }

  Rng shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(fold.train);
  std::vector<EpochRecord> history;
  history.reserve(config.epochs);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0, kld_sum = 0.0, cc_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const Sample*> batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) batch.push_back(&samples[order[k]]);
      zero_grads(params);
      const std::string where =
          "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches + 1);
      BatchResult r;
      try {
        r = model.batch_loss(batch, true, nullptr, m_gt ? &*m_gt : nullptr, options.threads);
      } catch (const NumericalError& e) {
        throw DivergenceError("training diverged at " + where + ": " + e.what());
      }
      if (!std::isfinite(r.loss)) throw DivergenceError("training diverged: non-finite loss at " + where);
      adam_step(params, adam, config.learning_rate);
      loss_sum += r.loss;
      kld_sum += r.kld;
      cc_sum += r.cc;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.kld = kld_sum / static_cast<double>(batches);
    rec.cc = cc_sum / static_cast<double>(batches);
    if (!fold.test.empty()) rec.test = evaluate_indices(model, samples, fold.test, options.threads);
    if (options.on_epoch) options.on_epoch(rec);
    history.push_back(rec);
  }
  return history;
}

// ----------------------------------------------------------------- ablation

HeloModel build_ablated(const DatasetSchema& schema, const TrainConfig& config,
                        const AblationSpec& ablation) {
  return HeloModel(schema, config, ablation);
}

std::vector<AblationSpec> ablation_grid(const DatasetSchema& schema) {
  std::vector<AblationSpec> grid(4);
  grid[1].disable_capf = true;
  grid[2].disable_othm = true;
  grid[3].disable_lcdca = true;
  for (const auto& m : schema.modalities) {
    AblationSpec a;
    a.excluded_modalities = {m.name};
    grid.push_back(a);
  }
  return grid;
}

// ----------------------------------------------------------- gradient check

TrainConfig grad_check_config(std::uint64_t seed) {
  TrainConfig c;
  c.embed_dim = 8;
  c.heads = 2;
  c.ffn_dim = 8;
  c.tokens = 2;
  c.head_hidden1 = 8;
  c.head_hidden2 = 8;
  c.batch_size = 4;
  c.seed = seed;
  return c;
}

GradCheckReport pipeline_grad_check(const DatasetSchema& schema, std::uint64_t seed, double eps,
                                    const AblationSpec& ablation) {
  const auto samples = generate_synthetic(schema, 2, 2, seed);
  HeloModel model(schema, grad_check_config(seed), ablation);
  std::vector<const Sample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  // The plan is treated as a constant of the forward pass, so it is solved
  // once and held fixed while parameters are perturbed.
  const std::vector<TransportPlan> plans = model.batch_loss(batch, false).plans;
  const std::vector<TransportPlan>* fixed = plans.empty() ? nullptr : &plans;
  const ParameterList params = model.parameters();
  // The loss is reported relative to its value at the unperturbed point, with
  // each component differenced before summing. The gradient is unchanged, but
  // rounding now scales with the size of the change instead of with the large
  // constant part of the correlation term.
  const BatchResult base = model.batch_loss(batch, false, fixed);
  const double lambda = model.config().lambda_cc;
  return grad_check(
      [&](bool with_grad) {
        const BatchResult r = model.batch_loss(batch, with_grad, fixed);
        return (r.kld - base.kld) + lambda * (r.cc - base.cc);
      },
      params, eps);
}

// -------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'H', 'E', 'L', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.storage().data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
}

void read_matrix(std::istream& in, Matrix& m, const std::string& what) {
  in.read(reinterpret_cast<char*>(m.values().data()),
          static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw ParseError("checkpoint: truncated while reading " + what);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, HeloModel& model, const AdamState& adam,
                     const RunInfo& run) {
  const ParameterList params = model.parameters();
  if (adam.m.size() != params.size() || adam.v.size() != params.size()) {
    throw DimensionError("save_checkpoint: Adam state does not match the model");
  }
  nlohmann::ordered_json h;
  h["format_version"] = kCheckpointVersion;
  h["config_hash"] = model.config().hash();
  h["config"] = nlohmann::ordered_json::parse(model.config().to_json());
  h["ablation"] = nlohmann::ordered_json::parse(model.ablation().to_json());
  h["schema"] = nlohmann::ordered_json::parse(schema_to_json(model.schema()));
  h["run"] = {{"split", run.split}, {"fold", run.fold}, {"epochs_trained", run.epochs_trained}};
  h["adam"] = {{"step", adam.step}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
  auto& list = h["parameters"] = nlohmann::ordered_json::array();
  for (const Parameter* p : params)
    list.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  const std::string header = h.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Parameter* p : params) write_matrix(out, p->value);
  for (const Matrix& m : adam.m) write_matrix(out, m);
  for (const Matrix& v : adam.v) write_matrix(out, v);
  if (!out) throw ValidationError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw ParseError("checkpoint: '" + path.string() + "' is not a checkpoint file");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported format version " + std::to_string(version));
  }
  if (len > (std::uint64_t{1} << 30)) throw ParseError("checkpoint: implausible header length");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError("checkpoint: truncated header");

  Checkpoint ck;
  try {
    const auto h = nlohmann::json::parse(header);
    TrainConfig config;
    config.merge_json(h.at("config").dump());
    if (config.hash() != h.at("config_hash").get<std::string>()) {
      throw ParseError("checkpoint: config hash mismatch");
    }
    DatasetSchema schema = schema_from_json(h.at("schema").dump());
    AblationSpec ablation = AblationSpec::from_json(h.at("ablation").dump());
    ck.model = std::make_unique<HeloModel>(schema, config, ablation);
    ck.run.split = h.at("run").at("split").get<std::string>();
    ck.run.fold = h.at("run").at("fold").get<int>();
    ck.run.epochs_trained = h.at("run").at("epochs_trained").get<std::size_t>();
    const auto& a = h.at("adam");
    const ParameterList params = ck.model->parameters();
    ck.adam = make_adam_state(params, config);
    ck.adam.step = a.at("step").get<std::size_t>();
    ck.adam.beta1 = a.at("beta1").get<double>();
    ck.adam.beta2 = a.at("beta2").get<double>();
    ck.adam.eps = a.at("eps").get<double>();
    const auto& list = h.at("parameters");
    if (list.size() != params.size()) {
      throw ParseError("checkpoint: " + std::to_string(list.size()) + " parameters stored, model has " +
                       std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& e = list[i];
      if (e.at("name").get<std::string>() != params[i]->name ||
          e.at("rows").get<std::size_t>() != params[i]->value.rows() ||
          e.at("cols").get<std::size_t>() != params[i]->value.cols()) {
        throw ParseError("checkpoint: parameter " + std::to_string(i) + " ('" +
                         e.at("name").get<std::string>() + "') does not match '" +
                         params[i]->name + "' " + params[i]->value.shape_string());
      }
    }
    for (Parameter* p : params) read_matrix(in, p->value, p->name);
    for (std::size_t i = 0; i < params.size(); ++i) read_matrix(in, ck.adam.m[i], "adam.m");
    for (std::size_t i = 0; i < params.size(); ++i) read_matrix(in, ck.adam.v[i], "adam.v");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

// ---------------------------------------------------------------------- CSV

std::string metadata_line(const TrainConfig& config) {
  return "# helo format_version=1 config_hash=" + config.hash() +
         " seed=" + std::to_string(config.seed);
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_history_csv(std::ostream& out, const TrainConfig& config,
                       std::span<const EpochRecord> history) {
  out << metadata_line(config) << '\n';
  out << "epoch,loss";
  for (auto key : kMetricKeys) out << ',' << key;
  out << ",train_kld,train_cc\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_double(r.loss);
    for (std::size_t k = 0; k < kMetricKeys.size(); ++k) {
      out << ',';
      if (r.test) out << format_double(r.test->as_array()[k]);
    }
    out << ',' << format_double(r.kld) << ',' << format_double(r.cc) << '\n';
  }
}

}  // namespace helo
