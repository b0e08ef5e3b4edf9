#include "helo/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "helo/data.hpp"
#include "helo/metrics.hpp"
#include "helo/model.hpp"
#include "helo/training.hpp"

namespace helo {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::numerical:
    case ErrorKind::divergence:
    case ErrorKind::determinism:
      return kExitNumerical;
    default:
      return kExitValidation;
  }
}

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  return out;
}

/// Flags shared by commands that build a TrainConfig. Flags win over --config.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, heads, embed_dim, ffn_dim, depth, tokens;
  std::optional<double> lr, lambda_cc, epsilon, ratio;
  bool global_correlation = false;
  bool literal_transport = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--seed", seed, "Random seed");
    app.add_option("--epochs", epochs, "Training epochs");
    app.add_option("--batch-size", batch_size, "Mini-batch size");
    app.add_option("--lr", lr, "Adam learning rate");
    app.add_option("--heads", heads, "Attention heads");
    app.add_option("--embed-dim", embed_dim, "Embedding width d");
    app.add_option("--ffn-dim", ffn_dim, "Encoder feed-forward width");
    app.add_option("--depth", depth, "Encoder layers");
    app.add_option("--tokens", tokens, "Tokens per physiological modality");
    app.add_option("--lambda-cc", lambda_cc, "Weight of the correlation loss");
    app.add_option("--sinkhorn-epsilon", epsilon, "Entropic regularization");
    app.add_option("--split-ratio", ratio, "Per-subject train fraction");
    app.add_flag("--global-correlation", global_correlation,
                 "Ground-truth label correlation from the whole training set");
    app.add_flag("--literal-transport", literal_transport,
                 "Do not rescale the transported stream by the token count");
  }

  [[nodiscard]] TrainConfig build() const {
    TrainConfig c;
    if (!config_path.empty()) c.merge_json(read_file(config_path));
    if (seed) c.seed = *seed;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (lr) c.learning_rate = *lr;
    if (heads) c.heads = *heads;
    if (embed_dim) c.embed_dim = *embed_dim;
    if (ffn_dim) c.ffn_dim = *ffn_dim;
    if (depth) c.encoder_depth = *depth;
    if (tokens) c.tokens = *tokens;
    if (lambda_cc) c.lambda_cc = *lambda_cc;
    if (epsilon) c.sinkhorn.epsilon = *epsilon;
    if (ratio) c.split_ratio = *ratio;
    if (global_correlation) c.global_label_correlation = true;
    if (literal_transport) c.rescale_transport = false;
    c.validate();
    return c;
  }
};

std::vector<std::string> subset_names() { return {"test", "train", "all"}; }

SplitPlan make_split(std::span<const Sample> samples, const TrainConfig& config, SplitMode mode) {
  return mode == SplitMode::loso ? split_loso(samples)
                                 : split_subject_dependent(samples, config.split_ratio, config.seed);
}

void print_metrics_text(std::ostream& out, const std::string& label, const MetricVector& m) {
  out << std::left << std::setw(14) << "measure" << label << '\n';
  const auto values = m.as_array();
  for (std::size_t k = 0; k < values.size(); ++k) {
    out << std::left << std::setw(14) << kMetricTitles[k] << std::fixed << std::setprecision(6)
        << values[k] << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

void write_metric_header(std::ostream& out, const char* first) {
  out << first;
  for (auto key : kMetricKeys) out << ',' << key;
  out << '\n';
}

void write_metric_row(std::ostream& out, const std::string& name, const MetricVector& m) {
  out << name;
  for (double v : m.as_array()) out << ',' << format_double(v);
  out << '\n';
}

// ------------------------------------------------------------------ generate

struct GenerateArgs {
  std::string schema = "dmer";
  int subjects = 0;
  int trials = 0;
  std::uint64_t seed = 42;
  std::string out;
  std::string schema_out;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  const DatasetSchema schema = resolve_schema(a.schema);
  const auto samples = generate_synthetic(schema, a.subjects, a.trials, a.seed);
  save_dataset(a.out, samples, schema);
  if (!a.schema_out.empty()) {
    auto s = open_output(a.schema_out);
    s << schema_to_json(schema) << '\n';
  }
  out << "wrote " << samples.size() << " samples (" << schema.name << ", seed " << a.seed
      << ") to " << a.out << '\n';
  return kExitOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string data;
  std::string schema = "dmer";
  std::string split = "subject-dependent";
  std::optional<int> fold;
  std::string out_dir = ".";
  std::string sinkhorn_trace;
  bool quiet = false;
  bool disable_capf = false, disable_othm = false, disable_lcdca = false;
  std::vector<std::string> exclude;
  ConfigFlags config;
};

void write_run_outputs(const fs::path& dir, const std::string& suffix, HeloModel& model,
                       const AdamState& adam, const RunInfo& run,
                       std::span<const EpochRecord> history) {
  {
    auto f = open_output(dir / ("history" + suffix + ".csv"));
    write_history_csv(f, model.config(), history);
  }
  save_checkpoint(dir / ("checkpoint" + suffix + ".bin"), model, adam, run);
  if (model.uses_label_correlation()) {
    auto f = open_output(dir / ("correlation" + suffix + ".csv"));
    f << metadata_line(model.config()) << '\n';
    f.precision(17);
    write_correlation_csv(f, model.learned_correlation(), model.schema().label_names);
  }
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig config = a.config.build();
  const DatasetSchema schema = resolve_schema(a.schema);
  AblationSpec ablation;
  ablation.disable_capf = a.disable_capf;
  ablation.disable_othm = a.disable_othm;
  ablation.disable_lcdca = a.disable_lcdca;
  ablation.excluded_modalities = a.exclude;
  ablation.validate(schema);
  const SplitMode mode = parse_split_mode(a.split);
  const auto samples = load_dataset(fs::path(a.data), schema);
  if (samples.empty()) throw EmptySetError("train: dataset '" + a.data + "' has no samples");
  const SplitPlan plan = make_split(samples, config, mode);

  std::vector<std::size_t> folds;
  if (mode == SplitMode::loso && a.fold) {
    if (*a.fold < 0 || static_cast<std::size_t>(*a.fold) >= plan.folds.size()) {
      throw SplitError("train: fold " + std::to_string(*a.fold) + " out of range (" +
                       std::to_string(plan.folds.size()) + " folds)");
    }
    folds.push_back(static_cast<std::size_t>(*a.fold));
  } else {
    for (std::size_t f = 0; f < plan.folds.size(); ++f) folds.push_back(f);
  }

  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  const std::size_t threads = worker_threads();
  for (std::size_t f : folds) {
    HeloModel model = build_ablated(schema, config, ablation);
    AdamState adam = make_adam_state(model.parameters(), config);
    TrainOptions options;
    options.threads = threads;
    const std::string tag =
        mode == SplitMode::loso ? " fold " + std::to_string(f) + " (subject " +
                                      std::to_string(plan.folds[f].held_out_subject) + ")"
                                : "";
    if (!a.quiet) {
      options.on_epoch = [&](const EpochRecord& r) {
        out << "epoch " << r.epoch << '/' << config.epochs << tag << " loss "
            << format_double(r.loss) << " kld " << format_double(r.kld) << " cc "
            << format_double(r.cc);
        if (r.test) out << " test_kl " << format_double(r.test->kl);
        out << '\n';
      };
    }
    const auto history = train(model, adam, samples, plan.folds[f], options);
    RunInfo run;
    run.split = to_string(mode);
    run.fold = mode == SplitMode::loso ? static_cast<int>(f) : -1;
    run.epochs_trained = history.size();
    const std::string suffix = mode == SplitMode::loso ? "_fold" + std::to_string(f) : "";
    write_run_outputs(dir, suffix, model, adam, run, history);

    if (!a.sinkhorn_trace.empty() && model.behavioral_modality() && !ablation.disable_othm) {
      SampleTrace trace;
      model.forward(samples[plan.folds[f].train.front()], model.label_state(), &trace);
      fs::path p(a.sinkhorn_trace);
      if (!suffix.empty()) p.replace_filename(p.stem().string() + suffix + p.extension().string());
      auto t = open_output(p);
      t << metadata_line(config) << '\n';
      write_violation_csv(t, trace.plan);
    }
    out << "trained " << ablation.label() << tag << " for " << history.size()
        << " epochs; outputs in " << dir.string() << '\n';
  }
  return kExitOk;
}

// ------------------------------------------------------------------ evaluate

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::string subset = "test";
  std::string format = "text";
  std::string method;
  std::string out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const HeloModel& model = *ck.model;
  const auto samples = load_dataset(fs::path(a.data), model.schema());
  std::vector<std::size_t> indices;
  if (a.subset == "all") {
    for (std::size_t i = 0; i < samples.size(); ++i) indices.push_back(i);
  } else {
    const SplitMode mode = parse_split_mode(ck.run.split);
    const SplitPlan plan = make_split(samples, model.config(), mode);
    const std::size_t f = ck.run.fold < 0 ? 0 : static_cast<std::size_t>(ck.run.fold);
    if (f >= plan.folds.size()) throw SplitError("evaluate: checkpoint fold is not in this dataset");
    indices = a.subset == "train" ? plan.folds[f].train : plan.folds[f].test;
  }
  if (indices.empty()) throw EmptySetError("evaluate: the " + a.subset + " subset is empty");
  const MetricVector m = evaluate_indices(model, samples, indices, worker_threads());
  const std::string name = a.method.empty() ? model.ablation().label() : a.method;

  std::ostringstream text;
  if (a.format == "csv") {
    text << metadata_line(model.config()) << '\n';
    write_metric_header(text, "method");
    write_metric_row(text, name, m);
  } else {
    print_metrics_text(text, name + " (" + a.subset + ", " + std::to_string(indices.size()) +
                                 " samples)", m);
  }
  out << text.str();
  if (!a.out.empty()) {
    auto f = open_output(a.out);
    f << text.str();
  }
  return kExitOk;
}

// -------------------------------------------------------------------- ablate

struct AblateArgs {
  std::string data;
  std::string schema = "dmer";
  std::string out = "ablation.csv";
  bool quiet = false;
  ConfigFlags config;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  const TrainConfig config = a.config.build();
  const DatasetSchema schema = resolve_schema(a.schema);
  const auto samples = load_dataset(fs::path(a.data), schema);
  if (samples.empty()) throw EmptySetError("ablate: dataset '" + a.data + "' has no samples");
  const SplitPlan plan = split_subject_dependent(samples, config.split_ratio, config.seed);
  const Fold& fold = plan.folds.front();
  if (fold.test.empty()) throw EmptySetError("ablate: the test split is empty");

  const auto grid = ablation_grid(schema);
  std::vector<std::pair<std::string, MetricVector>> rows;
  for (const auto& spec : grid) {
    HeloModel model = build_ablated(schema, config, spec);
    AdamState adam = make_adam_state(model.parameters(), config);
    TrainOptions options;
    options.threads = worker_threads();
    const auto history = train(model, adam, samples, fold, options);
    const MetricVector m = history.empty()
                               ? evaluate_indices(model, samples, fold.test, options.threads)
                               : *history.back().test;
    for (double v : m.as_array()) {
      if (!std::isfinite(v)) {
        throw NumericalError("ablate: variant '" + spec.label() + "' produced a non-finite metric");
      }
    }
    if (!a.quiet) out << "variant " << spec.label() << " kl " << format_double(m.kl) << '\n';
    rows.emplace_back(spec.label(), m);
  }
  auto f = open_output(a.out);
  f << metadata_line(config) << '\n';
  write_metric_header(f, "variant");
  for (const auto& [name, m] : rows) write_metric_row(f, name, m);
  out << "wrote " << rows.size() << " variants to " << a.out << '\n';
  return kExitOk;
}

// ----------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::string schema = "dmer";
  std::uint64_t seed = 42;
  double eps = 3e-5;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const GradCheckReport r = pipeline_grad_check(resolve_schema(a.schema), a.seed, a.eps);
  out << "max relative error: " << std::scientific << std::setprecision(3) << r.max_relative_error
      << '\n';
  out << "worst entry: " << r.worst_parameter << '[' << r.worst_index << "] analytic "
      << r.worst_analytic << " numeric " << r.worst_numeric << '\n';
  out.unsetf(std::ios::floatfield);
  out << "entries checked: " << r.entries_checked << '\n';
  if (!r.passed(a.tolerance)) {
    out << "FAILED: exceeds tolerance " << a.tolerance << '\n';
    return kExitNumerical;
  }
  return kExitOk;
}

// -------------------------------------------------------------------- report

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string format = "text";
  std::string out;
};

/// Reads "method,cheb,...,inter" rows (comment lines start with '#').
void read_metric_csv(const std::string& path, ScoreTable& table) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read '" + path + "'");
  std::string line;
  std::vector<std::string> columns;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (columns.empty()) {
      columns = cells;
      continue;
    }
    if (cells.size() > columns.size()) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": too many cells");
    }
    std::vector<std::optional<double>> scores(kMetricKeys.size());
    for (std::size_t c = 1; c < cells.size(); ++c) {
      for (std::size_t k = 0; k < kMetricKeys.size(); ++k) {
        if (columns[c] != kMetricKeys[k] || cells[c].empty()) continue;
        try {
          scores[k] = std::stod(cells[c]);
        } catch (const std::exception&) {
          throw ParseError(path + ":" + std::to_string(line_no) + ": bad number in column '" +
                           columns[c] + "'");
        }
      }
    }
    table.methods.push_back(cells.empty() ? std::string() : cells[0]);
    table.scores.push_back(std::move(scores));
  }
}

int cmd_report(const ReportArgs& a, std::ostream& out) {
  ScoreTable table;
  for (auto title : kMetricTitles) table.metrics.emplace_back(title);
  table.directions.assign(kMetricDirections.begin(), kMetricDirections.end());
  for (const auto& path : a.inputs) read_metric_csv(path, table);
  const RankTable ranks = average_rank(table);
  std::ostringstream text;
  if (a.format == "csv") {
    render_rank_table_csv(text, ranks);
  } else {
    render_rank_table_text(text, ranks);
  }
  out << text.str();
  if (!a.out.empty()) {
    auto f = open_output(a.out);
    f << text.str();
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-modal emotion distribution learning", "helo"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic JSON-lines dataset");
  generate->add_option("--schema", gen.schema, "dmer, wesad or a schema JSON file")
      ->capture_default_str();
  generate->add_option("--subjects", gen.subjects, "Number of subjects")->required();
  generate->add_option("--trials", gen.trials, "Trials per subject")->required();
  generate->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  generate->add_option("--out", gen.out, "Output JSONL path")->required();
  generate->add_option("--schema-out", gen.schema_out, "Also write the schema JSON here");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train on a dataset");
  train_cmd->add_option("--data", tr.data, "Dataset JSONL")->required();
  train_cmd->add_option("--schema", tr.schema, "dmer, wesad or a schema JSON file")
      ->capture_default_str();
  train_cmd->add_option("--split", tr.split, "subject-dependent or loso")->capture_default_str();
  train_cmd->add_option("--fold", tr.fold, "Single LOSO fold to run (default: all)");
  train_cmd->add_option("--out-dir", tr.out_dir, "Output directory")->capture_default_str();
  train_cmd->add_option("--sinkhorn-trace", tr.sinkhorn_trace,
                        "CSV of the per-iteration marginal violation for one sample");
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch progress");
  train_cmd->add_flag("--disable-capf", tr.disable_capf, "Concatenate physiological tokens");
  train_cmd->add_flag("--disable-othm", tr.disable_othm, "Concatenate instead of transport fusion");
  train_cmd->add_flag("--disable-lcdca", tr.disable_lcdca, "Pool fused tokens into the head");
  train_cmd->add_option("--exclude", tr.exclude, "Modalities to drop");
  tr.config.attach(*train_cmd);

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  evaluate->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  evaluate->add_option("--data", ev.data, "Dataset JSONL")->required();
  evaluate->add_option("--subset", ev.subset, "test, train or all")
      ->check(CLI::IsMember(subset_names()))
      ->capture_default_str();
  evaluate->add_option("--format", ev.format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}))
      ->capture_default_str();
  evaluate->add_option("--method", ev.method, "Row name in CSV output");
  evaluate->add_option("--out", ev.out, "Also write the output here");

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Train every component and modality ablation");
  ablate->add_option("--data", ab.data, "Dataset JSONL")->required();
  ablate->add_option("--schema", ab.schema, "dmer, wesad or a schema JSON file")
      ->capture_default_str();
  ablate->add_option("--out", ab.out, "Grid CSV path")->capture_default_str();
  ablate->add_flag("--quiet", ab.quiet, "No per-variant progress");
  ab.config.attach(*ablate);

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the pipeline");
  gradcheck->add_option("--schema", gc.schema, "dmer, wesad or a schema JSON file")
      ->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "Random seed")->capture_default_str();
  gradcheck->add_option("--eps", gc.eps, "Central-difference step")->capture_default_str();
  gradcheck->add_option("--tolerance", gc.tolerance, "Pass threshold")->capture_default_str();

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "Rank table from evaluation CSVs");
  report->add_option("inputs", rp.inputs, "Evaluation CSV files")->required();
  report->add_option("--format", rp.format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}))
      ->capture_default_str();
  report->add_option("--out", rp.out, "Also write the table here");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    const auto used = app.get_subcommands();
    err << (used.empty() ? app.help() : used.front()->help());
    return kExitUsage;
  }

  try {
    if (*generate) return cmd_generate(gen, out);
    if (*train_cmd) return cmd_train(tr, out);
    if (*evaluate) return cmd_evaluate(ev, out);
    if (*ablate) return cmd_ablate(ab, out);
    if (*gradcheck) return cmd_gradcheck(gc, out);
    if (*report) return cmd_report(rp, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitUsage;
}

}  // namespace helo
