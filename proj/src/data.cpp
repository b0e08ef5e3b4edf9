#include "helo/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "helo/error.hpp"

namespace helo {

namespace {

using ordered_json = nlohmann::ordered_json;

const std::vector<std::string> kShortPanasLabels = {
    "inspired", "alert", "excited", "enthusiastic", "determined",
    "afraid",   "upset", "nervous", "scared",       "distressed"};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string group_name(ModalityGroup g) {
  return g == ModalityGroup::physiological ? "physiological" : "behavioral";
}

ModalityGroup parse_group(const std::string& s) {
  if (s == "physiological") return ModalityGroup::physiological;
  if (s == "behavioral") return ModalityGroup::behavioral;
  throw ValidationError("unknown modality group '" + s + "'");
}

// Lower-triangular L with L Lᵀ = a. Throws when a is not positive definite.
Matrix cholesky(const Matrix& a) {
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (s <= 0.0) throw NumericalError("planted correlation is not positive definite");
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

Matrix covariance_to_correlation(const Matrix& cov) {
  Matrix out(cov.rows(), cov.cols());
  for (std::size_t i = 0; i < cov.rows(); ++i)
    for (std::size_t j = 0; j < cov.cols(); ++j)
      out(i, j) = cov(i, j) / std::sqrt(cov(i, i) * cov(j, j));
  return out;
}

constexpr double kSubjectOffsetStd = 0.5;
constexpr double kFeatureNoiseStd = 0.3;

}  // namespace

// -------------------------------------------------------------------- schema

std::size_t DatasetSchema::index_of(const std::string& modality) const {
  for (std::size_t i = 0; i < modalities.size(); ++i)
    if (modalities[i].name == modality) return i;
  throw ValidationError("schema '" + name + "' has no modality '" + modality + "'");
}

bool DatasetSchema::has(const std::string& modality) const {
  return std::any_of(modalities.begin(), modalities.end(),
                     [&](const ModalitySpec& m) { return m.name == modality; });
}

void DatasetSchema::validate() const {
  std::size_t behavioral = 0, physiological = 0;
  for (const auto& m : modalities) {
    if (m.dim == 0) throw ValidationError("modality '" + m.name + "' has zero dimension");
    if (m.tokens == 0 || m.dim % m.tokens != 0) {
      throw ValidationError("modality '" + m.name + "': " + std::to_string(m.tokens) +
                            " tokens do not divide dimension " + std::to_string(m.dim));
    }
    (m.group == ModalityGroup::behavioral ? behavioral : physiological) += 1;
  }
  if (behavioral != 1) {
    throw ValidationError("schema '" + name + "' must have exactly one behavioral modality, has " +
                          std::to_string(behavioral));
  }
  if (physiological == 0) {
    throw ValidationError("schema '" + name + "' has no physiological modality");
  }
  if (label_names.size() < 2) throw ValidationError("schema '" + name + "' needs >= 2 labels");
}

DatasetSchema dmer_schema() {
  return {"dmer",
          {{"eeg", 90, ModalityGroup::physiological, 6},
           {"gsr", 28, ModalityGroup::physiological, 4},
           {"ppg", 27, ModalityGroup::physiological, 3},
           {"video", 768, ModalityGroup::behavioral, 6}},
          kShortPanasLabels};
}

DatasetSchema wesad_schema() {
  return {"wesad",
          {{"ecg", 73, ModalityGroup::physiological, 1},
           {"eda", 4, ModalityGroup::physiological, 1},
           {"emg", 14, ModalityGroup::physiological, 2},
           {"acc", 12, ModalityGroup::behavioral, 3}},
          kShortPanasLabels};
}

std::string schema_to_json(const DatasetSchema& schema) {
  ordered_json j;
  j["format_version"] = 1;
  j["name"] = schema.name;
  j["modalities"] = ordered_json::array();
  for (const auto& m : schema.modalities) {
    j["modalities"].push_back(
        {{"name", m.name}, {"dim", m.dim}, {"group", group_name(m.group)}, {"tokens", m.tokens}});
  }
  j["labels"] = schema.label_names;
  return j.dump(2);
}

DatasetSchema schema_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("schema: ") + e.what());
  }
  try {
    if (j.value("format_version", 0) != 1) {
      throw ParseError("schema: unsupported or missing format_version (expected 1)");
    }
    DatasetSchema s;
    s.name = j.at("name").get<std::string>();
    for (const auto& m : j.at("modalities")) {
      s.modalities.push_back({m.at("name").get<std::string>(), m.at("dim").get<std::size_t>(),
                              parse_group(m.at("group").get<std::string>()),
                              m.value("tokens", std::size_t{1})});
    }
    s.label_names = j.at("labels").get<std::vector<std::string>>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("schema: ") + e.what());
  }
}

DatasetSchema resolve_schema(const std::string& name_or_path) {
  const std::string key = lower(name_or_path);
  if (key == "dmer") return dmer_schema();
  if (key == "wesad") return wesad_schema();
  std::ifstream in(name_or_path);
  if (!in) throw ValidationError("unknown schema '" + name_or_path + "' (not dmer, wesad or a file)");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return schema_from_json(buffer.str());
}

// --------------------------------------------------------------------- PANAS

EmotionDistribution panas_to_distribution(std::span<const int> scores, PanasTransform transform) {
  if (scores.empty()) throw ValidationError("panas: no scores");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] < 1 || scores[i] > 5) {
      throw ValidationError("panas: score " + std::to_string(scores[i]) + " at position " +
                            std::to_string(i) + " is outside 1..5");
    }
  }
  std::vector<double> probs(scores.size());
  if (transform == PanasTransform::sum_normalize) {
    double total = 0.0;
    for (int s : scores) total += s;
    for (std::size_t i = 0; i < scores.size(); ++i) probs[i] = scores[i] / total;
  } else {
    Matrix row(1, scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) row(0, i) = scores[i];
    const Matrix p = softmax_rows(row);
    probs.assign(p.values().begin(), p.values().end());
  }
  return {std::move(probs)};
}

// ------------------------------------------------------------------ planted

std::vector<std::size_t> planted_fear_cluster() { return {5, 7, 8}; }

Matrix planted_latent_correlation(std::size_t labels) {
  Matrix c = Matrix::identity(labels);
  auto set = [&](std::size_t i, std::size_t j, double v) {
    if (i == j) return;
    c(i, j) = v;
    c(j, i) = v;
  };
  if (labels == kShortPanasLabels.size()) {
    const std::vector<std::size_t> positive = {0, 1, 2, 3, 4};
    const std::vector<std::size_t> fear = planted_fear_cluster();
    const std::vector<std::size_t> distress = {6, 9};
    for (auto i : positive)
      for (auto j : positive) set(i, j, 0.5);
    for (auto i : fear)
      for (auto j : fear) set(i, j, 0.8);
    for (auto i : distress)
      for (auto j : distress) set(i, j, 0.5);
    for (auto i : fear)
      for (auto j : distress) set(i, j, 0.3);
    for (auto i : positive) {
      for (auto j : fear) set(i, j, -0.2);
      for (auto j : distress) set(i, j, -0.2);
    }
  } else {
    const std::size_t half = labels / 2;
    for (std::size_t i = 0; i < labels; ++i)
      for (std::size_t j = 0; j < labels; ++j) set(i, j, (i < half) == (j < half) ? 0.5 : -0.1);
  }
  return c;
}

Matrix planted_label_correlation(std::size_t labels) {
  const Matrix sigma = planted_latent_correlation(labels);
  Matrix h = Matrix::identity(labels);
  for (double& x : h.values()) x -= 1.0 / static_cast<double>(labels);
  return covariance_to_correlation(matmul(matmul(h, sigma), h));
}

// ---------------------------------------------------------------- generator

std::vector<Sample> generate_synthetic(const DatasetSchema& schema, int n_subjects,
                                       int trials_per_subject, std::uint64_t seed) {
  schema.validate();
  if (n_subjects <= 0 || trials_per_subject <= 0) {
    throw ValidationError("generate_synthetic: subject and trial counts must be positive");
  }
  const std::size_t l = schema.label_count();
  const Matrix chol = cholesky(planted_latent_correlation(l));
  Rng rng(seed);

  std::vector<Matrix> maps;
  for (const auto& m : schema.modalities) {
    Matrix a(m.dim, l);
    const double s = 1.0 / std::sqrt(static_cast<double>(l));
    for (double& x : a.values()) x = s * rng.normal();
    maps.push_back(std::move(a));
  }

  std::vector<std::vector<std::vector<double>>> offsets(static_cast<std::size_t>(n_subjects));
  for (auto& subject : offsets) {
    for (const auto& m : schema.modalities) {
      std::vector<double> o(m.dim);
      for (double& x : o) x = kSubjectOffsetStd * rng.normal();
      subject.push_back(std::move(o));
    }
  }

  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(n_subjects) * static_cast<std::size_t>(trials_per_subject));
  std::vector<double> noise(l), latent(l), warped(l);
  for (int s = 0; s < n_subjects; ++s) {
    for (int t = 0; t < trials_per_subject; ++t) {
      for (double& x : noise) x = rng.normal();
      for (std::size_t i = 0; i < l; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k <= i; ++k) acc += chol(i, k) * noise[k];
        latent[i] = acc;
      }
      Sample sample;
      sample.subject = s + 1;
      sample.trial = t + 1;
      const Matrix label = softmax_rows(Matrix::row_vector(latent));
      sample.label.probs.assign(label.values().begin(), label.values().end());

      for (std::size_t mi = 0; mi < schema.modalities.size(); ++mi) {
        const auto& spec = schema.modalities[mi];
        for (std::size_t i = 0; i < l; ++i) {
          const double z = latent[i];
          warped[i] = spec.group == ModalityGroup::physiological ? std::tanh(1.5 * z)
                                                                 : z + 0.5 * (z * z - 1.0);
        }
        std::vector<double> f(spec.dim);
        const auto& offset = offsets[static_cast<std::size_t>(s)][mi];
        for (std::size_t r = 0; r < spec.dim; ++r) {
          double acc = 0.0;
          for (std::size_t k = 0; k < l; ++k) acc += maps[mi](r, k) * warped[k];
          f[r] = acc + offset[r] + kFeatureNoiseStd * rng.normal();
        }
        sample.features.push_back(std::move(f));
      }
      samples.push_back(std::move(sample));
    }
  }
  return samples;
}

// ----------------------------------------------------------------- JSONL I/O

void write_sample_jsonl(std::ostream& out, const Sample& sample, const DatasetSchema& schema) {
  ordered_json j;
  j["subject"] = sample.subject;
  j["trial"] = sample.trial;
  ordered_json features = ordered_json::object();
  for (std::size_t m = 0; m < schema.modalities.size(); ++m)
    features[schema.modalities[m].name] = sample.features.at(m);
  j["features"] = std::move(features);
  j["label"] = sample.label.probs;
  out << j.dump() << '\n';
}

void save_dataset(const std::filesystem::path& path, std::span<const Sample> samples,
                  const DatasetSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open '" + path.string() + "' for writing");
  for (const auto& s : samples) write_sample_jsonl(out, s, schema);
  if (!out) throw ValidationError("failed writing '" + path.string() + "'");
}

std::vector<Sample> load_dataset(std::istream& in, const DatasetSchema& schema) {
  schema.validate();
  std::vector<Sample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": invalid JSON (" + e.what() + ")");
    }
    auto field = [&](const char* name) -> const nlohmann::json& {
      if (!j.is_object() || !j.contains(name)) {
        throw ParseError(where + ": missing field '" + name + "'");
      }
      return j.at(name);
    };
    auto read_vector = [&](const nlohmann::json& node, const std::string& name,
                           std::size_t expected) {
      if (!node.is_array()) throw ParseError(where + ": field '" + name + "' must be an array");
      if (node.size() != expected) {
        throw ParseError(where + ": field '" + name + "' expected " + std::to_string(expected) +
                         " values, got " + std::to_string(node.size()));
      }
      std::vector<double> values;
      values.reserve(expected);
      for (const auto& v : node) {
        if (!v.is_number()) throw ParseError(where + ": field '" + name + "' has a non-number");
        const double x = v.get<double>();
        if (!std::isfinite(x)) throw ParseError(where + ": field '" + name + "' is not finite");
        values.push_back(x);
      }
      return values;
    };

    Sample s;
    const auto& subject = field("subject");
    const auto& trial = field("trial");
    if (!subject.is_number_integer()) throw ParseError(where + ": field 'subject' must be an integer");
    if (!trial.is_number_integer()) throw ParseError(where + ": field 'trial' must be an integer");
    s.subject = subject.get<int>();
    s.trial = trial.get<int>();
    const auto& features = field("features");
    if (!features.is_object()) throw ParseError(where + ": field 'features' must be an object");
    for (const auto& spec : schema.modalities) {
      if (!features.contains(spec.name)) {
        throw ParseError(where + ": missing modality '" + spec.name + "'");
      }
      s.features.push_back(read_vector(features.at(spec.name), spec.name, spec.dim));
    }
    for (auto it = features.begin(); it != features.end(); ++it) {
      if (!schema.has(it.key())) {
        throw ParseError(where + ": modality '" + it.key() + "' is not in schema '" + schema.name +
                         "'");
      }
    }
    s.label.probs = read_vector(field("label"), "label", schema.label_count());
    if (!s.label.valid(1e-6)) {
      throw ParseError(where + ": field 'label' is not a valid distribution");
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> load_dataset(const std::filesystem::path& path, const DatasetSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset '" + path.string() + "'");
  return load_dataset(in, schema);
}

// -------------------------------------------------------------------- splits

std::string to_string(SplitMode mode) {
  return mode == SplitMode::subject_dependent ? "subject-dependent" : "loso";
}

SplitMode parse_split_mode(const std::string& text) {
  const std::string key = lower(text);
  if (key == "subject-dependent" || key == "subject_dependent") return SplitMode::subject_dependent;
  if (key == "loso" || key == "subject-independent") return SplitMode::loso;
  throw ValidationError("unknown split mode '" + text + "'");
}

namespace {

std::map<int, std::vector<std::size_t>> by_subject(std::span<const Sample> samples) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups[samples[i].subject].push_back(i);
  return groups;
}

}  // namespace

SplitPlan split_subject_dependent(std::span<const Sample> samples, double ratio,
                                  std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("split ratio must lie in (0, 1]");
  SplitPlan plan;
  plan.mode = SplitMode::subject_dependent;
  Fold fold;
  Rng rng(seed);
  for (auto& [subject, indices] : by_subject(samples)) {
    if (indices.size() < 2) {
      throw SplitError("subject " + std::to_string(subject) + " has only " +
                       std::to_string(indices.size()) + " sample; at least 2 are required");
    }
    rng.shuffle(std::span<std::size_t>(indices));
    const auto n_train = static_cast<std::size_t>(
        std::ceil(ratio * static_cast<double>(indices.size()) - 1e-9));
    fold.train.insert(fold.train.end(), indices.begin(),
                      indices.begin() + static_cast<std::ptrdiff_t>(n_train));
    fold.test.insert(fold.test.end(), indices.begin() + static_cast<std::ptrdiff_t>(n_train),
                     indices.end());
  }
  std::sort(fold.train.begin(), fold.train.end());
  std::sort(fold.test.begin(), fold.test.end());
  plan.folds.push_back(std::move(fold));
  return plan;
}

SplitPlan split_loso(std::span<const Sample> samples) {
  const auto groups = by_subject(samples);
  if (groups.size() < 2) {
    throw SplitError("leave-one-subject-out needs at least 2 subjects, found " +
                     std::to_string(groups.size()));
  }
  SplitPlan plan;
  plan.mode = SplitMode::loso;
  for (const auto& [subject, indices] : groups) {
    Fold fold;
    fold.held_out_subject = subject;
    fold.test = indices;
    for (const auto& [other, other_indices] : groups)
      if (other != subject) fold.train.insert(fold.train.end(), other_indices.begin(), other_indices.end());
    std::sort(fold.train.begin(), fold.train.end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

}  // namespace helo
