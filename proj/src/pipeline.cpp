#include "rmc/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "rmc/distill.hpp"
#include "rmc/error.hpp"
#include "rmc/pruning.hpp"

namespace rmc {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kManifestVersion = 1;

std::string num(double x) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

// Write next to the target and rename, so a crash never leaves half a file.
void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    os << text;
    if (!os) throw IoError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DependencyError("missing artifact: '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ParseError("'" + path.string() + "': " + e.what());
  }
}

std::string data_section_hash(const ExperimentConfig& config) {
  std::istringstream is(canonical_text(config));
  std::string line, data;
  while (std::getline(is, line))
    if (line.rfind("data.", 0) == 0) data += line + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(data)));
  return buf;
}

EncodedSet head_rows(const EncodedSet& data, std::size_t n) {
  EncodedSet out;
  n = std::min(n, data.size());
  out.sequences.assign(data.sequences.begin(), data.sequences.begin() + static_cast<std::ptrdiff_t>(n));
  out.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

std::string seed_name(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

}  // namespace

std::string sparsity_tag(double sparsity) { return num(sparsity); }

ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& o) {
  if (o.seed) config.seeds = {*o.seed};
  if (o.out) config.output_dir = *o.out;
  if (o.strategy) config.distill.strategy = *o.strategy;
  config.validate();
  return config;
}

Pipeline::Pipeline(ExperimentConfig config, std::ostream* log)
    : config_(std::move(config)), log_(log) {
  config_.validate();
  hash_ = config_hash(config_);
  data_hash_ = data_section_hash(config_);
}

fs::path Pipeline::seed_dir(std::uint64_t seed) const { return root() / seed_name(seed); }

void Pipeline::note(const std::string& line) const {
  if (log_) *log_ << line << std::endl;
}

void Pipeline::require_stamp(const fs::path& manifest) const {
  const auto j = read_json(manifest);
  const auto got = j.value("config_hash", std::string());
  if (got != hash_)
    throw ConfigError("'" + manifest.string() + "' was built with config hash " + got +
                      ", current config hash is " + hash_);
}

void Pipeline::save_model(const fs::path& path, const TransformerClassifier& model,
                          const std::string& role) const {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(tmp.string(), model, {{"config_hash", hash_}, {"role", role}});
  fs::rename(tmp, path);
}

TransformerClassifier Pipeline::load_model(const fs::path& path) const {
  std::map<std::string, std::string> meta;
  auto model = load_checkpoint(path.string(), &meta);
  const auto it = meta.find("config_hash");
  const std::string got = it == meta.end() ? "(none)" : it->second;
  if (got != hash_)
    throw ConfigError("checkpoint '" + path.string() + "' was built with config hash " + got +
                      ", current config hash is " + hash_);
  return model;
}

// ---------------------------------------------------------------- datagen

void Pipeline::datagen() {
  const auto d = generate(config_.data);
  const fs::path dir = root() / "data";
  fs::create_directories(dir);
  write_split((dir / "train.tsv").string(), d.train);
  write_split((dir / "dev.tsv").string(), d.dev);
  write_split((dir / "adversarial.tsv").string(), d.adversarial);
  json m;
  m["schema_version"] = kManifestVersion;
  m["config_hash"] = hash_;
  m["data_hash"] = data_hash_;
  m["splits"] = {{"train", d.train.size()}, {"dev", d.dev.size()}, {"adversarial", d.adversarial.size()}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
  note("datagen: " + std::to_string(d.train.size()) + "/" + std::to_string(d.dev.size()) + "/" +
       std::to_string(d.adversarial.size()) + " examples in " + dir.string());
}

Pipeline::Data Pipeline::load_data() const {
  const fs::path dir = root() / "data";
  const auto m = read_json(dir / "manifest.json");
  const auto got = m.value("data_hash", std::string());
  if (got != data_hash_)
    throw ConfigError("'" + (dir / "manifest.json").string() + "' was generated with data hash " + got +
                      ", current [data] section hashes to " + data_hash_ + "; rerun datagen");
  Data d;
  const auto k = config_.data.num_classes();
  const auto v = config_.data.vocab_size;
  d.raw.train = read_split((dir / "train.tsv").string(), k, v);
  d.raw.dev = read_split((dir / "dev.tsv").string(), k, v);
  d.raw.adversarial = read_split((dir / "adversarial.tsv").string(), k, v);
  d.train = encode_all(d.raw.train);
  d.dev = encode_all(d.raw.dev);
  d.adversarial = encode_all(d.raw.adversarial);
  d.dev_partition = partition_by_flag(d.raw.dev);
  return d;
}

// ---------------------------------------------------------------- teacher

TransformerClassifier Pipeline::initial_model(std::uint64_t seed) const {
  return init_model(config_.model_for(seed));
}

void Pipeline::train_teacher() {
  const auto data = load_data();
  for (const auto seed : config_.seeds) {
    const fs::path dir = seed_dir(seed);
    auto teacher = initial_model(seed);
    const auto tc = config_.train_for(seed);
    train(teacher, data.train, tc, cross_entropy_loss(data.train));
    save_model(dir / "teacher.ckpt", teacher, "teacher");
    write_probs((dir / "teacher_probs.tsv").string(), predict_probs(teacher, data.train),
                teacher.config().num_classes);
    EvalReport report;
    report.config_hash = hash_;
    report.rows.push_back(
        evaluate_model("teacher", seed, teacher, data.dev, data.dev_partition, data.adversarial));
    attach_relative_bias(report.rows, "teacher");
    write_text(dir / "teacher.json", report_json(report));
    note(seed_name(seed) + " teacher: dev " + num(report.rows[0].dev_accuracy) + ", adversarial " +
         num(report.rows[0].adversarial_accuracy));
  }
}

// ---------------------------------------------------------------- students

TransformerClassifier Pipeline::pruned(std::uint64_t seed, double s, const EncodedSet& train_set) const {
  const fs::path path = seed_dir(seed) / "pruned" / ("sparsity-" + sparsity_tag(s) + ".ckpt");
  if (fs::exists(path)) {
    std::map<std::string, std::string> meta;
    auto model = load_checkpoint(path.string(), &meta);
    if (meta["config_hash"] == hash_) return model;
  }
  auto model = initial_model(seed);
  magnitude_prune_finetune(model, train_set, config_.train_for(seed), s, cross_entropy_loss(train_set));
  save_model(path, model, "pruned");
  note(seed_name(seed) + " pruned to " + sparsity_tag(s) + ": measured sparsity " + num(sparsity(model)));
  return model;
}

TransformerClassifier Pipeline::initial_student(const std::string& family, std::uint64_t seed,
                                                const EncodedSet& train_set) const {
  auto init = initial_model(seed);
  if (family == "magnitude") return init;
  if (family == "truncate") return truncate_student(init, config_.compress.student_layers);
  // heads: importance is measured on the teacher, the cut applied to the init
  const auto teacher = load_model(seed_dir(seed) / "teacher.ckpt");
  const auto scores = head_importance(teacher, head_rows(train_set, config_.compress.head_probe_size));
  structured_prune(init, scores, config_.compress.heads_to_prune);
  return init;
}

std::optional<double> Pipeline::student_sparsity(const std::string& family) const {
  if (family == "magnitude") return config_.compress.sparsity;
  return std::nullopt;
}

void Pipeline::compress() {
  const auto data = load_data();
  for (const auto seed : config_.seeds) {
    const fs::path dir = seed_dir(seed);
    std::vector<TransformerClassifier> snapshots;
    for (const double s : config_.compress.snapshot_sparsities)
      snapshots.push_back(pruned(seed, s, data.train));

    const double alpha = config_.distill.alpha;
    const auto on_train = estimate_difficulty(snapshots, data.train, alpha);
    const auto on_dev = estimate_difficulty(snapshots, data.dev, alpha);
    write_difficulty((dir / "difficulty_train.tsv").string(), on_train.variance, on_train.degree);
    write_difficulty((dir / "difficulty_dev.tsv").string(), on_dev.variance, on_dev.degree);
    const double agreement = difficulty_agreement(
        variance_partition(on_dev.variance, data.dev_partition.easy.size()), data.dev_partition);

    for (const auto& family : config_.compress.families) {
      TransformerClassifier student = family == "magnitude"
                                          ? pruned(seed, config_.compress.sparsity, data.train)
                                          : initial_student(family, seed, data.train);
      if (family != "magnitude") train(student, data.train, config_.train_for(seed), cross_entropy_loss(data.train));
      save_model(dir / "students" / (family + "-vanilla.ckpt"), student, "student");
      note(seed_name(seed) + " " + family + "-vanilla: dev " + num(accuracy(student, data.dev)));
    }

    json m;
    m["schema_version"] = kManifestVersion;
    m["config_hash"] = hash_;
    m["seed"] = seed;
    auto snaps = json::array();
    for (const double s : config_.compress.snapshot_sparsities)
      snaps.push_back({{"sparsity", s}, {"file", "pruned/sparsity-" + sparsity_tag(s) + ".ckpt"}});
    m["snapshots"] = snaps;
    m["difficulty"] = {{"train", "difficulty_train.tsv"}, {"dev", "difficulty_dev.tsv"}};
    m["dev_difficulty_agreement"] = agreement;
    write_text(dir / "compress.json", m.dump(2) + "\n");
    note(seed_name(seed) + " difficulty agreement on dev: " + num(agreement));
  }
}

void Pipeline::mitigate() {
  const auto data = load_data();
  const auto& dc = config_.distill;
  const std::string strategy = strategy_name(dc.strategy);
  const std::size_t k = config_.data.num_classes();
  for (const auto seed : config_.seeds) {
    const fs::path dir = seed_dir(seed);
    DistillInputs base;
    if (dc.strategy == Strategy::distil || dc.strategy == Strategy::smooth || dc.strategy == Strategy::rmc) {
      require_stamp(dir / "teacher.json");
      base.teacher_probs = read_probs((dir / "teacher_probs.tsv").string(), k);
      if (base.teacher_probs.size() != data.train.size() * k)
        throw ContractError("'" + (dir / "teacher_probs.tsv").string() + "' does not cover the training set");
    }
    if (dc.strategy == Strategy::rmc) {
      require_stamp(dir / "compress.json");
      std::vector<double> variance;
      read_difficulty((dir / "difficulty_train.tsv").string(), variance, base.degree);
      if (base.degree.size() != data.train.size())
        throw ContractError("'" + (dir / "difficulty_train.tsv").string() + "' does not cover the training set");
    }
    for (const auto& family : config_.compress.families) {
      DistillInputs inputs = base;
      if (dc.strategy == Strategy::jtt) {
        auto identifier = initial_student(family, seed, data.train);
        auto tc = config_.train_for(seed);
        tc.epochs = dc.jtt_epochs;
        train(identifier, data.train, tc, cross_entropy_loss(data.train));
        inputs.sample_weights = jtt_weights(identifier, data.train, dc.jtt_upweight);
      }
      // A vanilla magnitude student is exactly the pruned fine-tune at that level.
      const bool reuse = family == "magnitude" && dc.strategy == Strategy::vanilla;
      TransformerClassifier student = reuse ? pruned(seed, config_.compress.sparsity, data.train)
                                            : initial_student(family, seed, data.train);
      if (!reuse)
        train_student(student, data.train, config_.train_for(seed), dc, inputs, student_sparsity(family));
      save_model(dir / "students" / (family + "-" + strategy + ".ckpt"), student, "student");
      note(seed_name(seed) + " " + family + "-" + strategy + ": dev " + num(accuracy(student, data.dev)));
    }
  }
}

// ---------------------------------------------------------------- reports

EvalReport Pipeline::eval() {
  const auto data = load_data();
  EvalReport report;
  report.config_hash = hash_;
  for (const auto seed : config_.seeds) {
    const fs::path dir = seed_dir(seed);
    auto add = [&](const std::string& name, const TransformerClassifier& model) {
      report.rows.push_back(evaluate_model(name, seed, model, data.dev, data.dev_partition, data.adversarial));
    };
    add("teacher", load_model(dir / "teacher.ckpt"));
    for (const double s : config_.compress.snapshot_sparsities) {
      const auto path = dir / "pruned" / ("sparsity-" + sparsity_tag(s) + ".ckpt");
      if (fs::exists(path)) add("pruned-" + sparsity_tag(s), load_model(path));
    }
    std::vector<fs::path> students;
    if (fs::is_directory(dir / "students"))
      for (const auto& entry : fs::directory_iterator(dir / "students"))
        if (entry.path().extension() == ".ckpt") students.push_back(entry.path());
    std::sort(students.begin(), students.end());
    for (const auto& path : students) add(path.stem().string(), load_model(path));

    if (fs::exists(dir / "compress.json")) {
      require_stamp(dir / "compress.json");
      std::vector<double> variance, degree;
      read_difficulty((dir / "difficulty_dev.tsv").string(), variance, degree);
      if (variance.size() != data.dev.size())
        throw ContractError("'" + (dir / "difficulty_dev.tsv").string() + "' does not cover the dev split");
      report.agreement.push_back(
          {seed, difficulty_agreement(variance_partition(variance, data.dev_partition.easy.size()),
                                      data.dev_partition)});
    }
  }
  attach_relative_bias(report.rows, "teacher");
  write_text(root() / "reports" / "eval.json", report_json(report));
  write_text(root() / "reports" / "eval.csv", report_csv(report));
  note("eval: " + std::to_string(report.rows.size()) + " rows in " + (root() / "reports").string());
  return report;
}

void Pipeline::sweep() {
  const auto data = load_data();
  const auto& levels = config_.compress.sweep_sparsities;
  struct Acc {
    double sparsity = 0, dev = 0, adv = 0, bias = 0;
    std::size_t bias_runs = 0;
  };
  std::vector<Acc> sum(levels.size());
  for (const auto seed : config_.seeds) {
    const auto teacher = load_model(seed_dir(seed) / "teacher.ckpt");
    const Accuracies t{accuracy(teacher, data.dev), accuracy(teacher, data.adversarial)};
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const auto model = pruned(seed, levels[i], data.train);
      const Accuracies c{accuracy(model, data.dev), accuracy(model, data.adversarial)};
      sum[i].sparsity += sparsity(model);
      sum[i].dev += c.dev;
      sum[i].adv += c.adversarial;
      if (accuracy_gap(t) != 0.0) {
        sum[i].bias += relative_bias(t, c);
        ++sum[i].bias_runs;
      }
    }
  }
  const double n = static_cast<double>(config_.seeds.size());
  std::ostringstream os;
  os << "target_sparsity,runs,sparsity,dev_accuracy,adversarial_accuracy,relative_bias,config_hash\n";
  for (std::size_t i = 0; i < levels.size(); ++i)
    os << num(levels[i]) << ',' << config_.seeds.size() << ',' << num(sum[i].sparsity / n) << ','
       << num(sum[i].dev / n) << ',' << num(sum[i].adv / n) << ','
       << (sum[i].bias_runs ? num(sum[i].bias / static_cast<double>(sum[i].bias_runs)) : "") << ',' << hash_
       << '\n';
  write_text(root() / "reports" / "sweep.csv", os.str());
  note("sweep: " + std::to_string(levels.size()) + " levels in " + (root() / "reports" / "sweep.csv").string());
}

}  // namespace rmc
