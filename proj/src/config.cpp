#include "rmc/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "rmc/error.hpp"

namespace rmc {

namespace pt = boost::property_tree;

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("'" + key + "': cannot parse '" + raw + "' as a number");
  return v;
}

std::string num(double x) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_same_v<T, std::string>)
      s += xs[i];
    else if constexpr (std::is_floating_point_v<T>)
      s += num(xs[i]);
    else
      s += std::to_string(xs[i]);
  }
  return s;
}

// Binds every recognised key to a field, so parsing and printing share one table.
struct Binding {
  std::string key;  // section.name
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
  bool hashed = true;
};

template <class T>
Binding bind_key(std::string key, T& field, bool hashed = true) {
  Binding b;
  b.key = key;
  b.hashed = hashed;
  if constexpr (std::is_same_v<T, std::string>) {
    b.set = [&field](const std::string& v) { field = trim(v); };
    b.get = [&field] { return field; };
  } else if constexpr (std::is_floating_point_v<T>) {
    b.set = [&field, key](const std::string& v) { field = parse_number<T>(key, v); };
    b.get = [&field] { return num(field); };
  } else {
    b.set = [&field, key](const std::string& v) { field = parse_number<T>(key, v); };
    b.get = [&field] { return std::to_string(field); };
  }
  return b;
}

template <class T>
Binding bind_keys(std::string key, std::vector<T>& field, bool hashed = true) {
  Binding b;
  b.key = key;
  b.hashed = hashed;
  b.set = [&field, key](const std::string& v) {
    field.clear();
    for (const auto& item : split_list(v)) {
      if constexpr (std::is_same_v<T, std::string>)
        field.push_back(item);
      else
        field.push_back(parse_number<T>(key, item));
    }
  };
  b.get = [&field] { return join(field); };
  return b;
}

std::vector<Binding> bindings(ExperimentConfig& c, std::string& strategy) {
  auto& d = c.data;
  auto& m = c.model;
  auto& t = c.train;
  auto& k = c.compress;
  auto& s = c.distill;
  return {
      bind_key("data.seed", d.seed),
      bind_key("data.train_size", d.train_size),
      bind_key("data.dev_size", d.dev_size),
      bind_key("data.adversarial_size", d.adversarial_size),
      bind_key("data.rho", d.rho),
      bind_key("data.rho_adversarial", d.rho_adversarial),
      bind_key("data.premise_min", d.premise_min),
      bind_key("data.premise_max", d.premise_max),
      bind_key("data.hypothesis_min", d.hypothesis_min),
      bind_key("data.hypothesis_max", d.hypothesis_max),
      bind_key("data.vocab_size", d.vocab_size),
      bind_key("data.rule", d.rule),
      bind_key("data.order_negative_fraction", d.order_negative_fraction),
      bind_key("model.vocab_size", m.vocab_size),
      bind_key("model.max_seq_len", m.max_seq_len),
      bind_key("model.embed_dim", m.embed_dim),
      bind_key("model.num_layers", m.num_layers),
      bind_key("model.num_heads", m.num_heads),
      bind_key("model.ffn_dim", m.ffn_dim),
      bind_key("train.learning_rate", t.learning_rate),
      bind_key("train.weight_decay", t.weight_decay),
      bind_key("train.epochs", t.epochs),
      bind_key("train.batch_size", t.batch_size),
      bind_key("train.warmup_fraction", t.warmup_fraction),
      bind_keys("train.seeds", c.seeds, false),
      bind_keys("compress.families", k.families),
      bind_key("compress.sparsity", k.sparsity),
      bind_key("compress.student_layers", k.student_layers),
      bind_key("compress.heads_to_prune", k.heads_to_prune),
      bind_key("compress.head_probe_size", k.head_probe_size),
      bind_keys("compress.snapshot_sparsities", k.snapshot_sparsities),
      bind_keys("compress.sweep_sparsities", k.sweep_sparsities),
      bind_key("distill.strategy", strategy, false),
      bind_key("distill.lambda", s.lambda),
      bind_key("distill.alpha", s.alpha),
      bind_key("distill.smooth_degree", s.smooth_degree),
      bind_key("distill.focal_gamma", s.focal_gamma),
      bind_key("distill.jtt_upweight", s.jtt_upweight),
      bind_key("distill.jtt_epochs", s.jtt_epochs),
      bind_key("output.dir", c.output_dir, false),
  };
}

std::string render(const ExperimentConfig& config, bool hashed_only) {
  ExperimentConfig c = config;
  std::string strategy = strategy_name(c.distill.strategy);
  std::string out;
  for (const auto& b : bindings(c, strategy))
    if (!hashed_only || b.hashed) out += b.key + " = " + b.get() + "\n";
  return out;
}

const std::set<std::string> kFamilies{"magnitude", "truncate", "heads"};

}  // namespace

void CompressConfig::validate(const ModelConfig& model) const {
  if (families.empty()) throw ConfigError("compress.families is empty");
  std::set<std::string> seen;
  for (const auto& f : families) {
    if (!kFamilies.count(f))
      throw ConfigError("unknown compression family '" + f + "' (magnitude, truncate, heads)");
    if (!seen.insert(f).second) throw ConfigError("compression family '" + f + "' listed twice");
  }
  auto check_sparsity = [](double s, const char* what) {
    if (!(s >= 0.0 && s < 1.0)) throw ConfigError(std::string(what) + " must be in [0, 1), got " + num(s));
  };
  check_sparsity(sparsity, "compress.sparsity");
  if (snapshot_sparsities.size() < 2)
    throw ConfigError("compress.snapshot_sparsities needs at least two levels for a variance");
  for (double s : snapshot_sparsities) check_sparsity(s, "snapshot sparsity");
  for (double s : sweep_sparsities) check_sparsity(s, "sweep sparsity");
  if (student_layers == 0 || student_layers > model.num_layers)
    throw ConfigError("compress.student_layers must be in [1, " + std::to_string(model.num_layers) + "]");
  if (heads_to_prune >= model.num_layers * model.num_heads)
    throw ConfigError("compress.heads_to_prune must leave at least one head");
  if (head_probe_size == 0) throw ConfigError("compress.head_probe_size must be positive");
}

void ExperimentConfig::validate() const {
  data.validate();
  if (seeds.empty()) throw ConfigError("train.seeds is empty");
  const auto m = model_for(seeds.front());
  m.validate();
  if (m.vocab_size < data.vocab_size)
    throw ConfigError("model.vocab_size " + std::to_string(m.vocab_size) + " is below data.vocab_size " +
                      std::to_string(data.vocab_size));
  if (m.max_seq_len < data.max_sequence_length())
    throw ConfigError("model.max_seq_len " + std::to_string(m.max_seq_len) + " is below the longest sequence " +
                      std::to_string(data.max_sequence_length()));
  train_for(seeds.front()).validate();
  compress.validate(m);
  distill.validate();
  if (output_dir.empty()) throw ConfigError("output.dir is empty");
}

ModelConfig ExperimentConfig::model_for(std::uint64_t seed) const {
  ModelConfig m = model;
  m.num_classes = data.num_classes();
  m.seed = seed;
  return m;
}

TrainConfig ExperimentConfig::train_for(std::uint64_t seed) const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig c;
  std::string strategy = strategy_name(c.distill.strategy);
  auto table = bindings(c, strategy);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("key '" + section + "' outside of a section");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      auto it = std::find_if(table.begin(), table.end(), [&](const Binding& b) { return b.key == key; });
      if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
      it->set(value.data());
    }
  }
  c.distill.strategy = parse_strategy(strategy);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("config file not found: '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_text(const ExperimentConfig& config) { return render(config, false); }

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(render(config, true))));
  return buf;
}

}  // namespace rmc
