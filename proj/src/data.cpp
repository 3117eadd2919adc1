#include "rmc/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "rmc/error.hpp"

namespace rmc {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t DatasetSpec::num_classes() const { return rule == "overlap3" ? 3 : 2; }

std::size_t DatasetSpec::max_sequence_length() const { return premise_max + hypothesis_max + 3; }

void DatasetSpec::validate() const {
  if (rule != "subsequence" && rule != "overlap3")
    throw ConfigError("unknown task rule '" + rule + "' (expected subsequence or overlap3)");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0,1]");
  if (!(rho_adversarial >= 0.0 && rho_adversarial <= 1.0))
    throw ConfigError("rho_adversarial must lie in [0,1]");
  if (!(order_negative_fraction >= 0.0 && order_negative_fraction <= 1.0))
    throw ConfigError("order_negative_fraction must lie in [0,1]");
  if (premise_min == 0 || premise_min > premise_max)
    throw GenerationError("premise length range [" + std::to_string(premise_min) + "," +
                          std::to_string(premise_max) + "] is empty");
  if (hypothesis_min < 2 || hypothesis_min > hypothesis_max)
    throw GenerationError("hypothesis length range must satisfy 2 <= min <= max");
  if (hypothesis_max > premise_min)
    throw GenerationError("hypothesis_max " + std::to_string(hypothesis_max) +
                          " exceeds premise_min " + std::to_string(premise_min) +
                          "; positives need the hypothesis to fit inside the premise");
  if (vocab_size <= static_cast<std::size_t>(kFirstContentToken))
    throw GenerationError("vocab_size leaves no content tokens");
  const std::size_t content = vocab_size - kFirstContentToken;
  // Distinct premise tokens plus at least one unseen token for substitution.
  if (content < premise_max + 1)
    throw GenerationError("vocab_size " + std::to_string(vocab_size) + " has " +
                          std::to_string(content) + " content tokens, need " +
                          std::to_string(premise_max + 1));
}

namespace {

bool is_contiguous_run(std::span<const int> premise, std::span<const int> hyp) {
  if (hyp.size() > premise.size()) return false;
  return std::search(premise.begin(), premise.end(), hyp.begin(), hyp.end()) != premise.end();
}

enum class Negative { substitute, swap, skip };

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

LabeledPairExample make_example(const DatasetSpec& spec, std::mt19937_64& rng, int label) {
  const std::size_t content = spec.vocab_size - kFirstContentToken;
  std::vector<int> pool(content);
  std::iota(pool.begin(), pool.end(), kFirstContentToken);
  const std::size_t plen = pick(rng, spec.premise_min, spec.premise_max);
  // Partial Fisher-Yates: the first plen entries become the premise.
  for (std::size_t i = 0; i < plen; ++i) std::swap(pool[i], pool[pick(rng, i, content - 1)]);
  LabeledPairExample ex;
  ex.premise.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(plen));
  ex.label = label;

  const std::size_t hlen = pick(rng, spec.hypothesis_min, spec.hypothesis_max);
  const bool three = spec.rule == "overlap3";
  const bool positive = label == 1;
  if (positive) {
    const std::size_t start = pick(rng, 0, plen - hlen);
    ex.hypothesis.assign(ex.premise.begin() + static_cast<std::ptrdiff_t>(start),
                         ex.premise.begin() + static_cast<std::ptrdiff_t>(start + hlen));
    return ex;
  }

  Negative kind;
  if (three) {
    kind = label == 0 ? Negative::substitute : (pick(rng, 0, 1) ? Negative::swap : Negative::skip);
  } else {
    if (std::bernoulli_distribution(spec.order_negative_fraction)(rng))
      kind = pick(rng, 0, 1) ? Negative::swap : Negative::skip;
    else
      kind = Negative::substitute;
  }
  // Skipping one position needs a run of hlen + 1 premise tokens.
  if (kind == Negative::skip && hlen + 1 > plen) kind = Negative::swap;

  switch (kind) {
    case Negative::substitute: {
      const std::size_t start = pick(rng, 0, plen - hlen);
      ex.hypothesis.assign(ex.premise.begin() + static_cast<std::ptrdiff_t>(start),
                           ex.premise.begin() + static_cast<std::ptrdiff_t>(start + hlen));
      // pool[plen..] holds the tokens absent from the premise.
      ex.hypothesis[pick(rng, 0, hlen - 1)] = pool[pick(rng, plen, content - 1)];
      break;
    }
    case Negative::swap: {
      const std::size_t start = pick(rng, 0, plen - hlen);
      ex.hypothesis.assign(ex.premise.begin() + static_cast<std::ptrdiff_t>(start),
                           ex.premise.begin() + static_cast<std::ptrdiff_t>(start + hlen));
      const std::size_t at = pick(rng, 0, hlen - 2);
      std::swap(ex.hypothesis[at], ex.hypothesis[at + 1]);
      break;
    }
    case Negative::skip: {
      const std::size_t start = pick(rng, 0, plen - hlen - 1);
      const std::size_t gap = pick(rng, 1, hlen - 1);
      for (std::size_t i = 0; i <= hlen; ++i)
        if (i != gap) ex.hypothesis.push_back(ex.premise[start + i]);
      break;
    }
  }
  return ex;
}

}  // namespace

int semantic_label(const std::string& rule, std::span<const int> premise,
                   std::span<const int> hypothesis) {
  if (is_contiguous_run(premise, hypothesis)) return 1;
  if (rule != "overlap3") return 0;
  for (int t : hypothesis)
    if (std::find(premise.begin(), premise.end(), t) == premise.end()) return 0;
  return 2;
}

std::vector<LabeledPairExample> generate_split(const DatasetSpec& spec, std::size_t count, double rho,
                                               std::uint64_t seed) {
  spec.validate();
  const std::size_t k = spec.num_classes();
  std::mt19937_64 rng(seed);
  // Exact balance: labels cycle through the classes, then the order is shuffled.
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % k);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::bernoulli_distribution agree(rho);
  std::vector<LabeledPairExample> out;
  out.reserve(count);
  for (int y : labels) {
    auto ex = make_example(spec, rng, y);
    int m = y;
    if (!agree(rng)) {
      // A different class, uniformly.
      m = static_cast<int>(pick(rng, 0, k - 2));
      if (m >= y) ++m;
    }
    ex.marker = m;
    ex.hard = m != y;
    out.push_back(std::move(ex));
  }
  return out;
}

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.train = generate_split(spec, spec.train_size, spec.rho, splitmix64(spec.seed ^ 0x1));
  d.dev = generate_split(spec, spec.dev_size, spec.rho, splitmix64(spec.seed ^ 0x2));
  d.adversarial =
      generate_split(spec, spec.adversarial_size, spec.rho_adversarial, splitmix64(spec.seed ^ 0x3));
  return d;
}

std::vector<int> encode(const LabeledPairExample& example) {
  std::vector<int> ids;
  ids.reserve(example.premise.size() + example.hypothesis.size() + 3);
  ids.push_back(kClsToken);
  ids.insert(ids.end(), example.premise.begin(), example.premise.end());
  ids.push_back(kSepToken);
  ids.insert(ids.end(), example.hypothesis.begin(), example.hypothesis.end());
  if (example.marker) ids.push_back(kFirstMarkerToken + *example.marker);
  return ids;
}

namespace {

void join_ids(std::ostream& os, const std::vector<int>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? "," : "") << ids[i];
}

int parse_int(std::string_view s, std::size_t line, const char* field) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ParseError("line " + std::to_string(line) + ": bad " + field + " '" + std::string(s) + "'");
  return v;
}

std::vector<int> parse_ids(std::string_view s, std::size_t line, const char* field,
                           std::size_t vocab) {
  std::vector<int> ids;
  if (s.empty()) throw ParseError("line " + std::to_string(line) + ": empty " + field);
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    const auto tok = s.substr(start, comma == std::string_view::npos ? s.size() - start : comma - start);
    const int id = parse_int(tok, line, field);
    if (id < kFirstContentToken || static_cast<std::size_t>(id) >= vocab)
      throw ParseError("line " + std::to_string(line) + ": " + field + " id " + std::to_string(id) +
                       " is not a content token");
    ids.push_back(id);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return ids;
}

}  // namespace

std::string format_example(const LabeledPairExample& ex) {
  std::ostringstream os;
  join_ids(os, ex.premise);
  os << '\t';
  join_ids(os, ex.hypothesis);
  os << '\t' << ex.label << '\t';
  if (ex.marker)
    os << *ex.marker;
  else
    os << '-';
  os << '\t' << (ex.hard ? 1 : 0);
  return os.str();
}

void write_split(const std::string& path, std::span<const LabeledPairExample> examples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& ex : examples) os << format_example(ex) << '\n';
  if (!os) throw IoError("write to '" + path + "' failed");
}

std::vector<LabeledPairExample> read_split(const std::string& path, std::size_t num_classes,
                                           std::size_t vocab_size) {
  std::ifstream is(path);
  if (!is) throw DependencyError("dataset file not found: '" + path + "'");
  std::vector<LabeledPairExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::vector<std::string_view> f;
    std::string_view sv(line);
    std::size_t start = 0;
    while (true) {
      const auto tab = sv.find('\t', start);
      f.push_back(sv.substr(start, tab == std::string_view::npos ? sv.size() - start : tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (f.size() != 5)
      throw ParseError("line " + std::to_string(lineno) + ": expected 5 tab-separated fields, got " +
                       std::to_string(f.size()));
    LabeledPairExample ex;
    ex.premise = parse_ids(f[0], lineno, "premise", vocab_size);
    ex.hypothesis = parse_ids(f[1], lineno, "hypothesis", vocab_size);
    ex.label = parse_int(f[2], lineno, "label");
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes)
      throw ParseError("line " + std::to_string(lineno) + ": label " + std::to_string(ex.label) +
                       " outside [0," + std::to_string(num_classes) + ")");
    if (f[3] != "-") {
      const int m = parse_int(f[3], lineno, "marker");
      if (m < 0 || static_cast<std::size_t>(m) >= num_classes)
        throw ParseError("line " + std::to_string(lineno) + ": marker " + std::to_string(m) +
                         " outside [0," + std::to_string(num_classes) + ")");
      ex.marker = m;
    }
    if (f[4] != "0" && f[4] != "1")
      throw ParseError("line " + std::to_string(lineno) + ": hard flag must be 0 or 1");
    ex.hard = f[4] == "1";
    if (ex.hard != (!ex.marker || *ex.marker != ex.label))
      throw ParseError("line " + std::to_string(lineno) + ": hard flag disagrees with marker/label");
    out.push_back(std::move(ex));
  }
  return out;
}

Partition partition_by_flag(std::span<const LabeledPairExample> examples) {
  Partition p;
  for (std::size_t i = 0; i < examples.size(); ++i) (examples[i].hard ? p.hard : p.easy).push_back(i);
  return p;
}

}  // namespace rmc
