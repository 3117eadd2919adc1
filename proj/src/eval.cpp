#include "rmc/eval.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "rmc/error.hpp"

namespace rmc {

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (labels.empty()) throw ContractError("accuracy of an empty split");
  if (predictions.size() != labels.size())
    throw DimensionError("got " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  std::size_t right = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) right += predictions[i] == labels[i];
  return static_cast<double>(right) / static_cast<double>(labels.size());
}

double accuracy(const TransformerClassifier& model, const EncodedSet& split) {
  if (split.size() == 0) throw ContractError("accuracy of an empty split");
  return accuracy(argmax_rows(predict_probs(model, split), model.config().num_classes), split.labels);
}

double overall_adversarial(std::span<const AdversarialSet> sets) {
  if (sets.empty()) throw ContractError("no adversarial sets");
  double total = 0.0;
  for (const auto& s : sets) {
    if (s.size == 0) throw ContractError("adversarial set '" + s.name + "' has size 0");
    total += static_cast<double>(s.size);
  }
  // Weights first, so one set returns its accuracy and equal sizes the plain mean.
  double acc = 0.0;
  for (const auto& s : sets) acc += static_cast<double>(s.size) / total * s.accuracy;
  return acc;
}

double accuracy_gap(const Accuracies& a) {
  if (!(a.dev > 0.0)) throw UndefinedMetricError("accuracy gap needs a positive dev accuracy");
  return (a.dev - a.adversarial) / a.dev;
}

double relative_bias(const Accuracies& teacher, const Accuracies& compressed) {
  const double t = accuracy_gap(teacher);
  if (t == 0.0) throw UndefinedMetricError("teacher accuracy gap is 0; relative bias is undefined");
  return accuracy_gap(compressed) / t;
}

namespace {

double subset_accuracy(std::span<const int> predictions, std::span<const int> labels,
                       std::span<const std::size_t> rows, const char* which) {
  if (rows.empty()) throw ContractError(std::string(which) + " subset is empty");
  std::size_t right = 0;
  for (auto r : rows) {
    if (r >= labels.size()) throw ContractError("partition index " + std::to_string(r) + " outside split");
    right += predictions[r] == labels[r];
  }
  return static_cast<double>(right) / static_cast<double>(rows.size());
}

// Side of every sample: 0 easy, 1 hard; throws unless the partition covers 0..n-1 once.
std::vector<int> sides(const Partition& p, std::size_t n, const char* what) {
  std::vector<int> side(n, -1);
  auto mark = [&](std::span<const std::size_t> rows, int v) {
    for (auto r : rows) {
      if (r >= n || side[r] != -1)
        throw ContractError(std::string(what) + " partition does not cover the samples exactly once");
      side[r] = v;
    }
  };
  mark(p.easy, 0);
  mark(p.hard, 1);
  if (std::find(side.begin(), side.end(), -1) != side.end())
    throw ContractError(std::string(what) + " partition misses samples");
  return side;
}

}  // namespace

EasyHard easy_hard_report(std::span<const int> predictions, std::span<const int> labels,
                          const Partition& partition) {
  if (predictions.size() != labels.size())
    throw DimensionError("got " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  sides(partition, labels.size(), "easy/hard");
  EasyHard r;
  r.easy = subset_accuracy(predictions, labels, partition.easy, "easy");
  r.hard = subset_accuracy(predictions, labels, partition.hard, "hard");
  r.gap = r.easy - r.hard;
  return r;
}

Partition variance_partition(std::span<const double> variance, std::size_t easy_count) {
  if (easy_count > variance.size())
    throw ContractError("cannot mark " + std::to_string(easy_count) + " of " +
                        std::to_string(variance.size()) + " samples easy");
  std::vector<std::size_t> order(variance.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return variance[a] < variance[b]; });
  Partition p;
  p.easy.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(easy_count));
  p.hard.assign(order.begin() + static_cast<std::ptrdiff_t>(easy_count), order.end());
  std::sort(p.easy.begin(), p.easy.end());
  std::sort(p.hard.begin(), p.hard.end());
  return p;
}

double difficulty_agreement(const Partition& predicted, const Partition& truth) {
  const std::size_t n = predicted.easy.size() + predicted.hard.size();
  if (n != truth.easy.size() + truth.hard.size())
    throw ContractError("partitions cover " + std::to_string(n) + " and " +
                        std::to_string(truth.easy.size() + truth.hard.size()) + " samples");
  if (n == 0) throw ContractError("partitions are empty");
  const auto a = sides(predicted, n, "predicted");
  const auto b = sides(truth, n, "ground-truth");
  std::size_t same = 0;
  for (std::size_t i = 0; i < n; ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(n);
}

ModelEval evaluate_model(const std::string& name, std::uint64_t seed,
                         const TransformerClassifier& model, const EncodedSet& dev,
                         const Partition& dev_partition, const EncodedSet& adversarial) {
  const std::size_t k = model.config().num_classes;
  const auto dev_pred = argmax_rows(predict_probs(model, dev), k);
  const auto adv_pred = argmax_rows(predict_probs(model, adversarial), k);
  ModelEval e;
  e.model = name;
  e.seed = seed;
  e.sparsity = sparsity(model);
  e.dev_accuracy = accuracy(dev_pred, dev.labels);
  e.adversarial.push_back({"adversarial", accuracy(adv_pred, adversarial.labels), adversarial.size()});
  e.adversarial_accuracy = overall_adversarial(e.adversarial);
  e.gap = accuracy_gap({e.dev_accuracy, e.adversarial_accuracy});
  e.easy_hard = easy_hard_report(dev_pred, dev.labels, dev_partition);
  return e;
}

void attach_relative_bias(std::vector<ModelEval>& rows, const std::string& teacher_name) {
  std::map<std::uint64_t, Accuracies> teacher;
  for (const auto& r : rows)
    if (r.model == teacher_name) teacher[r.seed] = {r.dev_accuracy, r.adversarial_accuracy};
  for (auto& r : rows) {
    const auto it = teacher.find(r.seed);
    if (it == teacher.end())
      throw DependencyError("no '" + teacher_name + "' row for seed " + std::to_string(r.seed));
    // A teacher without a gap leaves the ratio undefined; the report shows null.
    if (accuracy_gap(it->second) == 0.0) continue;
    r.relative_bias = relative_bias(it->second, {r.dev_accuracy, r.adversarial_accuracy});
  }
}

std::vector<ModelEval> mean_over_seeds(std::span<const ModelEval> rows) {
  std::vector<ModelEval> out;
  std::vector<std::size_t> count, bias_count;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const ModelEval& m) { return m.model == r.model; });
    if (it == out.end()) {
      ModelEval m;
      m.model = r.model;
      m.adversarial = r.adversarial;
      for (auto& s : m.adversarial) s.accuracy = 0.0;
      out.push_back(std::move(m));
      count.push_back(0);
      bias_count.push_back(0);
      it = out.end() - 1;
    }
    const auto i = static_cast<std::size_t>(it - out.begin());
    if (it->adversarial.size() != r.adversarial.size())
      throw ContractError("rows of '" + r.model + "' list different adversarial sets");
    ++count[i];
    it->sparsity += r.sparsity;
    it->dev_accuracy += r.dev_accuracy;
    for (std::size_t s = 0; s < r.adversarial.size(); ++s) it->adversarial[s].accuracy += r.adversarial[s].accuracy;
    it->adversarial_accuracy += r.adversarial_accuracy;
    it->gap += r.gap;
    it->easy_hard.easy += r.easy_hard.easy;
    it->easy_hard.hard += r.easy_hard.hard;
    it->easy_hard.gap += r.easy_hard.gap;
    if (r.relative_bias) {
      it->relative_bias = it->relative_bias.value_or(0.0) + *r.relative_bias;
      ++bias_count[i];
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double n = static_cast<double>(count[i]);
    auto& m = out[i];
    m.seed = count[i];
    m.sparsity /= n;
    m.dev_accuracy /= n;
    for (auto& s : m.adversarial) s.accuracy /= n;
    m.adversarial_accuracy /= n;
    m.gap /= n;
    m.easy_hard.easy /= n;
    m.easy_hard.hard /= n;
    m.easy_hard.gap /= n;
    if (m.relative_bias) *m.relative_bias /= static_cast<double>(bias_count[i]);
  }
  return out;
}

namespace {

nlohmann::ordered_json row_json(const ModelEval& m, bool mean) {
  nlohmann::ordered_json j;
  j["model"] = m.model;
  if (mean)
    j["runs"] = m.seed;
  else
    j["seed"] = m.seed;
  j["sparsity"] = m.sparsity;
  j["dev_accuracy"] = m.dev_accuracy;
  auto adv = nlohmann::ordered_json::array();
  for (const auto& s : m.adversarial)
    adv.push_back({{"name", s.name}, {"accuracy", s.accuracy}, {"size", s.size}});
  j["adversarial"] = adv;
  j["adversarial_accuracy"] = m.adversarial_accuracy;
  j["accuracy_gap"] = m.gap;
  j["relative_bias"] = m.relative_bias ? nlohmann::ordered_json(*m.relative_bias) : nullptr;
  j["easy_accuracy"] = m.easy_hard.easy;
  j["hard_accuracy"] = m.easy_hard.hard;
  j["easy_hard_gap"] = m.easy_hard.gap;
  return j;
}

std::string num(double x) {
  if (x == 0.0) x = 0.0;  // no "-0"
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

void csv_row(std::ostringstream& os, const ModelEval& m, const std::string& seed,
             const std::string& hash) {
  os << m.model << ',' << seed << ',' << num(m.sparsity) << ',' << num(m.dev_accuracy) << ','
     << num(m.adversarial_accuracy) << ',' << num(m.gap) << ','
     << (m.relative_bias ? num(*m.relative_bias) : "") << ',' << num(m.easy_hard.easy) << ','
     << num(m.easy_hard.hard) << ',' << num(m.easy_hard.gap) << ',' << hash << '\n';
}

}  // namespace

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["config_hash"] = report.config_hash;
  std::vector<std::uint64_t> seeds;
  for (const auto& r : report.rows)
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  j["seeds"] = seeds;
  auto runs = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) runs.push_back(row_json(r, false));
  j["runs"] = runs;
  auto summary = nlohmann::ordered_json::array();
  for (const auto& m : mean_over_seeds(report.rows)) summary.push_back(row_json(m, true));
  j["summary"] = summary;
  if (report.agreement.empty()) {
    j["difficulty_agreement"] = nullptr;
  } else {
    auto per_seed = nlohmann::ordered_json::array();
    double mean = 0.0;
    for (const auto& a : report.agreement) {
      per_seed.push_back({{"seed", a.seed}, {"agreement", a.agreement}});
      mean += a.agreement;
    }
    j["difficulty_agreement"] = {{"runs", per_seed},
                                 {"mean", mean / static_cast<double>(report.agreement.size())}};
  }
  return j.dump(2) + "\n";
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "model,seed,sparsity,dev_accuracy,adversarial_accuracy,accuracy_gap,relative_bias,"
        "easy_accuracy,hard_accuracy,easy_hard_gap,config_hash\n";
  for (const auto& r : report.rows) csv_row(os, r, std::to_string(r.seed), report.config_hash);
  for (const auto& m : mean_over_seeds(report.rows)) csv_row(os, m, "mean", report.config_hash);
  return os.str();
}

}  // namespace rmc
