#include "rmc/distill.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "rmc/error.hpp"
#include "rmc/ops.hpp"
#include "rmc/pruning.hpp"

namespace rmc {

namespace {

constexpr std::pair<Strategy, const char*> kStrategies[] = {
    {Strategy::vanilla, "vanilla"}, {Strategy::distil, "distil"}, {Strategy::smooth, "smooth"},
    {Strategy::focal, "focal"},     {Strategy::jtt, "jtt"},       {Strategy::rmc, "rmc"},
};

}  // namespace

Strategy parse_strategy(const std::string& name) {
  for (const auto& [s, n] : kStrategies)
    if (name == n) return s;
  throw ConfigError("unknown strategy '" + name +
                    "' (expected vanilla, distil, smooth, focal, jtt or rmc)");
}

std::string strategy_name(Strategy s) {
  for (const auto& [v, n] : kStrategies)
    if (v == s) return n;
  throw ConfigError("unknown strategy value");
}

void DistillConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0,1]");
  if (!(smooth_degree > 0.0 && smooth_degree <= 1.0))
    throw ConfigError("smooth degree must lie in (0,1]");
  if (!(focal_gamma >= 0.0)) throw ConfigError("focal gamma must be nonnegative");
  if (!(jtt_upweight > 0.0)) throw ConfigError("jtt upweight must be positive");
  if (jtt_epochs == 0) throw ConfigError("jtt identification needs at least one epoch");
}

std::vector<double> per_sample_losses(const TransformerClassifier& model, const EncodedSet& data) {
  const std::size_t k = model.config().num_classes;
  for (int y : data.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ContractError("label " + std::to_string(y) + " outside the model's " +
                          std::to_string(k) + " classes");
  const auto z = predict_logits(model, data);
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = z.data() + i * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(row[c] - m);
    out[i] = m + std::log(s) - row[data.labels[i]];
  }
  return out;
}

LossMatrix per_sample_loss_matrix(std::span<const TransformerClassifier> snapshots,
                                  const EncodedSet& data) {
  if (snapshots.empty()) throw ContractError("no snapshots given");
  auto arch = [](ModelConfig c) {
    c.seed = 0;
    return c;
  };
  for (const auto& s : snapshots)
    if (!(arch(s.config()) == arch(snapshots.front().config())))
      throw ContractError("snapshots were built from different model configs");
  LossMatrix m;
  m.rows = data.size();
  m.cols = snapshots.size();
  m.values.resize(m.rows * m.cols);
  for (std::size_t c = 0; c < m.cols; ++c) {
    const auto col = per_sample_losses(snapshots[c], data);
    for (std::size_t r = 0; r < m.rows; ++r) m.values[r * m.cols + c] = col[r];
  }
  return m;
}

std::vector<double> variance_scores(const LossMatrix& losses) {
  if (losses.cols < 2)
    throw ContractError("variance needs at least 2 snapshot columns, got " +
                        std::to_string(losses.cols));
  std::vector<double> v(losses.rows);
  const double n = static_cast<double>(losses.cols);
  for (std::size_t r = 0; r < losses.rows; ++r) {
    // Shifted by the first entry so a constant row is exactly 0.
    const double shift = losses.at(r, 0);
    double mean = 0.0;
    for (std::size_t c = 0; c < losses.cols; ++c) mean += losses.at(r, c) - shift;
    mean /= n;
    double ss = 0.0;
    for (std::size_t c = 0; c < losses.cols; ++c) {
      const double e = losses.at(r, c) - shift - mean;
      ss += e * e;
    }
    v[r] = ss / n;
  }
  return v;
}

std::vector<double> difficulty_degree(std::span<const double> variance, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ConfigError("alpha must lie in (0,1], got " + std::to_string(alpha));
  if (variance.empty()) throw ContractError("difficulty needs at least one sample");
  const auto [lo, hi] = std::minmax_element(variance.begin(), variance.end());
  const double vmin = *lo, vmax = *hi;
  std::vector<double> d(variance.size(), 1.0);
  if (vmax == vmin) return d;
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] = alpha + (1.0 - alpha) * (variance[i] - vmin) / (vmax - vmin);
  return d;
}

std::vector<double> smooth_teacher(std::span<const double> probs, std::size_t num_classes,
                                   std::span<const double> degree) {
  if (num_classes == 0 || probs.size() % num_classes != 0)
    throw DimensionError("probability buffer of " + std::to_string(probs.size()) +
                         " values is not a multiple of " + std::to_string(num_classes));
  const std::size_t n = probs.size() / num_classes;
  if (degree.size() != n)
    throw DimensionError("expected " + std::to_string(n) + " degrees, got " +
                         std::to_string(degree.size()));
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double d = degree[i];
    if (!(d > 0.0 && d <= 1.0))
      throw ConfigError("difficulty degree must lie in (0,1], got " + std::to_string(d));
    const double* p = probs.data() + i * num_classes;
    double total = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (!(p[c] >= 0.0)) throw ContractError("row " + std::to_string(i) + " has a negative probability");
      total += p[c];
    }
    if (std::fabs(total - 1.0) > 1e-9)
      throw ContractError("row " + std::to_string(i) + " sums to " + std::to_string(total));
    double* s = out.data() + i * num_classes;
    if (d == 1.0) {
      std::copy(p, p + num_classes, s);
      continue;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) z += s[c] = p[c] > 0.0 ? std::pow(p[c], d) : 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) s[c] /= z;
  }
  return out;
}

Tensor rmc_loss(const Tensor& logits, std::span<const int> labels, const Tensor& targets,
                double lambda, std::span<const double> weights) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ConfigError("lambda must lie in [0,1], got " + std::to_string(lambda));
  if (lambda == 0.0) return ops::cross_entropy(logits, labels, weights);
  if (lambda == 1.0) return ops::kl_divergence(targets, logits, weights);
  return ops::add(ops::scale(ops::cross_entropy(logits, labels, weights), 1.0 - lambda),
                  ops::scale(ops::kl_divergence(targets, logits, weights), lambda));
}

std::vector<double> focal_weights(std::span<const double> gold_probs, double gamma) {
  if (gold_probs.empty()) throw ContractError("focal weights of an empty batch");
  std::vector<double> w(gold_probs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double p = gold_probs[i];
    if (!(p > 0.0 && p <= 1.0))
      throw ContractError("gold probability " + std::to_string(p) + " outside (0,1]");
    total += w[i] = std::pow(1.0 - p, gamma);
  }
  if (total == 0.0) throw NumericError("every sample has gold probability 1; focal weights are undefined");
  const double mean = total / static_cast<double>(w.size());
  for (auto& x : w) x /= mean;
  return w;
}

std::vector<double> jtt_weights(std::span<const int> predictions, std::span<const int> labels,
                                double upweight) {
  if (labels.empty()) throw ContractError("jtt weights of an empty set");
  if (predictions.size() != labels.size())
    throw DimensionError("got " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  if (!(upweight > 0.0)) throw ConfigError("jtt upweight must be positive");
  std::vector<double> w(labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += w[i] = predictions[i] == labels[i] ? 1.0 : upweight;
  const double scale = static_cast<double>(w.size()) / total;
  for (auto& x : w) x *= scale;
  return w;
}

std::vector<double> jtt_weights(const TransformerClassifier& identifier, const EncodedSet& data,
                                double upweight) {
  if (data.size() == 0) throw ContractError("jtt weights of an empty set");
  const auto pred = argmax_rows(predict_probs(identifier, data), identifier.config().num_classes);
  return jtt_weights(pred, data.labels, upweight);
}

DifficultyEstimate estimate_difficulty(std::span<const TransformerClassifier> snapshots,
                                       const EncodedSet& data, double alpha) {
  DifficultyEstimate e;
  e.losses = per_sample_loss_matrix(snapshots, data);
  e.variance = variance_scores(e.losses);
  e.degree = difficulty_degree(e.variance, alpha);
  return e;
}

BatchLoss strategy_loss(const DistillConfig& config, const EncodedSet& data,
                        const DistillInputs& inputs, std::size_t num_classes) {
  config.validate();
  const std::size_t n = data.size(), k = num_classes;
  auto labels_of = [&data](std::span<const std::size_t> rows) {
    std::vector<int> y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) y[i] = data.labels[rows[i]];
    return y;
  };
  auto need = [&](const std::vector<double>& v, std::size_t size, const char* what) {
    if (v.size() != size)
      throw ContractError(strategy_name(config.strategy) + " needs " + what + " for " +
                          std::to_string(n) + " samples (got " + std::to_string(v.size()) +
                          " values)");
  };

  switch (config.strategy) {
    case Strategy::vanilla:
      return cross_entropy_loss(data);
    case Strategy::focal:
      return [labels_of, gamma = config.focal_gamma, k](const Tensor& logits,
                                                              std::span<const std::size_t> rows) {
        const auto y = labels_of(rows);
        std::vector<double> p(rows.size());
        {
          NoGradGuard guard;
          Tensor probs = ops::softmax_rows(logits.detach());
          for (std::size_t i = 0; i < rows.size(); ++i) p[i] = probs.data()[i * k + y[i]];
        }
        // A batch fitted to probability 1 has zero loss; unit weights keep it finite.
        if (std::all_of(p.begin(), p.end(), [](double x) { return x == 1.0; }))
          return ops::cross_entropy(logits, y);
        return ops::cross_entropy(logits, y, focal_weights(p, gamma));
      };
    case Strategy::jtt: {
      need(inputs.sample_weights, n, "sample weights");
      auto w = std::make_shared<std::vector<double>>(inputs.sample_weights);
      return [labels_of, w](const Tensor& logits, std::span<const std::size_t> rows) {
        const auto y = labels_of(rows);
        std::vector<double> bw(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) bw[i] = (*w)[rows[i]];
        return ops::cross_entropy(logits, y, bw);
      };
    }
    case Strategy::distil:
    case Strategy::smooth:
    case Strategy::rmc: {
      need(inputs.teacher_probs, n * k, "teacher probabilities");
      std::vector<double> degree;
      if (config.strategy == Strategy::distil) degree.assign(n, 1.0);
      if (config.strategy == Strategy::smooth) degree.assign(n, config.smooth_degree);
      if (config.strategy == Strategy::rmc) {
        need(inputs.degree, n, "difficulty degrees");
        degree = inputs.degree;
      }
      auto targets = std::make_shared<std::vector<double>>(smooth_teacher(inputs.teacher_probs, k, degree));
      return [labels_of, targets, k, lambda = config.lambda](const Tensor& logits,
                                                            std::span<const std::size_t> rows) {
        const auto y = labels_of(rows);
        std::vector<double> t(rows.size() * k);
        for (std::size_t i = 0; i < rows.size(); ++i)
          std::copy_n(targets->begin() + static_cast<std::ptrdiff_t>(rows[i] * k), k,
                      t.begin() + static_cast<std::ptrdiff_t>(i * k));
        return rmc_loss(logits, y, Tensor::from_data({rows.size(), k}, std::move(t)), lambda);
      };
    }
  }
  throw ConfigError("unknown strategy value");
}

StudentResult train_student(TransformerClassifier& student, const EncodedSet& data,
                            const TrainConfig& train_config, const DistillConfig& config,
                            const DistillInputs& inputs, std::optional<double> target_sparsity) {
  const auto loss = strategy_loss(config, data, inputs, student.config().num_classes);
  StudentResult r;
  if (target_sparsity) {
    auto p = magnitude_prune_finetune(student, data, train_config, *target_sparsity, loss);
    r.train = std::move(p.train);
    r.epoch_sparsity = std::move(p.epoch_sparsity);
  } else {
    r.train = train(student, data, train_config, loss);
  }
  return r;
}

namespace {

std::string format_double(double x) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

double parse_double(std::string_view s, const std::string& path, std::size_t line) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ParseError(path + ":" + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split_tabs(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = s.find('\t', start);
    out.push_back(s.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) return out;
    start = tab + 1;
  }
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing input file: " + path);
  return in;
}

void close_output(std::ofstream& out, const std::string& path) {
  out.close();
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace

void write_difficulty(const std::string& path, std::span<const double> variance,
                      std::span<const double> degree) {
  if (variance.size() != degree.size()) throw DimensionError("variance and degree lengths differ");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (std::size_t i = 0; i < variance.size(); ++i)
    out << i << '\t' << format_double(variance[i]) << '\t' << format_double(degree[i]) << '\n';
  close_output(out, path);
}

void read_difficulty(const std::string& path, std::vector<double>& variance,
                     std::vector<double>& degree) {
  auto in = open_input(path);
  variance.clear();
  degree.clear();
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto f = split_tabs(line);
    if (f.size() != 3) throw ParseError(path + ":" + std::to_string(n) + ": expected 3 fields");
    if (parse_double(f[0], path, n) != static_cast<double>(n - 1))
      throw ParseError(path + ":" + std::to_string(n) + ": records out of order");
    variance.push_back(parse_double(f[1], path, n));
    degree.push_back(parse_double(f[2], path, n));
  }
}

void write_probs(const std::string& path, std::span<const double> probs, std::size_t num_classes) {
  if (num_classes == 0 || probs.size() % num_classes != 0)
    throw DimensionError("probability buffer is not a multiple of the class count");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (std::size_t i = 0; i < probs.size(); ++i)
    out << format_double(probs[i]) << ((i + 1) % num_classes ? '\t' : '\n');
  close_output(out, path);
}

std::vector<double> read_probs(const std::string& path, std::size_t num_classes) {
  auto in = open_input(path);
  std::vector<double> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto f = split_tabs(line);
    if (f.size() != num_classes)
      throw ParseError(path + ":" + std::to_string(n) + ": expected " + std::to_string(num_classes) +
                       " probabilities");
    for (auto s : f) out.push_back(parse_double(s, path, n));
  }
  return out;
}

}  // namespace rmc
