#include "rmc/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "rmc/error.hpp"
#include "rmc/ops.hpp"

namespace rmc {

namespace {

std::string layer_name(std::size_t l, const char* suffix) {
  return "layer" + std::to_string(l) + "." + suffix;
}

std::size_t parse_size(const std::map<std::string, std::string>& f, const std::string& key,
                       std::size_t fallback) {
  auto it = f.find(key);
  if (it == f.end()) return fallback;
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(key);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("model field '" + key + "' is not a nonnegative integer: '" + it->second +
                      "'");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (num_layers == 0) throw ConfigError("num_layers must be positive");
  if (num_heads == 0) throw ConfigError("num_heads must be positive");
  if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (embed_dim % num_heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = embed_dim, f = ffn_dim;
  const std::size_t per_layer = 4 * d * d + 4 * d   // q, k, v, o
                                + 2 * d             // ln1
                                + d * f + f + f * d + d  // ffn
                                + 2 * d;            // ln2
  return vocab_size * d + max_seq_len * d + num_layers * per_layer + 2 * d + d * num_classes +
         num_classes;
}

std::size_t ModelConfig::maskable_count() const {
  return num_layers * (4 * embed_dim * embed_dim + 2 * embed_dim * ffn_dim);
}

std::map<std::string, std::string> ModelConfig::to_fields() const {
  return {{"vocab_size", std::to_string(vocab_size)},   {"max_seq_len", std::to_string(max_seq_len)},
          {"embed_dim", std::to_string(embed_dim)},     {"num_layers", std::to_string(num_layers)},
          {"num_heads", std::to_string(num_heads)},     {"ffn_dim", std::to_string(ffn_dim)},
          {"num_classes", std::to_string(num_classes)}, {"seed", std::to_string(seed)}};
}

ModelConfig ModelConfig::from_fields(const std::map<std::string, std::string>& f) {
  ModelConfig c;
  c.vocab_size = parse_size(f, "vocab_size", c.vocab_size);
  c.max_seq_len = parse_size(f, "max_seq_len", c.max_seq_len);
  c.embed_dim = parse_size(f, "embed_dim", c.embed_dim);
  c.num_layers = parse_size(f, "num_layers", c.num_layers);
  c.num_heads = parse_size(f, "num_heads", c.num_heads);
  c.ffn_dim = parse_size(f, "ffn_dim", c.ffn_dim);
  c.num_classes = parse_size(f, "num_classes", c.num_classes);
  c.seed = parse_size(f, "seed", c.seed);
  return c;
}

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<int>> sequences) {
  TokenBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) b.width = std::max(b.width, s.size());
  b.ids.assign(b.batch * b.width, 0);
  b.mask.assign(b.batch * b.width, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sequences[i].begin(), sequences[i].end(), b.ids.begin() + i * b.width);
    std::fill_n(b.mask.begin() + i * b.width, sequences[i].size(), 1);
  }
  return b;
}

TransformerClassifier::TransformerClassifier(const ModelConfig& config) : config_(config) {
  config_.validate();
  build_registry();
  head_mask_.assign(config_.num_layers * config_.num_heads, 1.0);
}

void TransformerClassifier::build_registry() {
  const std::size_t d = config_.embed_dim, f = config_.ffn_dim;
  params_.clear();
  index_.clear();
  auto add = [&](std::string name, Shape shape, bool prunable, bool decay) {
    Parameter p;
    p.name = std::move(name);
    p.value = Tensor::zeros(shape, true);
    if (prunable) p.mask = Tensor::full(shape, 1.0);
    p.decay = decay;
    index_[p.name] = params_.size();
    params_.push_back(std::move(p));
  };
  add("embed.token", {config_.vocab_size, d}, false, true);
  add("embed.position", {config_.max_seq_len, d}, false, true);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    add(layer_name(l, "ln1.gain"), {d}, false, false);
    add(layer_name(l, "ln1.bias"), {d}, false, false);
    for (const char* w : {"q", "k", "v", "o"}) {
      add(layer_name(l, (std::string("attn.w") + w).c_str()), {d, d}, true, true);
      add(layer_name(l, (std::string("attn.b") + w).c_str()), {d}, false, false);
    }
    add(layer_name(l, "ln2.gain"), {d}, false, false);
    add(layer_name(l, "ln2.bias"), {d}, false, false);
    add(layer_name(l, "ffn.w1"), {d, f}, true, true);
    add(layer_name(l, "ffn.b1"), {f}, false, false);
    add(layer_name(l, "ffn.w2"), {f, d}, true, true);
    add(layer_name(l, "ffn.b2"), {d}, false, false);
  }
  add("final_ln.gain", {d}, false, false);
  add("final_ln.bias", {d}, false, false);
  add("classifier.weight", {d, config_.num_classes}, false, true);
  add("classifier.bias", {config_.num_classes}, false, false);
}

Parameter& TransformerClassifier::parameter(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
  return params_[it->second];
}

const Parameter& TransformerClassifier::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
  return params_[it->second];
}

double TransformerClassifier::xi(std::size_t layer, std::size_t head) const {
  if (layer >= config_.num_layers || head >= config_.num_heads)
    throw IndexError("head (" + std::to_string(layer) + "," + std::to_string(head) +
                     ") out of range");
  return head_mask_[layer * config_.num_heads + head];
}

void TransformerClassifier::set_xi(std::size_t layer, std::size_t head, double value) {
  if (layer >= config_.num_layers || head >= config_.num_heads)
    throw IndexError("head (" + std::to_string(layer) + "," + std::to_string(head) +
                     ") out of range");
  head_mask_[layer * config_.num_heads + head] = value;
}

TransformerClassifier TransformerClassifier::clone() const {
  TransformerClassifier c(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto src = params_[i].value.data();
    std::copy(src.begin(), src.end(), c.params_[i].value.data().begin());
    c.params_[i].value.set_requires_grad(params_[i].value.requires_grad());
    if (params_[i].prunable()) {
      const auto m = params_[i].mask.data();
      std::copy(m.begin(), m.end(), c.params_[i].mask.data().begin());
    }
  }
  c.head_mask_ = head_mask_;
  return c;
}

void TransformerClassifier::set_embeddings_trainable(bool on) {
  parameter("embed.token").value.set_requires_grad(on);
  parameter("embed.position").value.set_requires_grad(on);
}

Tensor TransformerClassifier::forward(const TokenBatch& batch, const ForwardOptions& options) const {
  if (batch.batch == 0) throw InputError("empty batch");
  if (batch.ids.size() != batch.batch * batch.width || batch.mask.size() != batch.ids.size())
    throw InputError("token batch buffers do not match " + std::to_string(batch.batch) + "x" +
                     std::to_string(batch.width));
  const std::size_t L = config_.num_layers, H = config_.num_heads, d = config_.embed_dim;
  if (!options.head_masks.empty() && options.head_masks.size() != L)
    throw DimensionError("expected " + std::to_string(L) + " head-mask tensors, got " +
                         std::to_string(options.head_masks.size()));

  // Pack the real tokens of every row back to back.
  std::vector<int> ids, positions;
  std::vector<kernels::Segment> segments;
  std::vector<std::size_t> cls_rows;
  ids.reserve(batch.ids.size());
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::size_t len = 0;
    while (len < batch.width && batch.mask[b * batch.width + len]) ++len;
    for (std::size_t t = len; t < batch.width; ++t)
      if (batch.mask[b * batch.width + t])
        throw InputError("attention mask of row " + std::to_string(b) + " is not a prefix");
    if (len == 0) throw InputError("row " + std::to_string(b) + " has no tokens");
    if (len > config_.max_seq_len)
      throw InputError("row " + std::to_string(b) + " has " + std::to_string(len) +
                       " tokens, max_seq_len is " + std::to_string(config_.max_seq_len));
    segments.push_back({ids.size(), len});
    cls_rows.push_back(ids.size());
    for (std::size_t t = 0; t < len; ++t) {
      const int id = batch.ids[b * batch.width + t];
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(config_.vocab_size));
      ids.push_back(id);
      positions.push_back(static_cast<int>(t));
    }
  }

  auto weight = [&](const std::string& name) -> Tensor {
    const auto& p = parameter(name);
    return p.prunable() ? ops::mul(p.value, p.mask) : p.value;
  };
  auto value = [&](const std::string& name) -> const Tensor& { return parameter(name).value; };

  Tensor h = ops::add(ops::embedding(value("embed.token"), ids),
                      ops::embedding(value("embed.position"), positions));

  for (std::size_t l = 0; l < L; ++l) {
    const bool last = l + 1 == L;
    kernels::AttentionLayout layout{segments, H, d, last};
    Tensor xi = options.head_masks.empty()
                    ? Tensor::from_data({H}, std::vector<double>(head_mask_.begin() + l * H,
                                                                 head_mask_.begin() + (l + 1) * H))
                    : options.head_masks[l];
    Tensor a = ops::layer_norm(h, value(layer_name(l, "ln1.gain")), value(layer_name(l, "ln1.bias")));
    Tensor qsrc = last ? ops::gather_rows(a, cls_rows) : a;
    Tensor q = ops::linear(qsrc, weight(layer_name(l, "attn.wq")), value(layer_name(l, "attn.bq")));
    Tensor k = ops::linear(a, weight(layer_name(l, "attn.wk")), value(layer_name(l, "attn.bk")));
    Tensor v = ops::linear(a, weight(layer_name(l, "attn.wv")), value(layer_name(l, "attn.bv")));
    Tensor ctx = ops::attention(q, k, v, xi, layout);
    Tensor o = ops::linear(ctx, weight(layer_name(l, "attn.wo")), value(layer_name(l, "attn.bo")));
    h = ops::add(last ? ops::gather_rows(h, cls_rows) : h, o);
    Tensor f = ops::layer_norm(h, value(layer_name(l, "ln2.gain")), value(layer_name(l, "ln2.bias")));
    Tensor u = ops::gelu(ops::linear(f, weight(layer_name(l, "ffn.w1")), value(layer_name(l, "ffn.b1"))));
    h = ops::add(h, ops::linear(u, weight(layer_name(l, "ffn.w2")), value(layer_name(l, "ffn.b2"))));
  }
  h = ops::layer_norm(h, value("final_ln.gain"), value("final_ln.bias"));
  return ops::linear(h, value("classifier.weight"), value("classifier.bias"));
}

TransformerClassifier init_model(const ModelConfig& config) {
  TransformerClassifier m(config);
  std::mt19937_64 rng(config.seed);
  const double emb = std::sqrt(3.0 / static_cast<double>(config.embed_dim));
  for (auto& p : m.parameters()) {
    auto w = p.value.data();
    const auto& name = p.name;
    auto ends_with = [&](const char* s) {
      const std::string suf(s);
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (name.rfind("embed.", 0) == 0) {
      std::uniform_real_distribution<double> u(-emb, emb);
      for (auto& x : w) x = u(rng);
    } else if (ends_with(".gain")) {
      std::fill(w.begin(), w.end(), 1.0);
    } else if (p.value.rank() == 2) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.value.shape()[0]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& x : w) x = u(rng);
    } else {
      std::fill(w.begin(), w.end(), 0.0);
    }
  }
  return m;
}

TransformerClassifier truncate_student(const TransformerClassifier& model, std::size_t keep_layers) {
  if (keep_layers == 0) throw ConfigError("keep_layers must be positive");
  if (keep_layers > model.config().num_layers)
    throw ConfigError("keep_layers " + std::to_string(keep_layers) + " exceeds " +
                      std::to_string(model.config().num_layers) + " layers");
  ModelConfig c = model.config();
  c.num_layers = keep_layers;
  TransformerClassifier s(c);
  for (auto& p : s.parameters()) {
    const auto& src = model.parameter(p.name);
    std::copy(src.value.data().begin(), src.value.data().end(), p.value.data().begin());
    if (p.prunable())
      std::copy(src.mask.data().begin(), src.mask.data().end(), p.mask.data().begin());
  }
  const std::size_t H = c.num_heads;
  std::copy_n(model.head_mask().begin(), keep_layers * H, s.head_mask().begin());
  return s;
}

double sparsity(const TransformerClassifier& model) {
  std::size_t zeros = 0, total = 0;
  for (const auto& p : model.parameters()) {
    if (!p.prunable()) continue;
    for (double m : p.mask.data()) zeros += m == 0.0;
    total += p.mask.numel();
  }
  return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'R', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw IoError("truncated checkpoint '" + path + "'");
  return v;
}

void put_entry(std::ostream& os, const std::string& name, const Shape& shape,
               std::span<const double> data) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) put<std::uint64_t>(os, e);
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerClassifier& model,
                     const std::map<std::string, std::string>& metadata) {
  std::ostringstream header;
  for (const auto& [k, v] : model.config().to_fields()) header << "model." << k << '=' << v << '\n';
  for (const auto& [k, v] : metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ContractError("checkpoint metadata key/value contains a separator: '" + k + "'");
    header << k << '=' << v << '\n';
  }
  const std::string text = header.str();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));

  std::uint64_t count = 1;
  for (const auto& p : model.parameters()) count += p.prunable() ? 2 : 1;
  put<std::uint64_t>(os, count);
  for (const auto& p : model.parameters()) {
    put_entry(os, p.name, p.value.shape(), p.value.data());
    if (p.prunable()) put_entry(os, p.name + ".mask", p.mask.shape(), p.mask.data());
  }
  const auto& c = model.config();
  put_entry(os, "head_mask", {c.num_layers, c.num_heads}, model.head_mask());
  if (!os) throw IoError("write to '" + path + "' failed");
}

TransformerClassifier load_checkpoint(const std::string& path,
                                      std::map<std::string, std::string>* metadata) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DependencyError("checkpoint not found: '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const auto text_len = get<std::uint64_t>(is, path);
  std::string text(text_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text_len)))
    throw IoError("truncated checkpoint '" + path + "'");

  std::map<std::string, std::string> model_fields, meta;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("bad header line in '" + path + "': " + line);
    const auto key = line.substr(0, eq);
    if (key.rfind("model.", 0) == 0)
      model_fields[key.substr(6)] = line.substr(eq + 1);
    else
      meta[key] = line.substr(eq + 1);
  }
  TransformerClassifier model(ModelConfig::from_fields(model_fields));

  const auto count = get<std::uint64_t>(is, path);
  std::size_t seen = 0;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto name_len = get<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw IoError("truncated checkpoint '" + path + "'");
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& x : shape) x = static_cast<std::size_t>(get<std::uint64_t>(is, path));

    std::span<double> dst;
    Shape expect;
    if (name == "head_mask") {
      dst = model.head_mask();
      expect = {model.config().num_layers, model.config().num_heads};
    } else if (name.size() > 5 && name.compare(name.size() - 5, 5, ".mask") == 0) {
      auto& p = model.parameter(name.substr(0, name.size() - 5));
      if (!p.prunable()) throw ParseError("mask entry for unprunable parameter '" + name + "'");
      dst = p.mask.data();
      expect = p.mask.shape();
    } else {
      auto& p = model.parameter(name);
      dst = p.value.data();
      expect = p.value.shape();
    }
    if (shape != expect)
      throw ParseError("entry '" + name + "' has shape " + shape_string(shape) + ", expected " +
                       shape_string(expect));
    if (!is.read(reinterpret_cast<char*>(dst.data()),
                 static_cast<std::streamsize>(dst.size() * sizeof(double))))
      throw IoError("truncated checkpoint '" + path + "'");
    ++seen;
  }
  std::size_t expected = 1;
  for (const auto& p : model.parameters()) expected += p.prunable() ? 2 : 1;
  if (seen != expected)
    throw ParseError("checkpoint '" + path + "' has " + std::to_string(seen) + " entries, expected " +
                     std::to_string(expected));
  if (metadata) *metadata = std::move(meta);
  return model;
}

}  // namespace rmc
