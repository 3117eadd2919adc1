#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "rmc/error.hpp"
#include "rmc/model.hpp"
#include "rmc/ops.hpp"

using namespace rmc;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.vocab_size = 20;
  c.max_seq_len = 12;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.seed = seed;
  return c;
}

std::vector<std::vector<int>> random_sequences(std::mt19937_64& rng, std::size_t n, std::size_t vocab,
                                               std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
  std::vector<std::vector<int>> out(n);
  for (auto& s : out) {
    s.resize(len(rng));
    for (auto& t : s) t = tok(rng);
  }
  return out;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> logits_of(const TransformerClassifier& m, const std::vector<std::vector<int>>& seqs) {
  NoGradGuard g;
  return values(m.forward(TokenBatch::from_sequences(seqs)));
}

// Parameters of every layer, counted independently of the model code.
std::size_t analytic_count(const ModelConfig& c) {
  const std::size_t d = c.embed_dim, f = c.ffn_dim;
  const std::size_t layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
  return c.vocab_size * d + c.max_seq_len * d + c.num_layers * layer + 2 * d + d * c.num_classes +
         c.num_classes;
}

}  // namespace

TEST_CASE("same seed gives bit-identical parameters") {
  auto a = init_model(small_config(11));
  auto b = init_model(small_config(11));
  auto c = init_model(small_config(12));
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(values(a.parameters()[i].value) == values(b.parameters()[i].value));
    differs |= values(a.parameters()[i].value) != values(c.parameters()[i].value);
  }
  CHECK(differs);
}

TEST_CASE("parameter counts match the closed form") {
  ModelConfig def;
  CHECK(def.parameter_count() == 140290);
  CHECK(def.parameter_count() == analytic_count(def));
  CHECK(def.maskable_count() == 4 * (4 * 64 * 64 + 2 * 64 * 128));

  auto m = init_model(def);
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += p.value.numel();
  CHECK(n == def.parameter_count());
  CHECK(n < 1000000);
}

TEST_CASE("invalid configs are rejected") {
  ModelConfig c;
  c.num_heads = 0;
  CHECK_THROWS_AS(init_model(c), ConfigError);
  c.num_heads = 3;
  CHECK_THROWS_AS(init_model(c), ConfigError);
}

TEST_CASE("initialization contract") {
  auto m = init_model(small_config());
  for (const auto& p : m.parameters()) {
    const bool bias = p.name.find(".b") != std::string::npos && p.value.rank() == 1;
    if (p.name.find("gain") != std::string::npos)
      for (double v : p.value.data()) CHECK(v == 1.0);
    else if (bias)
      for (double v : p.value.data()) CHECK(v == 0.0);
    if (p.prunable())
      for (double v : p.mask.data()) CHECK(v == 1.0);
    if (p.name.rfind("embed.", 0) == 0) CHECK_FALSE(p.prunable());
  }
  for (double x : m.head_mask()) CHECK(x == 1.0);
  CHECK(sparsity(m) == 0.0);
}

TEST_CASE("forward validates its input") {
  auto m = init_model(small_config());
  std::vector<std::vector<int>> too_long{std::vector<int>(13, 1)};
  CHECK_THROWS_AS(m.forward(TokenBatch::from_sequences(too_long)), InputError);
  std::vector<std::vector<int>> bad_id{{1, 25}};
  CHECK_THROWS_AS(m.forward(TokenBatch::from_sequences(bad_id)), InputError);
}

TEST_CASE("duplicate rows and permutations") {
  std::mt19937_64 rng(4);
  auto m = init_model(small_config());
  auto seqs = random_sequences(rng, 6, 20, 12);
  seqs.push_back(seqs[2]);
  const auto z = logits_of(m, seqs);
  CHECK(z[2 * 2] == z[6 * 2]);
  CHECK(z[2 * 2 + 1] == z[6 * 2 + 1]);

  std::vector<std::vector<int>> rev(seqs.rbegin(), seqs.rend());
  const auto zr = logits_of(m, rev);
  for (std::size_t i = 0; i < seqs.size(); ++i)
    for (std::size_t c = 0; c < 2; ++c) CHECK(zr[(seqs.size() - 1 - i) * 2 + c] == z[i * 2 + c]);

  // A row alone sees the same logits as inside the batch.
  const auto solo = logits_of(m, {seqs[3]});
  CHECK(solo[0] == z[6]);
  CHECK(solo[1] == z[7]);
}

TEST_CASE("xi = 0 everywhere cuts every attention head out") {
  std::mt19937_64 rng(8);
  auto m = init_model(small_config());
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) m.set_xi(l, h, 0.0);
  const auto seqs = random_sequences(rng, 5, 20, 12);
  const auto before = logits_of(m, seqs);
  for (const char* name : {"layer0.attn.wq", "layer0.attn.wk", "layer1.attn.wv", "layer1.attn.bv"}) {
    auto& p = m.parameter(name);
    for (auto& v : p.value.data()) v += 0.5;
  }
  CHECK(logits_of(m, seqs) == before);
}

TEST_CASE("zeroing one xi equals zeroing that head's output-projection rows") {
  std::mt19937_64 rng(9);
  auto a = init_model(small_config());
  auto b = a.clone();
  a.set_xi(1, 0, 0.0);
  const std::size_t dh = 4;
  auto wo = b.parameter("layer1.attn.wo").value.data();
  for (std::size_t r = 0; r < dh; ++r)
    for (std::size_t c = 0; c < 8; ++c) wo[r * 8 + c] = 0.0;
  const auto seqs = random_sequences(rng, 5, 20, 12);
  const auto za = logits_of(a, seqs), zb = logits_of(b, seqs);
  for (std::size_t i = 0; i < za.size(); ++i) CHECK(za[i] == doctest::Approx(zb[i]).epsilon(1e-12));
}

TEST_CASE("derivative of the loss wrt one xi matches a finite difference") {
  std::mt19937_64 rng(10);
  auto m = init_model(small_config());
  const auto seqs = random_sequences(rng, 4, 20, 12);
  const std::vector<int> y{0, 1, 1, 0};
  const auto batch = TokenBatch::from_sequences(seqs);

  ForwardOptions opts;
  for (std::size_t l = 0; l < 2; ++l) opts.head_masks.push_back(Tensor::full({2}, 1.0, true));
  backward(ops::cross_entropy(m.forward(batch, opts), y));
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      const double eps = 1e-5;
      auto loss_at = [&](double x) {
        NoGradGuard g;
        m.set_xi(l, h, x);
        const double v = ops::cross_entropy(m.forward(batch), y).item();
        m.set_xi(l, h, 1.0);
        return v;
      };
      const double fd = (loss_at(1.0 + eps) - loss_at(1.0 - eps)) / (2 * eps);
      const double an = opts.head_masks[l].grad()[h];
      CHECK(std::fabs(fd - an) <= 1e-6 * std::max(1.0, std::fabs(an)));
    }
}

TEST_CASE("truncate_student") {
  std::mt19937_64 rng(12);
  ModelConfig c;
  c.seed = 5;
  auto m = init_model(c);
  m.set_xi(0, 1, 0.0);
  const auto seqs = random_sequences(rng, 4, 64, 20);

  SUBCASE("keeping every layer is the identity") {
    auto t = truncate_student(m, 4);
    CHECK(logits_of(t, seqs) == logits_of(m, seqs));
  }
  SUBCASE("half depth matches the shallower closed form") {
    auto t = truncate_student(m, 2);
    ModelConfig half = c;
    half.num_layers = 2;
    std::size_t n = 0;
    for (const auto& p : t.parameters()) n += p.value.numel();
    CHECK(n == analytic_count(half));
    CHECK(t.config().num_layers == 2);
    CHECK(t.xi(0, 1) == 0.0);
    CHECK(values(t.parameter("embed.token").value) == values(m.parameter("embed.token").value));
    CHECK(values(t.parameter("classifier.weight").value) ==
          values(m.parameter("classifier.weight").value));
    CHECK(values(t.parameter("layer1.ffn.w1").value) == values(m.parameter("layer1.ffn.w1").value));
  }
  SUBCASE("one layer still runs") {
    auto t = truncate_student(m, 1);
    const auto z = logits_of(t, seqs);
    CHECK(z.size() == 8);
    for (double v : z) CHECK(std::isfinite(v));
  }
  SUBCASE("invalid depths") {
    CHECK_THROWS_AS(truncate_student(m, 0), ConfigError);
    CHECK_THROWS_AS(truncate_student(m, 5), ConfigError);
  }
}

TEST_CASE("sparsity counts only encoder masks") {
  auto m = init_model(small_config());
  CHECK(sparsity(m) == 0.0);
  for (auto& p : m.parameters())
    if (p.prunable())
      for (auto& v : p.mask.data()) v = 0.0;
  CHECK(sparsity(m) == 1.0);

  auto n = init_model(small_config());
  auto& w = n.parameter("layer0.attn.wq");
  w.mask.data()[0] = 0.0;
  CHECK(sparsity(n) == doctest::Approx(1.0 / static_cast<double>(n.config().maskable_count())));
}

TEST_CASE("checkpoint round trip is bit-exact") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "rmc_test_model";
  fs::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();

  std::mt19937_64 rng(13);
  auto m = init_model(small_config());
  m.set_xi(1, 1, 0.0);
  auto& w = m.parameter("layer1.ffn.w2");
  w.mask.data()[3] = 0.0;
  w.value.data()[3] = 0.0;
  save_checkpoint(path, m, {{"config_hash", "abc123"}, {"role", "teacher"}});

  std::map<std::string, std::string> meta;
  auto r = load_checkpoint(path, &meta);
  CHECK(r.config() == m.config());
  CHECK(meta.at("config_hash") == "abc123");
  CHECK(meta.at("role") == "teacher");
  CHECK(r.head_mask() == m.head_mask());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& a = m.parameters()[i];
    const auto& b = r.parameters()[i];
    CHECK(a.name == b.name);
    CHECK(values(a.value) == values(b.value));
    if (a.prunable()) CHECK(values(a.mask) == values(b.mask));
  }
  const auto seqs = random_sequences(rng, 5, 20, 12);
  CHECK(logits_of(r, seqs) == logits_of(m, seqs));

  CHECK_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string()), DependencyError);
  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "NOPE0000";
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "bad.ckpt").string()), ParseError);

  // Cut the file short.
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 5);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  fs::remove_all(dir);
}
