#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "rmc/error.hpp"
#include "rmc/ops.hpp"
#include "rmc/pruning.hpp"

using namespace rmc;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.max_seq_len = 12;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.seed = 21;
  return c;
}

EncodedSet tiny_data(std::size_t n, std::uint64_t seed = 7) {
  DatasetSpec s;
  s.seed = seed;
  s.train_size = n;
  s.dev_size = 1;
  s.adversarial_size = 1;
  return encode_all(generate(s).train);
}

Parameter prunable(std::string name, std::vector<double> v) {
  Parameter p;
  p.name = std::move(name);
  const std::size_t n = v.size();
  p.value = Tensor::from_data({n}, std::move(v), true);
  p.mask = Tensor::full({n}, 1.0);
  return p;
}

std::vector<double> bytes_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("cubic schedule") {
  auto s = PruneSchedule::middle_third(0.6, 300);
  CHECK(s.warmup_steps == 100);
  CHECK(s.pruning_steps == 100);
  CHECK(s.sparsity_at(0) == 0.0);
  CHECK(s.sparsity_at(99) == 0.0);
  CHECK(s.event_step(1) == 110);
  CHECK(s.event_step(10) == 200);
  CHECK(s.sparsity_at(110) == doctest::Approx(0.6 * (1 - 0.9 * 0.9 * 0.9)));
  CHECK(s.sparsity_at(200) == 0.6);
  CHECK(s.sparsity_at(299) == 0.6);
  double prev = 0.0;
  for (std::size_t t = 0; t < 300; ++t) {
    CHECK(s.sparsity_at(t) >= prev);
    prev = s.sparsity_at(t);
  }
  // Very short runs still reach the target.
  auto tiny = PruneSchedule::middle_third(0.5, 2);
  CHECK(tiny.sparsity_at(0) == 0.5);

  CHECK_THROWS_AS(PruneSchedule::middle_third(1.0, 300), ConfigError);
  CHECK_THROWS_AS(PruneSchedule::middle_third(-0.1, 300), ConfigError);
  CHECK_THROWS_AS(PruneSchedule::middle_third(0.5, 0), ConfigError);
}

TEST_CASE("toy 2x2 weight pruned to one half") {
  std::vector<Parameter> ps;
  Parameter w;
  w.name = "w";
  w.value = Tensor::from_data({2, 2}, {0.1, -5, 3, 0.2}, true);
  w.mask = Tensor::full({2, 2}, 1.0);
  ps.push_back(w);
  CHECK(apply_magnitude_mask(ps, 0.5) == 2);
  CHECK(bytes_of(ps[0].mask) == std::vector<double>{0, 1, 1, 0});
  CHECK(bytes_of(ps[0].value) == std::vector<double>{0, -5, 3, 0});
  // Never unmasks, and a lower target is a no-op.
  CHECK(apply_magnitude_mask(ps, 0.25) == 0);
  CHECK(apply_magnitude_mask(ps, 0.75) == 1);
  CHECK(bytes_of(ps[0].mask) == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("global threshold spans every prunable tensor and skips the rest") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Parameter> ps;
  for (int t = 0; t < 3; ++t) {
    std::vector<double> v(50);
    for (auto& x : v) x = u(rng);
    ps.push_back(prunable("p" + std::to_string(t), v));
  }
  Parameter bias;
  bias.name = "bias";
  bias.value = Tensor::from_data({3}, {0.0, 0.0, 0.0}, true);
  ps.push_back(bias);

  std::vector<std::vector<double>> before;
  for (const auto& p : ps) before.push_back(bytes_of(p.value));
  apply_magnitude_mask(ps, 0.4);
  double max_masked = 0.0, min_kept = 1e9;
  std::size_t masked = 0;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 50; ++j) {
      if (ps[t].mask.data()[j] == 0.0) {
        ++masked;
        max_masked = std::max(max_masked, std::fabs(before[t][j]));
        CHECK(ps[t].value.data()[j] == 0.0);
      } else {
        min_kept = std::min(min_kept, std::fabs(ps[t].value.data()[j]));
      }
    }
  CHECK(masked == 60);
  CHECK(max_masked <= min_kept);
  CHECK(bytes_of(ps[3].value) == before[3]);
}

TEST_CASE("equal magnitudes are masked in registry order") {
  std::vector<Parameter> ps{prunable("a", {1, 1}), prunable("b", {1, 1})};
  apply_magnitude_mask(ps, 0.75);
  CHECK(bytes_of(ps[0].mask) == std::vector<double>{0, 0});
  CHECK(bytes_of(ps[1].mask) == std::vector<double>{0, 1});
}

TEST_CASE("magnitude_prune_finetune reaches each target and keeps embeddings") {
  const auto data = tiny_data(96);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.learning_rate = 1e-2;
  const auto base = init_model(tiny_config());
  const double maskable = static_cast<double>(base.config().maskable_count());

  for (double target : {0.0, 0.2, 0.4, 0.6, 0.7, 0.85}) {
    auto m = base.clone();
    const auto tok = bytes_of(m.parameter("embed.token").value);
    const auto pos = bytes_of(m.parameter("embed.position").value);
    bool leaked = false;
    TrainHooks hooks;
    hooks.after_step = [&](const TransformerClassifier& mm, std::size_t) {
      for (const auto& p : mm.parameters())
        if (p.prunable())
          for (std::size_t j = 0; j < p.mask.numel(); ++j)
            leaked |= p.mask.data()[j] == 0.0 && p.value.data()[j] != 0.0;
    };
    auto r = magnitude_prune_finetune(m, data, tc, target, cross_entropy_loss(data), hooks);
    CHECK_FALSE(leaked);
    CHECK(std::fabs(sparsity(m) - target) <= 1.0 / maskable);
    CHECK(r.epoch_sparsity.size() == 2);
    CHECK(r.epoch_sparsity.back() == sparsity(m));
    const auto tok_after = bytes_of(m.parameter("embed.token").value);
    const auto pos_after = bytes_of(m.parameter("embed.position").value);
    CHECK(std::memcmp(tok.data(), tok_after.data(), tok.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(pos.data(), pos_after.data(), pos.size() * sizeof(double)) == 0);
    CHECK(m.parameter("embed.token").value.requires_grad());
  }
}

TEST_CASE("head_importance") {
  const auto data = tiny_data(12);
  auto m = init_model(tiny_config());

  SUBCASE("single sample equals |dL/dxi| by finite differences") {
    EncodedSet one;
    one.sequences = {data.sequences[0]};
    one.labels = {data.labels[0]};
    const auto s = head_importance(m, one);
    CHECK(s.samples == 1);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 2; ++h) {
        const double eps = 1e-5;
        auto loss_at = [&](double x) {
          NoGradGuard g;
          m.set_xi(l, h, x);
          const double v = ops::cross_entropy(m.forward(one.batch(std::vector<std::size_t>{0})),
                                              one.labels)
                               .item();
          m.set_xi(l, h, 1.0);
          return v;
        };
        const double fd = std::fabs((loss_at(1 + eps) - loss_at(1 - eps)) / (2 * eps));
        CHECK(std::fabs(s.score(l, h) - fd) <= 1e-4 * std::max(fd, 1e-8));
      }
  }
  SUBCASE("duplicating the probe set leaves scores unchanged") {
    EncodedSet twice = data;
    twice.sequences.insert(twice.sequences.end(), data.sequences.begin(), data.sequences.end());
    twice.labels.insert(twice.labels.end(), data.labels.begin(), data.labels.end());
    const auto a = head_importance(m, data, 5);
    const auto b = head_importance(m, twice, 7);
    for (std::size_t i = 0; i < 4; ++i) CHECK(b.scores[i] == doctest::Approx(a.scores[i]).epsilon(1e-12));
  }
  SUBCASE("scores are nonnegative and the model is untouched") {
    std::vector<std::vector<double>> before;
    for (const auto& p : m.parameters()) before.push_back(bytes_of(p.value));
    m.set_xi(0, 1, 0.0);
    const auto s = head_importance(m, data);
    for (double x : s.scores) CHECK(x >= 0.0);
    for (std::size_t i = 0; i < before.size(); ++i) {
      CHECK(bytes_of(m.parameters()[i].value) == before[i]);
      CHECK_FALSE(m.parameters()[i].value.has_grad());
    }
    CHECK(m.xi(0, 1) == 0.0);
  }
  SUBCASE("empty probe set") {
    CHECK_THROWS_AS(head_importance(m, EncodedSet{}), ContractError);
  }
}

TEST_CASE("structured_prune") {
  ModelConfig c;  // 4 layers x 4 heads
  c.seed = 2;
  auto m = init_model(c);
  HeadImportance s;
  s.layers = 4;
  s.heads = 4;
  s.scores.resize(16);
  for (std::size_t i = 0; i < 16; ++i) s.scores[i] = static_cast<double>((i * 7) % 16);

  std::vector<std::vector<double>> before;
  for (const auto& p : m.parameters()) before.push_back(bytes_of(p.value));

  SUBCASE("nothing to prune") {
    CHECK(structured_prune(m, s, 0).empty());
    for (double x : m.head_mask()) CHECK(x == 1.0);
  }
  SUBCASE("three lowest scores") {
    const auto pruned = structured_prune(m, s, 3);
    // scores 0, 1, 2 sit at flat indices 0, 7, 14.
    CHECK(pruned == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 3}, {3, 2}});
    std::size_t zeros = 0;
    for (double x : m.head_mask()) zeros += x == 0.0;
    CHECK(zeros == 3);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bytes_of(m.parameters()[i].value) == before[i]);
  }
  SUBCASE("ties go to the lower layer then head") {
    std::fill(s.scores.begin(), s.scores.end(), 0.5);
    const auto pruned = structured_prune(m, s, 3);
    CHECK(pruned == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {0, 1}, {0, 2}});
  }
  SUBCASE("cannot prune every head") {
    CHECK_THROWS_AS(structured_prune(m, s, 16), ConfigError);
  }
}
