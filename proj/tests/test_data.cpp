#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rmc/data.hpp"
#include "rmc/error.hpp"

using namespace rmc;

namespace {

DatasetSpec small_spec(double rho) {
  DatasetSpec s;
  s.train_size = 2000;
  s.dev_size = 500;
  s.adversarial_size = 500;
  s.rho = rho;
  return s;
}

bool all_tokens_present(const LabeledPairExample& ex) {
  return std::all_of(ex.hypothesis.begin(), ex.hypothesis.end(), [&](int t) {
    return std::find(ex.premise.begin(), ex.premise.end(), t) != ex.premise.end();
  });
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  auto a = generate(small_spec(0.9));
  auto b = generate(small_spec(0.9));
  CHECK(a.train == b.train);
  CHECK(a.dev == b.dev);
  CHECK(a.adversarial == b.adversarial);
  auto spec = small_spec(0.9);
  spec.seed = 8;
  CHECK_FALSE(generate(spec).train == a.train);
}

TEST_CASE("examples obey the rule and the token layout") {
  for (const char* rule : {"subsequence", "overlap3"}) {
    auto spec = small_spec(0.9);
    spec.rule = rule;
    const auto d = generate(spec);
    const std::size_t k = spec.num_classes();
    for (const auto* split : {&d.train, &d.dev, &d.adversarial}) {
      std::vector<std::size_t> per_class(k, 0);
      for (const auto& ex : *split) {
        CHECK(semantic_label(rule, ex.premise, ex.hypothesis) == ex.label);
        CHECK(ex.marker.has_value());
        CHECK(ex.hard == (*ex.marker != ex.label));
        ++per_class[static_cast<std::size_t>(ex.label)];
        for (const auto* seq : {&ex.premise, &ex.hypothesis})
          for (int t : *seq) {
            CHECK(t >= kFirstContentToken);
            CHECK(static_cast<std::size_t>(t) < spec.vocab_size);
          }
        auto sorted = ex.premise;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
        const auto ids = encode(ex);
        CHECK(ids.size() <= spec.max_sequence_length());
        CHECK(ids.front() == kClsToken);
        CHECK(ids.back() == kFirstMarkerToken + *ex.marker);
      }
      // Labels cycle through the classes, so counts differ by at most one.
      const auto [lo, hi] = std::minmax_element(per_class.begin(), per_class.end());
      CHECK(*hi - *lo <= 1);
    }
  }
}

TEST_CASE("the marker never decides the gold label") {
  const auto d = generate(small_spec(0.9));
  for (auto ex : d.dev) {
    const int y = ex.label;
    ex.marker.reset();
    CHECK(semantic_label("subsequence", ex.premise, ex.hypothesis) == y);
  }
}

TEST_CASE("rho = 1 makes every example easy and the marker a perfect dev classifier") {
  const auto d = generate(small_spec(1.0));
  for (const auto& ex : d.train) CHECK_FALSE(ex.hard);
  std::size_t dev_right = 0, adv_right = 0;
  for (const auto& ex : d.dev) dev_right += *ex.marker == ex.label;
  for (const auto& ex : d.adversarial) adv_right += *ex.marker == ex.label;
  CHECK(dev_right == d.dev.size());
  CHECK(adv_right == 0);
}

TEST_CASE("rho = 0.5 leaves the marker uninformative") {
  DatasetSpec spec;
  spec.rho = 0.5;
  const auto d = generate(spec);
  REQUIRE(d.train.size() == 20000);
  std::size_t agree = 0;
  for (const auto& ex : d.train) agree += *ex.marker == ex.label;
  const double f = static_cast<double>(agree) / 20000.0;
  CHECK(f >= 0.48);
  CHECK(f <= 0.52);
}

TEST_CASE("default correlation gives 90% easy examples") {
  const auto d = generate(DatasetSpec{});
  const auto p = partition_by_flag(d.train);
  CHECK(p.easy.size() + p.hard.size() == d.train.size());
  const double easy = static_cast<double>(p.easy.size()) / static_cast<double>(d.train.size());
  CHECK(std::fabs(easy - 0.9) < 0.01);
  for (const auto& ex : d.adversarial) CHECK(ex.hard);
}

TEST_CASE("negative mix follows order_negative_fraction") {
  auto spec = small_spec(0.9);
  spec.order_negative_fraction = 0.0;
  for (const auto& ex : generate(spec).train)
    if (ex.label == 0) CHECK_FALSE(all_tokens_present(ex));
  spec.order_negative_fraction = 1.0;
  for (const auto& ex : generate(spec).train)
    if (ex.label == 0) CHECK(all_tokens_present(ex));
  spec.order_negative_fraction = 1.5;
  CHECK_THROWS_AS(generate(spec), ConfigError);
}

TEST_CASE("infeasible specs are generation errors") {
  DatasetSpec s;
  s.vocab_size = 10;  // 4 content tokens for premises of length 5
  CHECK_THROWS_AS(generate(s), GenerationError);
  s = DatasetSpec{};
  s.hypothesis_max = 6;
  CHECK_THROWS_AS(generate(s), GenerationError);
  s = DatasetSpec{};
  s.premise_min = 7;
  s.premise_max = 6;
  CHECK_THROWS_AS(generate(s), GenerationError);
  s = DatasetSpec{};
  s.rule = "parity";
  CHECK_THROWS_AS(generate(s), ConfigError);
}

TEST_CASE("split files round trip and reject malformed lines") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "rmc_test_data";
  fs::create_directories(dir);
  const auto path = (dir / "train.tsv").string();

  auto spec = small_spec(0.9);
  auto d = generate(spec);
  d.train[4].marker.reset();
  d.train[4].hard = true;
  write_split(path, d.train);
  CHECK(read_split(path, 2, spec.vocab_size) == d.train);

  auto write_lines = [&](const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    os << text;
  };
  auto message_of = [&](std::size_t k) {
    try {
      read_split(path, k, spec.vocab_size);
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  write_lines("6,7,8,9,10\t7,8\t1\t1\t0\n6,7,8,9,10\t7,8\t1\t1\n");
  CHECK(message_of(2).find("line 2") != std::string::npos);
  write_lines("6,7,8,9,10\t7,x\t1\t1\t0\n");
  CHECK(message_of(2).find("line 1") != std::string::npos);
  write_lines("6,7,8,9,10\t7,8\t1\t0\t0\n");
  CHECK(message_of(2).find("hard flag") != std::string::npos);
  write_lines("6,7,8,9,10\t2,8\t1\t1\t0\n");
  CHECK(message_of(2).find("content token") != std::string::npos);
  write_lines("6,7,8,9,10\t7,8\t2\t2\t0\n");
  CHECK(message_of(2).find("label 2") != std::string::npos);
  CHECK(message_of(3) == "no error");

  CHECK_THROWS_AS(read_split((dir / "missing.tsv").string(), 2, 16), DependencyError);
  fs::remove_all(dir);
}

TEST_CASE("format_example layout") {
  LabeledPairExample ex{{6, 7, 8}, {7, 8}, 1, 0, true};
  CHECK(format_example(ex) == "6,7,8\t7,8\t1\t0\t1");
  ex.marker.reset();
  CHECK(format_example(ex) == "6,7,8\t7,8\t1\t-\t1");
  CHECK(encode(ex) == std::vector<int>{kClsToken, 6, 7, 8, kSepToken, 7, 8});
}

TEST_CASE("partition_by_flag") {
  std::vector<LabeledPairExample> xs(5);
  xs[1].hard = true;
  xs[4].hard = true;
  const auto p = partition_by_flag(xs);
  CHECK(p.easy == std::vector<std::size_t>{0, 2, 3});
  CHECK(p.hard == std::vector<std::size_t>{1, 4});
}
