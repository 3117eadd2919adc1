// rmc: command-line front end of the pipeline.
//
//   rmc datagen       --config run.ini [--out DIR]
//   rmc train-teacher --config run.ini [--seed N] [--out DIR]
//   rmc compress      --config run.ini [--seed N] [--out DIR]
//   rmc mitigate      --config run.ini [--seed N] [--out DIR] [--strategy NAME]
//   rmc eval          --config run.ini [--seed N] [--out DIR]
//   rmc sweep         --config run.ini [--seed N] [--out DIR]
//
// Failures print one JSON object to stderr and exit nonzero.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "rmc/error.hpp"
#include "rmc/pipeline.hpp"

namespace {

int report_error(std::string_view kind, const std::string& message, std::string_view command) {
  nlohmann::ordered_json j;
  j["error"] = {{"kind", kind}, {"message", message}, {"command", command}};
  std::cerr << j.dump() << std::endl;
  return kind == "usage" ? 64 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compressed-model bias experiments on a synthetic inference task"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string strategy;
  bool quiet = false;

  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "Experiment config (INI)")->required();
    sub->add_option("--out", out, "Output directory, overrides output.dir");
    sub->add_option("--seed", seed, "Run one seed instead of the configured list");
    sub->add_flag("--quiet", quiet, "No progress lines");
    return sub;
  };
  auto* datagen = add("datagen", "Generate train/dev/adversarial splits");
  auto* teacher = add("train-teacher", "Train the teacher of every seed");
  auto* compress = add("compress", "Pruned snapshots, difficulty scores and vanilla students");
  auto* mitigate = add("mitigate", "Train students with a debiasing strategy");
  auto* eval = add("eval", "Evaluate every checkpoint and write reports");
  auto* sweep = add("sweep", "Accuracy and relative bias across pruning levels");
  mitigate->add_option("--strategy", strategy, "vanilla|distil|smooth|focal|jtt|rmc")
      ->check(CLI::IsMember({"vanilla", "distil", "smooth", "focal", "jtt", "rmc"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), "");
  }

  const auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    rmc::Overrides o;
    o.seed = seed;
    o.out = out;
    if (!strategy.empty()) o.strategy = rmc::parse_strategy(strategy);
    rmc::Pipeline p(rmc::apply_overrides(rmc::load_config(config_path), o), quiet ? nullptr : &std::clog);
    if (sub == datagen)
      p.datagen();
    else if (sub == teacher)
      p.train_teacher();
    else if (sub == compress)
      p.compress();
    else if (sub == mitigate)
      p.mitigate();
    else if (sub == eval)
      p.eval();
    else if (sub == sweep)
      p.sweep();
  } catch (const rmc::Error& e) {
    return report_error(e.kind(), e.what(), command);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), command);
  }
  return 0;
}
