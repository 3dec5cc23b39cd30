// Command-line front end. Exit codes: 0 ok, 1 validation error, 2 runtime failure.
#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>

#include "dtr/chat.hpp"
#include "dtr/pipeline.hpp"

namespace {

using dtr::corpus::Style;
namespace pl = dtr::pipeline;

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Options {
  std::string config;
  std::vector<std::string> stages;
  std::vector<std::string> styles;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<double> rates = {10, 25, 40, 60, 80};
  std::string split = "test";
  std::size_t top = 20;
  std::string log_level = "info";
};

std::vector<Style> parse_styles(const std::vector<std::string>& labels) {
  std::vector<Style> out;
  for (const auto& label : labels) {
    const auto s = dtr::corpus::parse_style(label);
    if (!s) throw pl::ValidationError("--style: unknown style '" + label + "' (positive, negative or polite)");
    out.push_back(*s);
  }
  return out;
}

pl::PipelineConfig load(const Options& opt) {
  auto config = pl::load_config(opt.config);
  if (opt.seed) config.seed = *opt.seed;
  config.validate();
  return config;
}

Style single_style(const Options& opt, const pl::PipelineConfig& config) {
  const auto styles = parse_styles(opt.styles);
  if (styles.size() > 1) throw pl::ValidationError("--style: give exactly one style for this command");
  return styles.empty() ? config.styles.front() : styles.front();
}

int run(const std::string& command, const Options& opt) {
  const auto config = load(opt);
  if (command == "prepare") {
    pl::cmd_prepare(config, opt.force);
  } else if (command == "pipeline") {
    pl::cmd_pipeline(config, {opt.stages, parse_styles(opt.styles), opt.force});
  } else if (command == "generate") {
    const auto styles = opt.styles.empty() ? config.styles : parse_styles(opt.styles);
    for (Style s : styles) std::cout << pl::cmd_generate(config, s, opt.split, opt.force).string() << "\n";
  } else if (command == "evaluate") {
    const auto reports = pl::cmd_evaluate(config, opt.split);
    std::cout << dtr::metrics::format_table(reports);
  } else if (command == "sweep-pr") {
    std::cout << pl::format_sweep(pl::cmd_sweep_pr(config, opt.rates, opt.split));
  } else if (command == "style-tokens") {
    for (const auto& t : pl::cmd_style_tokens(config, single_style(opt, config), opt.top)) {
      std::printf("%-16s %.4f %zu\n", t.token.c_str(), t.mean_score, t.count);
    }
  } else if (command == "chat") {
    dtr::chat::ChatSession session(config, single_style(opt, config));
    dtr::chat::run_chat(session, std::cin, std::cout);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"disentangled template rewriting for stylized dialogue"};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--log-level", opt.log_level, "trace, debug, info, warn or error");

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "override the global seed");
    sub->add_flag("--force", opt.force, "ignore unmet prerequisites and config changes");
  };
  auto add_split = [&](CLI::App* sub) {
    sub->add_option("--split", opt.split, "dialogue split")->check(CLI::IsMember({"train", "valid", "test"}));
  };

  auto* prepare = app.add_subcommand("prepare", "load, select knowledge, build vocabulary and splits");
  add_common(prepare);
  auto* pipeline = app.add_subcommand("pipeline", "train all or selected stages");
  add_common(pipeline);
  std::vector<std::string> stage_names(pl::kStages.begin(), pl::kStages.end());
  pipeline->add_option("--stage", opt.stages, "stage to (re)run; repeatable")->check(CLI::IsMember(stage_names));
  pipeline->add_option("--style", opt.styles, "restrict per-style stages; repeatable");
  auto* generate = app.add_subcommand("generate", "write styled predictions");
  add_common(generate);
  add_split(generate);
  generate->add_option("--style", opt.styles, "style(s) to generate; default all");
  auto* evaluate = app.add_subcommand("evaluate", "score predictions");
  add_common(evaluate);
  add_split(evaluate);
  auto* sweep = app.add_subcommand("sweep-pr", "F1 and inner-Distinct across replace rates");
  add_common(sweep);
  add_split(sweep);
  sweep->add_option("--pr", opt.rates, "replace rates in percent")->delimiter(',');
  auto* tokens = app.add_subcommand("style-tokens", "tokens with the highest style scores");
  add_common(tokens);
  tokens->add_option("--style", opt.styles, "style");
  tokens->add_option("--top", opt.top, "number of tokens")->check(CLI::PositiveNumber);
  auto* chat = app.add_subcommand("chat", "interactive stylized chat");
  add_common(chat);
  chat->add_option("--style", opt.styles, "initial style");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }
  spdlog::set_level(spdlog::level::from_str(opt.log_level));

  try {
    return run(app.get_subcommands().front()->get_name(), opt);
  } catch (const pl::ValidationError& e) {
    spdlog::error("{}", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntime;
  }
}
