#include <doctest.h>

#include <cstdlib>
#include <sstream>
#include <nlohmann/json.hpp>

#include "dtr/chat.hpp"
#include "dtr/pipeline.hpp"
#include "dtr/synthetic.hpp"
#include "helpers.hpp"

using namespace dtr;
using namespace dtr::pipeline;
using nlohmann::json;

namespace {

json tiny_model() { return {{"layers", 1}, {"hidden", 16}, {"heads", 2}, {"ff_dim", 32}, {"dropout", 0.0}, {"max_len", 24}}; }
json quick_train(int epochs) {
  return {{"learning_rate", 0.003}, {"token_batch", 240}, {"max_epochs", epochs}, {"patience", 2}};
}

// Small synthetic corpus plus a config with tiny models, written to `dir`.
json make_run(const testing::TempDir& dir) {
  const auto corpus = synthetic::synth_corpus(3, 120, 200);
  synthetic::write_synthetic(dir.path() / "data", corpus);
  json models = {{"generator", tiny_model()}, {"dae", tiny_model()},       {"disentangler", tiny_model()},
                 {"rewriter", tiny_model()},  {"classifier", tiny_model()}, {"rewriter_init", "generator"}};
  json training = {{"generator", quick_train(3)},    {"dae", quick_train(2)},        {"disentangler", quick_train(2)},
                   {"rewriter", quick_train(2)},     {"classifier", quick_train(8)}};
  return {{"name", "unit"},
          {"seed", 2},
          {"run_root", "runs"},
          {"data",
           {{"dialogues", "data/dialogues.jsonl"},
            {"style", {{"positive", "data/style_positive.jsonl"}, {"polite", "data/style_polite.jsonl"}}}}},
          {"models", models},
          {"training", training},
          {"disentangle", {{"replace_rate", 25}, {"z", 4}, {"margin", 0.2}}},
          {"beam", 2},
          {"rl", {{"batch_examples", 4}, {"steps", 2}, {"eval_every", 1}, {"valid_examples", 8}}},
          {"styles", {"positive", "polite"}}};
}

std::filesystem::path write_config(const testing::TempDir& dir, const json& j, const std::string& name = "config.json") {
  testing::write_file(dir / name, j.dump(2));
  return dir / name;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "<no ValidationError>";
}

}  // namespace

TEST_CASE("config validation names the offending key") {
  testing::TempDir dir("cfg");
  json j = make_run(dir);
  CHECK_NOTHROW(load_config(write_config(dir, j)));

  json bad = j;
  bad["models"]["generator"]["heads"] = 3;
  CHECK(error_of([&] { load_config(write_config(dir, bad)).validate(); }).find("models.generator") != std::string::npos);
  bad = j;
  bad["models"]["dae"]["learning_rate"] = 0.1;
  CHECK(error_of([&] { load_config(write_config(dir, bad)).validate(); }).find("models.dae.learning_rate") != std::string::npos);
  bad = j;
  bad["training"]["rewriter"]["token_batch"] = 4;
  CHECK(error_of([&] { load_config(write_config(dir, bad)).validate(); }).find("training.rewriter") != std::string::npos);
  bad = j;
  bad["disentangle"]["replace_rate"] = 120;
  CHECK(error_of([&] { load_config(write_config(dir, bad)).validate(); }).find("disentangle.replace_rate") != std::string::npos);
  bad = j;
  bad["styles"] = {"positive", "sarcastic"};
  CHECK(error_of([&] { load_config(write_config(dir, bad)).validate(); }).find("sarcastic") != std::string::npos);
  bad = j;
  bad["models"]["rewriter"]["hidden"] = 32;
  CHECK(error_of([&] { load_config(write_config(dir, bad)).validate(); }).find("rewriter_init") != std::string::npos);
  bad["models"]["rewriter_init"] = "scratch";
  CHECK_NOTHROW(load_config(write_config(dir, bad)));
}

TEST_CASE("relative paths resolve against the config directory") {
  testing::TempDir dir("paths");
  const auto c = load_config(write_config(dir, make_run(dir)));
  CHECK(c.dialogues == dir.path() / "data/dialogues.jsonl");
  CHECK(c.run_dir() == dir.path() / "runs/unit");
}

TEST_CASE("environment overrides use double underscores for nesting") {
  json j = {{"seed", 1}, {"rl", {{"steps", 5}}}};
  setenv("DTR_RL__STEPS", "7", 1);
  setenv("DTR_SEED", "9", 1);
  setenv("DTR_NAME", "plain-text", 1);
  apply_env_overrides(j);
  unsetenv("DTR_RL__STEPS");
  unsetenv("DTR_SEED");
  unsetenv("DTR_NAME");
  CHECK(j["rl"]["steps"] == 7);
  CHECK(j["seed"] == 9);
  CHECK(j["name"] == "plain-text");
}

TEST_CASE("derived seeds are stable and stage specific") {
  CHECK(derive_seed(1, "train-dae/positive") == derive_seed(1, "train-dae/positive"));
  CHECK(derive_seed(1, "train-dae/positive") != derive_seed(1, "train-dae/polite"));
  CHECK(derive_seed(1, "train-dae/positive") != derive_seed(2, "train-dae/positive"));
}

TEST_CASE("manifest invalidation clears later stages") {
  testing::TempDir dir("manifest");
  auto m = RunManifest::load_or_create(dir.path(), "h");
  m.mark_completed("train-generator");
  for (std::string_view st : kStages) {
    if (!is_per_style(st)) continue;
    for (auto s : corpus::kAllStyles) m.mark_completed(stage_key(st, s));
  }
  m.invalidate_from("build-templates", corpus::Style::kPolite);
  CHECK(m.completed("train-disentangler/polite"));
  CHECK_FALSE(m.completed("build-templates/polite"));
  CHECK_FALSE(m.completed("train-rl/polite"));
  CHECK(m.completed("train-rl/positive"));
  m.save();
  const auto back = RunManifest::load_or_create(dir.path(), "h");
  CHECK(back.completed("train-rl/positive"));
  CHECK_FALSE(back.completed("train-rl/polite"));
  m.invalidate_from("train-generator", corpus::Style::kPositive);
  CHECK_FALSE(m.completed("train-generator"));
  CHECK_FALSE(m.completed("train-dae/negative"));
}

TEST_CASE("run directories are locked") {
  testing::TempDir dir("lock");
  RunLock lock(dir.path());
  CHECK_THROWS(RunLock(dir.path()));
}

TEST_CASE("prepare reports missing corpus files by key") {
  testing::TempDir dir("missing");
  json j = make_run(dir);
  j["data"]["style"]["polite"] = "data/nope.jsonl";
  const auto c = load_config(write_config(dir, j));
  CHECK(error_of([&] { cmd_prepare(c, false); }).find("data.style.polite") != std::string::npos);
}

TEST_CASE("end-to-end run on a tiny corpus") {
  testing::QuietLogs quiet;
  testing::TempDir dir("e2e");
  const json j = make_run(dir);
  const auto config = load_config(write_config(dir, j));
  cmd_prepare(config, false);
  const auto ws = load_workspace(config);
  CHECK(ws.split.train.size() + ws.split.valid.size() + ws.split.test.size() == 120);
  CHECK(ws.vocab.size() > kNumSpecial);
  std::map<std::string, std::string> prepared;
  for (const auto& f : std::filesystem::directory_iterator(config.run_dir() / "corpora")) {
    prepared[f.path().filename().string()] = testing::read_file(f.path());
  }
  cmd_prepare(config, false);
  for (const auto& [name, bytes] : prepared) CHECK(testing::read_file(config.run_dir() / "corpora" / name) == bytes);

  SUBCASE("stages refuse to run before their prerequisites") {
    PipelineRequest r;
    r.stages = {"build-triples"};
    CHECK(error_of([&] { cmd_pipeline(config, r); }).find("train-dae") != std::string::npos);
  }

  SUBCASE("a full run resumes idempotently and rejects a changed config") {
    const auto first = cmd_pipeline(config, {});
    for (std::string_view st : kStages) {
      if (!is_per_style(st)) {
        CHECK(first.completed(std::string(st)));
        continue;
      }
      for (auto s : config.styles) CHECK(first.completed(stage_key(st, s)));
    }
    const auto runs = config.run_dir();
    const auto gen_hash = testing::read_file(runs / "checkpoints" / "generator.ckpt");
    const auto stamp = first.data()["stages"]["train-rl/polite"].dump();
    const auto again = cmd_pipeline(config, {});
    CHECK(again.data()["stages"]["train-rl/polite"].dump() == stamp);
    CHECK(testing::read_file(runs / "checkpoints" / "generator.ckpt") == gen_hash);

    PipelineRequest redo;
    redo.stages = {"build-templates"};
    redo.styles = {corpus::Style::kPolite};
    const auto partial = cmd_pipeline(config, redo);
    CHECK(partial.completed("build-templates/polite"));
    CHECK_FALSE(partial.completed("train-rewriter/polite"));
    CHECK(partial.completed("train-rl/positive"));
    cmd_pipeline(config, {});

    const auto preds = cmd_generate(config, corpus::Style::kPositive, "test");
    const auto rows = read_predictions(preds);
    CHECK(rows.size() == ws.split.test.size());
    for (const auto& p : rows) CHECK_FALSE(p.styled_response.empty());
    cmd_generate(config, corpus::Style::kPolite, "test");
    const auto reports = cmd_evaluate(config, "test");
    CHECK(reports.size() == 2);
    for (const auto& r : reports) {
      CHECK(r.n_examples == ws.split.test.size());
      CHECK(r.f1 >= 0.0);
      CHECK(r.f1 <= 1.0);
      CHECK_FALSE(r.inner_distinct1.has_value());
    }
    const auto refs = [&] {
      std::map<std::string, std::string> m;
      for (const auto& d : ws.dialogues) m[d.raw.id] = d.raw.response;
      return m;
    }();
    auto verbatim = rows;
    for (auto& p : verbatim) p.styled_response = p.generator_response = refs.at(p.id);
    const auto identity = evaluate_run(verbatim, refs);
    CHECK(identity.f1 == doctest::Approx(1.0));
    CHECK(identity.bleu1 == doctest::Approx(1.0));
    CHECK(identity.rouge_l == doctest::Approx(1.0));
    CHECK(identity.f1_drop == doctest::Approx(0.0));
    CHECK(error_of([&] { evaluate_run({}, refs); }).find("empty") != std::string::npos);
    auto stray = rows;
    stray[0].id = "no-such-id";
    CHECK(error_of([&] { evaluate_run(stray, refs); }).find("no-such-id") != std::string::npos);

    const std::string first_bytes = testing::read_file(preds);
    cmd_generate(config, corpus::Style::kPositive, "test");
    CHECK(testing::read_file(preds) == first_bytes);

    const std::vector<double> rates{10, 50};
    const auto sweep = cmd_sweep_pr(config, rates, "test");
    CHECK(sweep.size() == 2);
    const std::vector<double> bad_rates{0, 50};
    CHECK_THROWS_AS(cmd_sweep_pr(config, bad_rates, "test"), ValidationError);
    CHECK(cmd_style_tokens(config, corpus::Style::kPositive, 5).size() == 5);

    chat::ChatSession session(config, corpus::Style::kPolite);
    session.set_knowledge("the museum opens at nine");
    const auto turn = session.respond("when does it open ?");
    CHECK_FALSE(turn.styled_response.empty());

    const std::string script = "/knowledge the museum opens at nine\nwhen does it open ?\n\n/style positive\nthanks !\n";
    auto transcript = [&] {
      chat::ChatSession s(config, corpus::Style::kPolite);
      std::istringstream in(script);
      std::ostringstream out;
      chat::run_chat(s, in, out);
      return out.str();
    };
    const std::string t1 = transcript();
    CHECK(t1 == transcript());
    CHECK(t1.find("style: positive") != std::string::npos);
    CHECK(t1.find("> > ") != std::string::npos);  // the empty line re-prompts

    json changed = j;
    changed["disentangle"]["z"] = 5;
    const auto config2 = load_config(write_config(dir, changed, "changed.json"));
    CHECK(error_of([&] { cmd_pipeline(config2, {}); }).find("different configuration") != std::string::npos);
  }
}

#ifdef DTR_CLI_PATH
TEST_CASE("CLI exit codes") {
  testing::QuietLogs quiet;
  testing::TempDir dir("cli");
  const auto cfg = write_config(dir, make_run(dir));
  auto run = [&](const std::string& args) {
    const std::string cmd = std::string(DTR_CLI_PATH) + " " + args + " --log-level error > " + (dir / "out.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(run("prepare") == 1);
  CHECK(run("nonsense --config " + cfg.string()) == 1);
  CHECK(run("evaluate --config " + cfg.string()) == 1);
  json bad = make_run(dir);
  bad["beam"] = 0;
  CHECK(run("prepare --config " + write_config(dir, bad, "bad.json").string()) == 1);
  CHECK(run("prepare --config " + cfg.string()) == 0);
  CHECK(run("pipeline --config " + cfg.string() + " --stage train-rl") == 1);
  CHECK(run("style-tokens --config " + cfg.string() + " --style positive") == 1);
  std::filesystem::create_directories(dir / "runs/unit/checkpoints");
  testing::write_file(dir / "runs/unit/checkpoints/disentangler_ws_positive.ckpt", "garbage");
  CHECK(run("style-tokens --config " + cfg.string() + " --style positive") == 2);
}
#endif
