#include <doctest.h>

#include <cmath>

#include "dtr/rl.hpp"
#include "dtr/special_tokens.hpp"
#include "helpers.hpp"

using namespace dtr;
using namespace dtr::rl;
using disent::Action;

namespace {

nn::ModelConfig tiny_config(int vocab) {
  nn::ModelConfig c;
  c.layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.dropout = 0.0;
  c.max_len = 16;
  c.vocab_size = vocab;
  return c;
}

// Untrained models over a six-word vocabulary; enough to exercise the RL plumbing.
struct Fixture {
  corpus::Vocabulary vocab;
  EmbeddingTable table;
  disent::Disentangler model;
  nn::Seq2SeqModel rewriter;
  rewards::StyleClassifier classifier;
  std::vector<RlExample> examples;

  Fixture() {
    for (const char* w : {"sun", "rain", "great", "bad", "the", "is"}) vocab.add(w);
    nn::Rng rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    table = EmbeddingTable(4, "test");
    for (int id = kNumSpecial; id < vocab.size(); ++id) {
      nn::RowVector v(4);
      for (int k = 0; k < 4; ++k) v(k) = n(rng);
      table.add(vocab.token(id), v);
    }
    const auto cfg = tiny_config(vocab.size());
    model = disent::Disentangler(cfg, 2);
    // nonzero beta weights so the policy gradient is not trivially zero
    model.params().at("beta.w").value.setConstant(0.1);
    rewriter = nn::Seq2SeqModel(cfg, 3);
    classifier = rewards::StyleClassifier(cfg, corpus::Style::kPositive, 4);
    for (int i = 0; i < 6; ++i) {
      RlExample e;
      e.id = "e" + std::to_string(i);
      e.response = {vocab.id("the"), vocab.id(i % 2 ? "sun" : "rain"), vocab.id("is"), vocab.id(i % 3 ? "great" : "bad")};
      e.context = {vocab.id("sun")};
      e.knowledge = {vocab.id("rain"), vocab.id("is")};
      e.reference = e.response;
      examples.push_back(e);
    }
  }
  rewards::RewardModel rewards() const { return {&vocab, &table, &classifier, {}}; }
};

std::map<std::string, std::uint64_t> hashes(const disent::Disentangler& d, bool beta) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, p] : d.params()) {
    if (d.is_beta_param(name) == beta) out[name] = nn::tensor_hash(p.value);
  }
  return out;
}

}  // namespace

TEST_CASE("replace probability is x/2 with a clamp") {
  CHECK(replace_probability(1.0) == 0.5);
  CHECK(replace_probability(0.4) == doctest::Approx(0.2));
  CHECK(replace_probability(0.0) == kProbFloor);
  CHECK(replace_probability(2.0) == 1.0 - kProbFloor);
}

TEST_CASE("sample_actions frequency, clamp and determinism") {
  nn::Rng rng(10);
  const std::vector<double> half{1.0};
  int replaced = 0;
  for (int n = 0; n < 10000; ++n) replaced += sample_actions(half, rng).actions[0] == Action::kReplace;
  CHECK(replaced / 10000.0 == doctest::Approx(0.5).epsilon(0.04));

  const std::vector<double> zero(5, 0.0);
  int zero_replaced = 0;
  for (int n = 0; n < 2000; ++n) {
    for (Action a : sample_actions(zero, rng).actions) zero_replaced += a == Action::kReplace;
  }
  CHECK(zero_replaced == 0);

  const std::vector<double> mixed{0.3, 1.2, 0.9, 1.8};
  nn::Rng r1(4), r2(4);
  const auto a = sample_actions(mixed, r1);
  const auto b = sample_actions(mixed, r2);
  CHECK(a.actions == b.actions);
  CHECK(a.log_prob == b.log_prob);
  double lp = 0.0;
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    const double p = replace_probability(mixed[i]);
    lp += std::log(a.actions[i] == Action::kReplace ? p : 1.0 - p);
  }
  CHECK(a.log_prob == doctest::Approx(lp).epsilon(1e-12));
}

TEST_CASE("log_prob_grad and entropy_grad match finite differences") {
  const double h = 1e-6;
  auto log_p = [](double x, Action a) {
    const double p = replace_probability(x);
    return std::log(a == Action::kReplace ? p : 1.0 - p);
  };
  auto entropy = [](double x) {
    const double p = replace_probability(x);
    return -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
  };
  for (double x : {0.1, 0.5, 1.0, 1.3, 1.9}) {
    for (Action a : {Action::kReplace, Action::kRetain}) {
      const double fd = (log_p(x + h, a) - log_p(x - h, a)) / (2 * h);
      CHECK(log_prob_grad(x, a) == doctest::Approx(fd).epsilon(1e-5));
    }
    CHECK(entropy_grad(x) == doctest::Approx((entropy(x + h) - entropy(x - h)) / (2 * h)).epsilon(1e-5));
  }
  CHECK(log_prob_grad(0.0, Action::kReplace) == 0.0);
  CHECK(log_prob_grad(2.5, Action::kRetain) == 0.0);
}

TEST_CASE("REINFORCE estimate matches the analytic Bernoulli gradient") {
  nn::Rng rng(12);
  for (double theta : {-1.0, 0.4, 1.5}) {
    const double s = 1.0 / (1.0 + std::exp(-theta));
    const auto est = bernoulli_reinforce_gradient(theta, [](Action a) { return a == Action::kReplace ? 1.0 : 0.0; }, 50000, rng);
    CHECK(std::abs(est.mean - s * (1.0 - s)) <= 3.0 * est.standard_error);
  }
}

TEST_CASE("rl_step updates beta only") {
  testing::QuietLogs quiet;
  Fixture f;
  const auto alpha_before = hashes(f.model, false);
  const auto beta_before = hashes(f.model, true);
  const auto rewriter_before = nn::parameter_hashes(f.rewriter.params());
  RlConfig cfg;
  cfg.learning_rate = 1e-2;
  nn::Adam adam(cfg.learning_rate);
  nn::Rng rng(5);
  bool any_update = false;
  for (int step = 0; step < 10; ++step) {
    std::vector<EpisodeTrace> traces;
    const auto stats = rl_step(f.examples, f.model, f.rewriter, f.rewards(), adam, cfg, rng, &traces);
    CHECK(traces.size() == f.examples.size());
    CHECK(std::isfinite(stats.loss));
    any_update = any_update || stats.updated;
  }
  CHECK(hashes(f.model, false) == alpha_before);
  CHECK(nn::parameter_hashes(f.rewriter.params()) == rewriter_before);
  if (any_update) CHECK(hashes(f.model, true) != beta_before);
}

TEST_CASE("a single-example batch has zero advantage and leaves beta unchanged") {
  testing::QuietLogs quiet;
  Fixture f;
  const nn::Matrix before = f.model.params().at("beta.w").value;
  const auto beta_before = hashes(f.model, true);
  RlConfig cfg;
  nn::Adam adam(cfg.learning_rate);
  nn::Rng rng(6);
  const auto stats = rl_step(std::span(f.examples).first(1), f.model, f.rewriter, f.rewards(), adam, cfg, rng);
  CHECK_FALSE(stats.updated);
  CHECK((f.model.params().at("beta.w").value - before).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(hashes(f.model, true) == beta_before);
}

TEST_CASE("episodes replay exactly from the same seed") {
  testing::QuietLogs quiet;
  Fixture f1, f2;
  RlConfig cfg;
  nn::Adam a1(cfg.learning_rate), a2(cfg.learning_rate);
  nn::Rng r1(9), r2(9);
  std::vector<EpisodeTrace> t1, t2;
  rl_step(f1.examples, f1.model, f1.rewriter, f1.rewards(), a1, cfg, r1, &t1);
  rl_step(f2.examples, f2.model, f2.rewriter, f2.rewards(), a2, cfg, r2, &t2);
  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i].actions == t2[i].actions);
    CHECK(t1[i].styled == t2[i].styled);
    CHECK(t1[i].reward.total == t2[i].reward.total);
  }
}

TEST_CASE("train_rl with zero steps is a no-op") {
  Fixture f;
  const auto before = nn::parameter_hashes(f.model.params());
  RlConfig cfg;
  cfg.steps = 0;
  const auto report = train_rl(f.examples, f.examples, f.model, f.rewriter, f.rewards(), cfg);
  CHECK(report.steps.empty());
  CHECK(nn::parameter_hashes(f.model.params()) == before);
}

TEST_CASE("train_rl logs per-step reward components and keeps alpha") {
  testing::QuietLogs quiet;
  Fixture f;
  const auto alpha_before = hashes(f.model, false);
  RlConfig cfg;
  cfg.steps = 6;
  cfg.batch_examples = 3;
  cfg.eval_every = 3;
  int seen = 0;
  const auto report = train_rl(f.examples, f.examples, f.model, f.rewriter, f.rewards(), cfg,
                               [&](const StepStats& s) { seen += s.step > 0; });
  CHECK(seen == 6);
  REQUIRE(report.steps.size() == 6);
  for (const auto& s : report.steps) {
    CHECK(s.mean_reward == doctest::Approx(s.mean_sim + s.mean_cls));
  }
  CHECK(report.validation.size() == 3);
  CHECK(hashes(f.model, false) == alpha_before);
}

TEST_CASE("RlConfig validation") {
  RlConfig c;
  c.batch_examples = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = RlConfig{};
  c.entropy_bonus = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = RlConfig{};
  CHECK_NOTHROW(c.validate());
}
