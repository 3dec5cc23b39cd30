#include "dtr/rl.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace dtr::rl {

using disent::Action;
using nn::Graph;
using nn::Matrix;
using nn::Var;

void RlConfig::validate() const {
  if (batch_examples < 1) throw std::invalid_argument("rl.batch_examples must be >= 1");
  if (steps < 0) throw std::invalid_argument("rl.steps must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("rl.learning_rate must be positive");
  if (entropy_bonus < 0.0) throw std::invalid_argument("rl.entropy_bonus must be >= 0");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("rl.grad_clip must be positive");
  if (eval_every < 1) throw std::invalid_argument("rl.eval_every must be >= 1");
  if (!(replace_rate > 0.0 && replace_rate < 100.0)) throw std::invalid_argument("rl.replace_rate must be in (0, 100)");
}

void to_json(nlohmann::json& j, const RlConfig& c) {
  j = nlohmann::json{{"batch_examples", c.batch_examples}, {"steps", c.steps},
                     {"seed", c.seed},                     {"learning_rate", c.learning_rate},
                     {"entropy_bonus", c.entropy_bonus},   {"grad_clip", c.grad_clip},
                     {"eval_every", c.eval_every},         {"replace_rate", c.replace_rate}};
}

void from_json(const nlohmann::json& j, RlConfig& c) {
  c.batch_examples = j.value("batch_examples", c.batch_examples);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.entropy_bonus = j.value("entropy_bonus", c.entropy_bonus);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.replace_rate = j.value("replace_rate", c.replace_rate);
}

double replace_probability(double score) { return std::clamp(score / 2.0, kProbFloor, 1.0 - kProbFloor); }

namespace {
bool clamped(double score) {
  const double p = score / 2.0;
  return p <= kProbFloor || p >= 1.0 - kProbFloor;
}
}  // namespace

double log_prob_grad(double score, Action action) {
  if (clamped(score)) return 0.0;
  const double p = score / 2.0;
  return action == Action::kReplace ? 0.5 / p : -0.5 / (1.0 - p);
}

double entropy_grad(double score) {
  if (clamped(score)) return 0.0;
  const double p = score / 2.0;
  return 0.5 * std::log((1.0 - p) / p);
}

ActionSample sample_actions(std::span<const double> scores, nn::Rng& rng) {
  ActionSample out;
  out.actions.reserve(scores.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double x : scores) {
    const double p = replace_probability(x);
    const bool replace = unit(rng) < p;
    out.actions.push_back(replace ? Action::kReplace : Action::kRetain);
    out.log_prob += std::log(replace ? p : 1.0 - p);
  }
  return out;
}

void to_json(nlohmann::json& j, const EpisodeTrace& t) {
  std::vector<int> actions;
  for (auto a : t.actions) actions.push_back(static_cast<int>(a));
  j = nlohmann::json{{"id", t.id},         {"response", t.response}, {"actions", actions}, {"log_prob", t.log_prob},
                     {"template", t.templ}, {"styled", t.styled},     {"reward", t.reward}};
}

void to_json(nlohmann::json& j, const StepStats& s) {
  j = nlohmann::json{{"step", s.step},
                     {"loss", s.loss},
                     {"mean_reward", s.mean_reward},
                     {"mean_sim", s.mean_sim},
                     {"mean_cls", s.mean_cls},
                     {"replace_fraction", s.replace_fraction},
                     {"grad_norm", s.grad_norm},
                     {"updated", s.updated}};
}

void to_json(nlohmann::json& j, const RlReport& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps) steps.push_back(s);
  nlohmann::json valid = nlohmann::json::array();
  for (const auto& [step, reward] : r.validation) valid.push_back({{"step", step}, {"mean_reward", reward}});
  j = nlohmann::json{{"steps", steps},
                     {"validation", valid},
                     {"best_step", r.best_step},
                     {"best_validation_reward", r.best_validation_reward}};
}

StepStats rl_step(std::span<const RlExample> batch, disent::Disentangler& model, nn::Seq2SeqModel& rewriter,
                  const rewards::RewardModel& reward_model, nn::Adam& optimizer, const RlConfig& config,
                  nn::Rng& rng, std::vector<EpisodeTrace>* traces) {
  if (batch.empty()) throw std::invalid_argument("rl_step: empty batch");
  model.freeze_alpha(true);
  model.freeze_beta(false);
  auto& params = model.params();
  params.zero_grad();

  struct Rollout {
    Graph graph;
    Var beta;
    std::vector<double> scores;
    ActionSample sample;
    disent::Template templ;
    std::vector<int> styled;
  };
  std::vector<Rollout> rollouts(batch.size());
  std::vector<rewards::RewardInput> inputs;
  std::size_t replaced = 0, positions = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    auto& r = rollouts[b];
    const auto alpha = model.score_alpha(ex.response).alpha;
    r.beta = model.beta_scores(r.graph, model.beta_input(ex.response, ex.context, ex.knowledge), ex.response.size(),
                               nullptr);
    const Matrix& beta = r.graph.value(r.beta);
    r.scores.resize(alpha.size());
    for (std::size_t i = 0; i < alpha.size(); ++i) r.scores[i] = alpha[i] + beta(static_cast<Eigen::Index>(i), 0);
    r.sample = sample_actions(r.scores, rng);
    r.templ = disent::apply_actions(ex.response, r.sample.actions);
    r.styled = nn::greedy_decode(rewriter, r.templ.tokens, rewriter.config().max_len).tokens;
    for (auto a : r.sample.actions) replaced += a == Action::kReplace ? 1 : 0;
    positions += r.sample.actions.size();
    inputs.push_back({ex.id, r.styled, ex.reference});
  }
  const auto records = rewards::compute_rewards(inputs, reward_model);

  StepStats stats;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto& r = rollouts[b];
    const double adv = records[b].advantage;
    Matrix seed(static_cast<Eigen::Index>(r.scores.size()), 1);
    double entropy = 0.0;
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
      const double p = replace_probability(r.scores[i]);
      entropy -= p * std::log(p) + (1.0 - p) * std::log(1.0 - p);
      // dL/dx for L = -adv * log P(A) - bonus * H, averaged over the batch
      seed(static_cast<Eigen::Index>(i), 0) =
          inv * (-adv * log_prob_grad(r.scores[i], r.sample.actions[i]) - config.entropy_bonus * entropy_grad(r.scores[i]));
    }
    stats.loss += inv * (-adv * r.sample.log_prob - config.entropy_bonus * entropy);
    stats.mean_reward += inv * records[b].total;
    stats.mean_sim += inv * records[b].sim;
    stats.mean_cls += inv * records[b].cls;
    r.graph.backward(r.beta, seed);
    if (traces) {
      traces->push_back({batch[b].id, batch[b].response, r.sample.actions, r.sample.log_prob, r.templ.tokens, r.styled,
                         records[b]});
    }
  }
  if (!std::isfinite(stats.loss)) {
    nlohmann::json dump = nlohmann::json::array();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      dump.push_back({{"id", batch[b].id}, {"scores", rollouts[b].scores}, {"reward", records[b]}});
    }
    throw std::runtime_error("rl_step: non-finite loss; trace: " + dump.dump());
  }
  stats.replace_fraction = positions ? static_cast<double>(replaced) / static_cast<double>(positions) : 0.0;
  stats.grad_norm = nn::clip_grad_norm(params, config.grad_clip);
  if (stats.grad_norm > 0.0) {
    optimizer.step(params);
    stats.updated = true;
  }
  return stats;
}

double validation_reward(std::span<const RlExample> examples, const disent::Disentangler& model,
                         nn::Seq2SeqModel& rewriter, const rewards::RewardModel& reward_model, double replace_rate) {
  if (examples.empty()) return 0.0;
  std::vector<rewards::RewardInput> inputs;
  for (const auto& ex : examples) {
    const auto scores = model.score(ex.response, ex.context, ex.knowledge, true);
    const auto templ = disent::extract_template(ex.response, scores.scores, replace_rate);
    inputs.push_back({ex.id, nn::greedy_decode(rewriter, templ.tokens, rewriter.config().max_len).tokens, ex.reference});
  }
  double sum = 0.0;
  for (const auto& r : rewards::compute_rewards(inputs, reward_model)) sum += r.total;
  return sum / static_cast<double>(inputs.size());
}

RlReport train_rl(std::span<const RlExample> train, std::span<const RlExample> valid, disent::Disentangler& model,
                  nn::Seq2SeqModel& rewriter, const rewards::RewardModel& reward_model, const RlConfig& config,
                  const std::function<void(const StepStats&)>& on_step) {
  config.validate();
  RlReport report;
  if (config.steps == 0) return report;
  if (train.empty()) throw std::invalid_argument("train_rl: no training examples");
  const auto& monitor = valid.empty() ? train : valid;

  nn::Rng rng(config.seed);
  nn::Adam adam(config.learning_rate);
  auto snapshot_beta = [&] {
    std::map<std::string, Matrix> snap;
    for (const auto& [name, p] : model.params()) {
      if (model.is_beta_param(name)) snap.emplace(name, p.value);
    }
    return snap;
  };
  report.best_validation_reward = validation_reward(monitor, model, rewriter, reward_model, config.replace_rate);
  report.validation.emplace_back(0, report.best_validation_reward);
  auto best = snapshot_beta();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (int step = 1; step <= config.steps; ++step) {
    std::vector<RlExample> batch;
    while (batch.size() < static_cast<std::size_t>(config.batch_examples)) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(train[order[cursor++]]);
      if (batch.size() == train.size()) break;
    }
    auto stats = rl_step(batch, model, rewriter, reward_model, adam, config, rng);
    stats.step = step;
    report.steps.push_back(stats);
    if (on_step) on_step(stats);
    spdlog::debug("rl step {} reward {:.4f} sim {:.4f} cls {:.4f}", step, stats.mean_reward, stats.mean_sim, stats.mean_cls);
    if (step % config.eval_every == 0 || step == config.steps) {
      const double v = validation_reward(monitor, model, rewriter, reward_model, config.replace_rate);
      report.validation.emplace_back(step, v);
      if (v > report.best_validation_reward) {
        report.best_validation_reward = v;
        report.best_step = step;
        best = snapshot_beta();
      }
    }
  }
  for (auto& [name, value] : best) model.params().at(name).value = value;
  return report;
}

GradientEstimate bernoulli_reinforce_gradient(double theta, const std::function<double(Action)>& reward,
                                              std::size_t samples, nn::Rng& rng) {
  if (samples < 2) throw std::invalid_argument("bernoulli_reinforce_gradient: need at least 2 samples");
  const double s = 1.0 / (1.0 + std::exp(-theta));
  const double x = 2.0 * s;
  const double dx_dtheta = 2.0 * s * (1.0 - s);
  const double scores[1] = {x};
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t n = 0; n < samples; ++n) {
    const auto a = sample_actions(scores, rng).actions[0];
    const double g = reward(a) * log_prob_grad(x, a) * dx_dtheta;
    sum += g;
    sum_sq += g * g;
  }
  const double count = static_cast<double>(samples);
  const double mean = sum / count;
  const double var = std::max(0.0, (sum_sq - count * mean * mean) / (count - 1.0));
  return {mean, std::sqrt(var / count)};
}

}  // namespace dtr::rl
