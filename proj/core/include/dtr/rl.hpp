#pragma once

// REINFORCE fine-tuning of the disentangler's beta side: sample
// replace/retain actions from the token scores, rewrite the resulting
// template with the frozen rewriter and push the centred reward back
// through log P(A).

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dtr/disentangler.hpp"
#include "dtr/rewards.hpp"
#include "dtr/seq2seq.hpp"

namespace dtr::rl {

struct RlConfig {
  int batch_examples = 16;
  int steps = 200;
  std::uint64_t seed = 1;
  double learning_rate = 5e-4;
  double entropy_bonus = 0.0;
  double grad_clip = 1.0;
  int eval_every = 20;      // validation interval in steps
  double replace_rate = 25.0;  // used by the deterministic validation pass

  void validate() const;
};

void to_json(nlohmann::json& j, const RlConfig& c);
void from_json(const nlohmann::json& j, RlConfig& c);

inline constexpr double kProbFloor = 1e-6;

/// p = x / 2 clamped to [1e-6, 1 - 1e-6].
double replace_probability(double score);
/// d log P(a) / d x under p = x / 2; zero where the clamp is active.
double log_prob_grad(double score, disent::Action action);
/// d H / d x for the per-position Bernoulli entropy; zero where clamped.
double entropy_grad(double score);

struct ActionSample {
  std::vector<disent::Action> actions;
  double log_prob = 0.0;
};

ActionSample sample_actions(std::span<const double> scores, nn::Rng& rng);

/// One RL input: the cached generator output plus its conditioning.
struct RlExample {
  std::string id;
  std::vector<int> response;  // generator output
  std::vector<int> context;
  std::vector<int> knowledge;
  std::vector<int> reference;
};

struct EpisodeTrace {
  std::string id;
  std::vector<int> response;
  std::vector<disent::Action> actions;
  double log_prob = 0.0;
  std::vector<int> templ;
  std::vector<int> styled;
  rewards::RewardRecord reward;
};

void to_json(nlohmann::json& j, const EpisodeTrace& t);

struct StepStats {
  int step = 0;
  double loss = 0.0;
  double mean_reward = 0.0;
  double mean_sim = 0.0;
  double mean_cls = 0.0;
  double replace_fraction = 0.0;
  double grad_norm = 0.0;
  bool updated = false;
};

void to_json(nlohmann::json& j, const StepStats& s);

/// One policy-gradient update of the beta parameters. Alpha and the
/// rewriter are never written. The Adam step is skipped when the gradient
/// is exactly zero.
StepStats rl_step(std::span<const RlExample> batch, disent::Disentangler& model, nn::Seq2SeqModel& rewriter,
                  const rewards::RewardModel& reward_model, nn::Adam& optimizer, const RlConfig& config,
                  nn::Rng& rng, std::vector<EpisodeTrace>* traces = nullptr);

/// Mean reward of the deterministic pipeline (threshold templates, greedy rewrite).
double validation_reward(std::span<const RlExample> examples, const disent::Disentangler& model,
                         nn::Seq2SeqModel& rewriter, const rewards::RewardModel& reward_model, double replace_rate);

struct RlReport {
  std::vector<StepStats> steps;
  std::vector<std::pair<int, double>> validation;  // (step, mean reward)
  int best_step = 0;
  double best_validation_reward = 0.0;
};

void to_json(nlohmann::json& j, const RlReport& r);

/// Runs `steps` updates over random batches of `train` and keeps the beta
/// parameters with the best validation reward. `on_step` receives each
/// step's statistics (e.g. for a JSONL log).
RlReport train_rl(std::span<const RlExample> train, std::span<const RlExample> valid, disent::Disentangler& model,
                  nn::Seq2SeqModel& rewriter, const rewards::RewardModel& reward_model, const RlConfig& config,
                  const std::function<void(const StepStats&)>& on_step = {});

/// Score-function gradient estimate for a one-parameter policy with
/// replace probability sigmoid(theta), using log_prob_grad on x = 2 sigmoid(theta).
struct GradientEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

GradientEstimate bernoulli_reinforce_gradient(double theta, const std::function<double(disent::Action)>& reward,
                                              std::size_t samples, nn::Rng& rng);

}  // namespace dtr::rl
