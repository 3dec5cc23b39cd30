#pragma once

// Reward signals: embedding-cosine similarity to the reference and the
// probability of the target style under a small encoder classifier.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dtr/corpus.hpp"
#include "dtr/embedding.hpp"
#include "dtr/seq2seq.hpp"
#include "dtr/transformer.hpp"

namespace dtr::rewards {

/// Cosine of the mean vectors after dropping control and out-of-table
/// tokens. Returns 0 (with a warning) when either side ends up empty.
double semantic_similarity(const EmbeddingTable& table, std::span<const std::string> a,
                           std::span<const std::string> b);

struct ClassifierReport {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  double heldout_accuracy = 0.0;
  double best_valid_loss = 0.0;
  int best_epoch = 0;
  std::vector<nn::EpochLog> epochs;
};

void to_json(nlohmann::json& j, const ClassifierReport& r);

/// Encoder + mean pooling + logistic head: P(target style | tokens).
class StyleClassifier {
 public:
  StyleClassifier() = default;
  StyleClassifier(const nn::ModelConfig& config, corpus::Style style, std::uint64_t seed);

  nn::Var logit(nn::Graph& g, std::span<const int> tokens, nn::Rng* dropout_rng);
  /// Strictly inside (0, 1). Throws on empty input; over-long input is truncated.
  double probability(std::span<const int> tokens) const;

  corpus::Style style() const { return style_; }
  const nn::ModelConfig& config() const { return config_; }
  nn::ParameterStore& params() { return params_; }
  double heldout_accuracy() const { return heldout_accuracy_; }
  void set_heldout_accuracy(double acc) { heldout_accuracy_ = acc; }

  void save(const std::filesystem::path& path) const;
  static StyleClassifier load(const std::filesystem::path& path, int expected_vocab_size = 0);

 private:
  nn::ModelConfig config_;
  corpus::Style style_ = corpus::Style::kPositive;
  nn::ParameterStore params_;
  nn::TokenEncoder encoder_;
  double heldout_accuracy_ = 0.0;
};

inline constexpr double kMinDeployAccuracy = 0.8;

/// Binary cross-entropy training with a seeded 10% hold-out per class. Below
/// kMinDeployAccuracy on the hold-out it throws unless `force` is set.
StyleClassifier train_style_classifier(std::span<const std::vector<int>> positives,
                                       std::span<const std::vector<int>> negatives, corpus::Style style,
                                       const nn::ModelConfig& config, const nn::TrainHyper& hyper, bool force,
                                       ClassifierReport* report = nullptr);

double style_intensity(const StyleClassifier& classifier, std::span<const int> tokens);
/// Corpus mean of style_intensity.
double mean_style_intensity(const StyleClassifier& classifier, std::span<const std::vector<int>> corpus);

struct RewardWeights {
  double sim = 1.0;
  double cls = 1.0;
};

struct RewardInput {
  std::string id;
  std::vector<int> hypothesis;
  std::vector<int> reference;
};

struct RewardRecord {
  std::string id;
  double sim = 0.0;
  double cls = 0.0;
  double total = 0.0;
  double advantage = 0.0;
};

void to_json(nlohmann::json& j, const RewardRecord& r);

struct RewardModel {
  const corpus::Vocabulary* vocab = nullptr;
  const EmbeddingTable* table = nullptr;
  const StyleClassifier* classifier = nullptr;
  RewardWeights weights;
};

/// total = w_sim * sim + w_cls * cls; advantage = total - batch mean.
std::vector<RewardRecord> compute_rewards(std::span<const RewardInput> batch, const RewardModel& model);

}  // namespace dtr::rewards
