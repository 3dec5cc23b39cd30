#pragma once

// Sequential style disentangler: per-token style scores from a response-only
// encoder (alpha) plus a response+context+knowledge encoder (beta), template
// extraction at a replace rate, and the weakly supervised ranking bootstrap
// driven by denoising-reconstruction distances.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dtr/autograd.hpp"
#include "dtr/embedding.hpp"
#include "dtr/seq2seq.hpp"
#include "dtr/transformer.hpp"

namespace dtr {
namespace corpus {
class Vocabulary;
}

namespace disent {

enum class Action : std::uint8_t { kRetain = 0, kReplace = 1 };

struct TokenScores {
  std::vector<int> tokens;
  std::vector<double> alpha;
  std::vector<double> beta;  // empty when the beta encoder is not used
  std::vector<double> scores;
};

struct Template {
  std::vector<int> tokens;  // STAR tags and retained tokens
  std::vector<Action> actions;
  double replace_rate = 0.0;
};

/// max(1, floor(m * P_r / 100)), capped at m.
int replace_count(std::size_t m, double replace_rate);

/// Positions replaced at `replace_rate`: the top-k scores, ties to the left.
std::vector<Action> threshold_actions(std::span<const double> scores, double replace_rate);

/// Applies actions, collapsing every maximal replaced run into one STAR.
Template apply_actions(std::span<const int> tokens, std::span<const Action> actions, double replace_rate = 0.0);

Template extract_template(std::span<const int> tokens, std::span<const double> scores, double replace_rate);

class Disentangler {
 public:
  Disentangler() = default;
  Disentangler(const nn::ModelConfig& config, std::uint64_t seed);

  const nn::ModelConfig& config() const { return config_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }

  /// Sigmoid alpha scores as an m x 1 column.
  nn::Var alpha_scores(nn::Graph& g, std::span<const int> response, nn::Rng* dropout_rng);
  /// Sigmoid beta scores at the response positions of `beta_input`.
  nn::Var beta_scores(nn::Graph& g, std::span<const int> beta_input, std::size_t response_len, nn::Rng* dropout_rng);

  /// Eval-mode scores. Without beta, x_i = alpha_i.
  TokenScores score(std::span<const int> response, std::span<const int> context, std::span<const int> knowledge,
                    bool use_beta) const;
  TokenScores score_alpha(std::span<const int> response) const { return score(response, {}, {}, false); }

  /// (response SEP context SEP knowledge), truncated to max_len from the tail.
  std::vector<int> beta_input(std::span<const int> response, std::span<const int> context,
                              std::span<const int> knowledge) const;

  void freeze_alpha(bool frozen);
  void freeze_beta(bool frozen);
  /// Names of the beta-side tensors.
  bool is_beta_param(const std::string& name) const;

  void save(const std::filesystem::path& path, const nlohmann::json& metrics = nlohmann::json::object()) const;
  static Disentangler load(const std::filesystem::path& path, int expected_vocab_size = 0);

 private:
  nn::ModelConfig config_;
  nn::ParameterStore params_;
  nn::TokenEncoder alpha_;
  nn::TokenEncoder beta_;
};

// ---------------------------------------------------------------------------
// weak supervision

/// max(1, floor(0.15 m)).
int mask_count(std::size_t m);
/// Replaces mask_count(m) distinct uniformly chosen positions with MASK.
std::vector<int> mask_tokens(std::span<const int> tokens, nn::Rng& rng);

nn::Seq2SeqModel train_dae(std::span<const std::vector<int>> sentences, const nn::ModelConfig& config,
                           const nn::TrainHyper& hyper, nn::TrainReport* report = nullptr);

struct DistanceSequence {
  std::string id;
  std::vector<int> tokens;
  std::vector<double> distances;
  std::vector<int> predictions;  // reconstructed token per position
};

/// Masks each position in turn and reads the reconstructor's argmax over
/// non-control tokens at that position. Returns an empty distance list for
/// sentences shorter than 2 tokens.
DistanceSequence leave_one_out_distances(nn::Seq2SeqModel& dae, std::span<const int> sentence,
                                         const corpus::Vocabulary& vocab, const EmbeddingTable& embedder);

struct RankingTriple {
  std::size_t sentence = 0;  // index into the distance list
  int i = 0;
  int j = 0;
  int y = 0;  // +1 iff d_i < d_j
};

/// Up to Z distinct unordered pairs per sentence with d_i != d_j, sampled
/// without replacement.
std::vector<RankingTriple> build_ranking_triples(std::span<const DistanceSequence> sequences, int z, std::uint64_t seed);

/// max(0, -y (x_i - x_j) + margin).
double ranking_loss(double x_i, double x_j, int y, double margin);

struct RankingReport {
  double initial_valid_loss = 0.0;
  double best_valid_loss = 0.0;
  double valid_accuracy = 0.0;
  int best_epoch = 0;
  std::size_t train_triples = 0;
  std::size_t valid_triples = 0;
  std::vector<nn::EpochLog> epochs;
};

void to_json(nlohmann::json& j, const RankingReport& r);

/// Trains the alpha side on ranking triples with early stopping on a seeded
/// 10% sentence hold-out. Beta parameters are frozen throughout.
RankingReport train_disentangler_ws(Disentangler& model, std::span<const DistanceSequence> sequences,
                                    std::span<const RankingTriple> triples, const nn::TrainHyper& hyper, double margin);

/// Fraction of triples whose alpha scores order agrees with y.
double ranking_accuracy(const Disentangler& model, std::span<const DistanceSequence> sequences,
                        std::span<const RankingTriple> triples);

struct TemplatePair {
  std::string id;
  Template templ;
  std::vector<int> target;
};

/// Alpha-only templates for every sentence.
std::vector<TemplatePair> build_template_corpus(const Disentangler& model, std::span<const std::string> ids,
                                                std::span<const std::vector<int>> sentences, double replace_rate);

}  // namespace disent
}  // namespace dtr
