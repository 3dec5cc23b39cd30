#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dtr/autograd.hpp"
#include "dtr/transformer.hpp"

namespace dtr::nn {

struct TrainHyper {
  double learning_rate = 5e-4;
  int token_batch = 4096;
  int max_epochs = 30;
  int patience = 3;
  std::uint64_t seed = 1;
  double grad_clip = 1.0;

  void validate(int max_len) const;
};

void to_json(nlohmann::json& j, const TrainHyper& h);
void from_json(const nlohmann::json& j, TrainHyper& h);

struct TokenPair {
  std::vector<int> source;
  std::vector<int> target;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
};

struct TrainReport {
  double initial_valid_loss = 0.0;
  double best_valid_loss = 0.0;
  int best_epoch = 0;
  std::vector<EpochLog> epochs;
};

void to_json(nlohmann::json& j, const TrainReport& r);

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Updates every non-frozen parameter from its accumulated gradient.
  void step(ParameterStore& params);

  double learning_rate() const { return lr_; }
  long step_count() const { return t_; }

  struct Moments {
    Matrix m;
    Matrix v;
  };
  const std::map<std::string, Moments>& state() const { return state_; }
  void restore(long step_count, std::map<std::string, Moments> state);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(ParameterStore& params, double max_norm);

/// Applied to each training source once per epoch (fresh corruption).
using SourceCorruptor = std::function<std::vector<int>(std::span<const int> source, Rng& rng)>;

/// Teacher-forced NLL training with token-count batches, Adam, gradient
/// clipping and early stopping on `valid`. The best-validation parameters are
/// restored before returning.
TrainReport fit_seq2seq(Seq2SeqModel& model, std::span<const TokenPair> train, std::span<const TokenPair> valid,
                        const TrainHyper& hyper, const SourceCorruptor& corrupt = {});

/// Builds a model, holds out 10% of `pairs` (seeded) for early stopping and trains it.
Seq2SeqModel train_seq2seq(std::span<const TokenPair> pairs, const ModelConfig& config, const TrainHyper& hyper,
                           TrainReport* report = nullptr, const SourceCorruptor& corrupt = {});

/// Continues training `model` with the same seeded 10% hold-out as train_seq2seq.
TrainReport fine_tune_seq2seq(Seq2SeqModel& model, std::span<const TokenPair> pairs, const TrainHyper& hyper,
                              const SourceCorruptor& corrupt = {});

/// Mean per-token NLL; independent of the order of `pairs`.
double evaluate_loss(Seq2SeqModel& model, std::span<const TokenPair> pairs);

// ---------------------------------------------------------------------------
// decoding

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, EOS excluded
  double log_prob = 0.0;
  bool complete = false;  // ended with EOS rather than hitting max_len
};

/// Next-token log-probabilities given the generated prefix (no BOS).
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual int vocab_size() const = 0;
  virtual RowVector next_log_probs(std::span<const int> prefix) = 0;
};

struct SearchOptions {
  int beam = 5;
  int max_len = 64;
  int eos = 2;
  int min_len = 0;  // EOS is unavailable before this many tokens
  std::vector<int> banned;
};

/// Beam search without length normalisation. The result is never worse than
/// greedy decoding under the same scorer.
Hypothesis beam_search(StepScorer& scorer, const SearchOptions& options);

class Seq2SeqScorer : public StepScorer {
 public:
  Seq2SeqScorer(Seq2SeqModel& model, std::span<const int> source);
  int vocab_size() const override { return model_.config().vocab_size; }
  RowVector next_log_probs(std::span<const int> prefix) override;

 private:
  Seq2SeqModel& model_;
  Matrix memory_;
};

/// Decodes with all control tokens banned except EOS; the output holds at
/// least one token.
Hypothesis beam_decode(Seq2SeqModel& model, std::span<const int> source, int beam, int max_len);
inline Hypothesis greedy_decode(Seq2SeqModel& model, std::span<const int> source, int max_len) {
  return beam_decode(model, source, 1, max_len);
}

/// Encoder hidden states, one row per token. Over-long input is truncated to
/// max_len with a warning.
Matrix encode_tokens(Seq2SeqModel& model, std::span<const int> tokens);

// ---------------------------------------------------------------------------
// persistence

struct CheckpointMeta {
  int epoch = 0;
  double valid_loss = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
};

void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& path, const CheckpointMeta& meta = {},
                     const Adam* optimizer = nullptr);
/// `expected_vocab_size` > 0 enforces a vocabulary match.
Seq2SeqModel load_checkpoint(const std::filesystem::path& path, int expected_vocab_size = 0,
                             CheckpointMeta* meta = nullptr);

/// FNV-1a hash over the raw bytes of one tensor; used for freeze checks.
std::uint64_t tensor_hash(const Matrix& m);
std::map<std::string, std::uint64_t> parameter_hashes(const ParameterStore& params);

}  // namespace dtr::nn
