#pragma once

// Desk-scale Transformer building blocks: a token encoder (used by the
// disentangler and the style classifier) and a pre-LayerNorm encoder-decoder
// with a shared, output-tied embedding (used by generator, DAE and rewriter).

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <vector>

#include "dtr/autograd.hpp"

namespace dtr::nn {

struct ModelConfig {
  int layers = 2;
  int hidden = 128;
  int heads = 4;
  int ff_dim = 256;
  double dropout = 0.1;
  int max_len = 64;
  int vocab_size = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Sinusoidal position table (rows = positions).
Matrix positional_table(int max_len, int hidden);

/// Bidirectional token encoder: embedding + positions + N self-attention
/// layers + final LayerNorm. Produces one hidden row per input token.
class TokenEncoder {
 public:
  TokenEncoder() = default;
  TokenEncoder(const ModelConfig& config, std::string prefix, ParameterStore& store, Rng& init_rng);

  Var forward(Graph& g, ParameterStore& store, std::span<const int> ids, Rng* dropout_rng) const;

 private:
  ModelConfig config_;
  std::string prefix_;
  Matrix positions_;
};

class Seq2SeqModel {
 public:
  Seq2SeqModel() = default;
  Seq2SeqModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  Var encode(Graph& g, std::span<const int> source, Rng* dropout_rng);
  /// Logits (rows = decoder positions) for a decoder input prefix.
  Var decode(Graph& g, Var memory, std::span<const int> decoder_input, Rng* dropout_rng);
  /// Summed token NLL of `target` (+EOS) given `source`, teacher forced.
  Var loss(Graph& g, std::span<const int> source, std::span<const int> target, Rng* dropout_rng);

  /// Inference: encoder output for a source sequence.
  Matrix memory(std::span<const int> source);
  /// Inference: log-probabilities at every decoder position for a prefix.
  Matrix decoder_log_probs(const Matrix& memory, std::span<const int> decoder_input);

 private:
  ModelConfig config_;
  ParameterStore params_;
  TokenEncoder encoder_;
  Matrix positions_;
};

/// Rowwise log-softmax.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace dtr::nn
