#pragma once

// Style rewriter: a seq2seq model from a [*]-template back to a full
// sentence in one target style.

#include <span>
#include <string>
#include <vector>

#include "dtr/corpus.hpp"
#include "dtr/disentangler.hpp"
#include "dtr/seq2seq.hpp"

namespace dtr::rewriter {

struct StyledResponse {
  std::vector<int> tokens;
  std::string template_id;
  corpus::Style style = corpus::Style::kPositive;
  double log_prob = 0.0;
};

/// Trains on (template -> original sentence) pairs, from scratch or starting
/// from `init` (same architecture, e.g. the trained generator).
nn::Seq2SeqModel train_rewriter(std::span<const disent::TemplatePair> pairs, const nn::ModelConfig& config,
                                const nn::TrainHyper& hyper, nn::TrainReport* report = nullptr,
                                const nn::Seq2SeqModel* init = nullptr);

StyledResponse rewrite(nn::Seq2SeqModel& model, std::span<const int> templ, int beam, corpus::Style style,
                       std::string template_id = {});

}  // namespace dtr::rewriter
