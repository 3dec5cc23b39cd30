#include "dtr/rewriter.hpp"

#include <stdexcept>

namespace dtr::rewriter {

nn::Seq2SeqModel train_rewriter(std::span<const disent::TemplatePair> pairs, const nn::ModelConfig& config,
                                const nn::TrainHyper& hyper, nn::TrainReport* report, const nn::Seq2SeqModel* init) {
  if (pairs.empty()) throw std::invalid_argument("train_rewriter: no template pairs");
  std::vector<nn::TokenPair> data;
  data.reserve(pairs.size());
  for (const auto& p : pairs) data.push_back({p.templ.tokens, p.target});
  if (!init) return nn::train_seq2seq(data, config, hyper, report);
  const auto& c = init->config();
  if (c.layers != config.layers || c.hidden != config.hidden || c.heads != config.heads || c.ff_dim != config.ff_dim ||
      c.max_len != config.max_len || c.vocab_size != config.vocab_size || c.dropout != config.dropout) {
    throw std::invalid_argument("train_rewriter: initial model does not match the rewriter configuration");
  }
  nn::Seq2SeqModel model = *init;
  auto r = nn::fine_tune_seq2seq(model, data, hyper);
  if (report) *report = std::move(r);
  return model;
}

StyledResponse rewrite(nn::Seq2SeqModel& model, std::span<const int> templ, int beam, corpus::Style style,
                       std::string template_id) {
  if (templ.empty()) throw std::invalid_argument("rewrite: empty template");
  const auto hyp = nn::beam_decode(model, templ, beam, model.config().max_len);
  return {hyp.tokens, std::move(template_id), style, hyp.log_prob};
}

}  // namespace dtr::rewriter
