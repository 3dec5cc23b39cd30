#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dtr/corpus.hpp"
#include "dtr/disentangler.hpp"
#include "dtr/pipeline.hpp"
#include "dtr/seq2seq.hpp"

namespace dtr::chat {

struct ChatTurn {
  std::string generator_response;
  std::string templ;
  std::string styled_response;
};

/// Interactive generation against a trained run: generator, final
/// disentangler and rewriter of the selected style.
class ChatSession {
 public:
  ChatSession(const pipeline::PipelineConfig& config, corpus::Style style);

  void set_style(corpus::Style style);
  corpus::Style style() const { return style_; }
  void set_knowledge(std::string text);
  const std::string& knowledge() const { return knowledge_; }
  void reset_context() { history_.clear(); }

  /// Appends `utterance` and the styled reply to the dialogue history.
  ChatTurn respond(const std::string& utterance);

 private:
  pipeline::PipelineConfig config_;
  corpus::Vocabulary vocab_;
  nn::Seq2SeqModel generator_;
  disent::Disentangler disentangler_;
  nn::Seq2SeqModel rewriter_;
  corpus::Style style_;
  std::string knowledge_;
  std::vector<std::string> history_;
};

/// Line-oriented loop: "/knowledge <text>", "/style <name>", "/reset" and
/// "/quit"; anything else is a user utterance. Returns at EOF or /quit.
void run_chat(ChatSession& session, std::istream& in, std::ostream& out);

}  // namespace dtr::chat
