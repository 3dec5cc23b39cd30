#include "dtr/chat.hpp"

#include <spdlog/spdlog.h>

#include <istream>
#include <ostream>

#include "dtr/rewriter.hpp"
#include "dtr/special_tokens.hpp"

namespace dtr::chat {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kHistoryTurns = 2;

std::vector<int> join_sep(const corpus::Vocabulary& vocab, const std::vector<std::string>& parts) {
  std::vector<int> out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(kSep);
    const auto ids = vocab.encode(corpus::tokenize(parts[i]));
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

fs::path checkpoint(const pipeline::PipelineConfig& config, const std::string& stem) {
  const auto path = config.run_dir() / "checkpoints" / (stem + ".ckpt");
  if (!fs::exists(path)) throw pipeline::ValidationError("missing checkpoint " + path.string() + " (train the run first)");
  return path;
}

}  // namespace

ChatSession::ChatSession(const pipeline::PipelineConfig& config, corpus::Style style)
    : config_(config), style_(style) {
  vocab_ = corpus::Vocabulary::load(config_.run_dir() / "corpora" / "vocab.txt");
  generator_ = nn::load_checkpoint(checkpoint(config_, "generator"), vocab_.size());
  set_style(style);
}

void ChatSession::set_style(corpus::Style style) {
  const std::string name(corpus::to_string(style));
  disentangler_ = disent::Disentangler::load(checkpoint(config_, "disentangler_" + name), vocab_.size());
  rewriter_ = nn::load_checkpoint(checkpoint(config_, "rewriter_" + name), vocab_.size());
  style_ = style;
}

void ChatSession::set_knowledge(std::string text) { knowledge_ = std::move(text); }

ChatTurn ChatSession::respond(const std::string& utterance) {
  history_.push_back(utterance);
  while (history_.size() > kHistoryTurns) history_.erase(history_.begin());

  std::vector<std::string> knowledge;
  if (!knowledge_.empty()) knowledge.push_back(knowledge_);
  const auto know = join_sep(vocab_, knowledge);
  const auto ctx = join_sep(vocab_, history_);
  std::vector<int> source = know;
  source.push_back(kCtx);
  source.insert(source.end(), ctx.begin(), ctx.end());
  const int max_len = generator_.config().max_len;
  if (source.size() > static_cast<std::size_t>(max_len)) source.erase(source.begin(), source.end() - max_len);

  auto response = nn::beam_decode(generator_, source, config_.beam, max_len).tokens;
  if (response.size() > static_cast<std::size_t>(disentangler_.config().max_len)) {
    response.resize(static_cast<std::size_t>(disentangler_.config().max_len));
  }
  const auto scores = disentangler_.score(response, ctx, know, true);
  const auto templ = disent::extract_template(response, scores.scores, config_.replace_rate);
  const auto styled = rewriter::rewrite(rewriter_, templ.tokens, config_.beam, style_);

  ChatTurn turn{corpus::detokenize(vocab_.decode(response)), corpus::detokenize(vocab_.decode(templ.tokens)),
                corpus::detokenize(vocab_.decode(styled.tokens))};
  history_.push_back(turn.styled_response);
  while (history_.size() > kHistoryTurns) history_.erase(history_.begin());
  return turn;
}

void run_chat(ChatSession& session, std::istream& in, std::ostream& out) {
  out << "style: " << corpus::to_string(session.style()) << " (commands: /knowledge <text>, /style <name>, /reset, /quit)\n";
  std::string line;
  while (out << "> " << std::flush, std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "/quit") break;
    if (line == "/reset") {
      session.reset_context();
      out << "context cleared\n";
      continue;
    }
    if (line.rfind("/knowledge", 0) == 0) {
      const auto pos = line.find_first_not_of(' ', 10);
      session.set_knowledge(pos == std::string::npos ? "" : line.substr(pos));
      out << "knowledge set\n";
      continue;
    }
    if (line.rfind("/style", 0) == 0) {
      const auto pos = line.find_first_not_of(' ', 6);
      const auto style = corpus::parse_style(pos == std::string::npos ? "" : line.substr(pos));
      if (!style) {
        out << "unknown style; choose positive, negative or polite\n";
        continue;
      }
      try {
        session.set_style(*style);
        out << "style: " << corpus::to_string(*style) << "\n";
      } catch (const std::exception& e) {
        out << "cannot switch style: " << e.what() << "\n";
      }
      continue;
    }
    if (line[0] == '/') {
      out << "unknown command " << line << "\n";
      continue;
    }
    const auto turn = session.respond(line);
    out << "  generator: " << turn.generator_response << "\n"
        << "  template:  " << turn.templ << "\n"
        << "  styled:    " << turn.styled_response << "\n";
  }
  out << "\n";
}

}  // namespace dtr::chat
