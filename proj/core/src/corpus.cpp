#include "dtr/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

#include "dtr/metrics.hpp"

namespace dtr::corpus {
namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

// Bracketed control tags recognised by the tokenizer, matched case-insensitively.
std::optional<std::string_view> match_tag(std::string_view text, std::size_t pos) {
  static constexpr std::array<std::string_view, 4> kTags = {"[*]", "[MASK]", "[SEP]", "[CTX]"};
  for (auto tag : kTags) {
    if (text.size() - pos < tag.size()) continue;
    bool same = true;
    for (std::size_t k = 0; k < tag.size() && same; ++k) {
      same = std::toupper(static_cast<unsigned char>(text[pos + k])) == tag[k];
    }
    if (same) return tag;
  }
  return std::nullopt;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  return in;
}

std::vector<std::string> string_list(const nlohmann::json& obj, const char* field) {
  if (!obj.contains(field)) throw std::invalid_argument(std::string("missing field '") + field + "'");
  const auto& v = obj.at(field);
  if (!v.is_array()) throw std::invalid_argument(std::string("field '") + field + "' must be a list of strings");
  std::vector<std::string> out;
  for (const auto& item : v) {
    if (!item.is_string()) throw std::invalid_argument(std::string("field '") + field + "' must be a list of strings");
    out.push_back(item.get<std::string>());
  }
  if (out.empty()) throw std::invalid_argument(std::string("field '") + field + "' is empty");
  return out;
}

std::string string_field(const nlohmann::json& obj, const char* field) {
  if (!obj.contains(field)) throw std::invalid_argument(std::string("missing field '") + field + "'");
  const auto& v = obj.at(field);
  if (!v.is_string()) throw std::invalid_argument(std::string("field '") + field + "' must be a string");
  return v.get<std::string>();
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

template <typename T, typename Parse>
LoadResult<T> load_jsonl(const std::filesystem::path& path, Parse parse) {
  auto in = open_or_throw(path);
  LoadResult<T> result;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (blank(line)) continue;
    ++result.lines;
    try {
      auto obj = nlohmann::json::parse(line);
      if (!obj.is_object()) throw std::invalid_argument("record is not a JSON object");
      result.records.push_back(parse(obj));
    } catch (const nlohmann::json::parse_error& e) {
      result.errors.push_back({number, std::string("invalid JSON: ") + e.what()});
    } catch (const std::invalid_argument& e) {
      result.errors.push_back({number, e.what()});
    }
  }
  return result;
}

}  // namespace

std::string_view to_string(Style s) {
  switch (s) {
    case Style::kPositive:
      return "positive";
    case Style::kNegative:
      return "negative";
    case Style::kPolite:
      return "polite";
  }
  return "unknown";
}

std::optional<Style> parse_style(std::string_view label) {
  for (Style s : kAllStyles) {
    if (to_string(s) == label) return s;
  }
  return std::nullopt;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
      ++i;
    } else if (is_word_byte(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
      ++i;
    } else if (auto tag = (c == '[') ? match_tag(text, i) : std::nullopt) {
      flush();
      tokens.emplace_back(*tag);
      i += tag->size();
    } else {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  flush();
  return tokens;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (auto tok : kSpecialTokens) add(std::string(tok));
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = size();
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    if (row < kNumSpecial) {
      if (line != kSpecialTokens[static_cast<std::size_t>(row)]) {
        throw std::runtime_error("vocabulary " + path.string() + ": expected special token " +
                                 std::string(kSpecialTokens[static_cast<std::size_t>(row)]) + " on line " +
                                 std::to_string(row + 1));
      }
    } else if (v.add(line) != row) {
      throw std::runtime_error("vocabulary " + path.string() + ": duplicate token '" + line + "'");
    }
    ++row;
  }
  if (row < kNumSpecial) throw std::runtime_error("vocabulary " + path.string() + " is truncated");
  return v;
}

Vocabulary build_vocab(std::span<const std::vector<std::string>> streams, int min_count) {
  if (min_count < 1) throw std::invalid_argument("build_vocab: min_count must be >= 1");
  std::map<std::string, long> counts;
  for (const auto& stream : streams) {
    for (const auto& t : stream) ++counts[t];
  }
  std::vector<std::pair<std::string, long>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, n] : kept) v.add(tok);
  return v;
}

LoadResult<DialogueExample> load_kdg_corpus(const std::filesystem::path& path) {
  return load_jsonl<DialogueExample>(path, [](const nlohmann::json& obj) {
    DialogueExample ex;
    ex.id = string_field(obj, "id");
    ex.knowledge = string_list(obj, "knowledge");
    ex.context = string_list(obj, "context");
    ex.response = string_field(obj, "response");
    if (tokenize(ex.response).empty()) throw std::invalid_argument("field 'response' has no tokens");
    return ex;
  });
}

LoadResult<StyleSentence> load_style_corpus(const std::filesystem::path& path) {
  return load_jsonl<StyleSentence>(path, [](const nlohmann::json& obj) {
    StyleSentence s;
    s.id = string_field(obj, "id");
    s.text = string_field(obj, "text");
    const auto label = string_field(obj, "style");
    auto style = parse_style(label);
    if (!style) throw std::invalid_argument("unknown style label '" + label + "'");
    s.style = *style;
    if (tokenize(s.text).empty()) throw std::invalid_argument("field 'text' has no tokens");
    return s;
  });
}

void write_kdg_corpus(const std::filesystem::path& path, std::span<const DialogueExample> examples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::ordered_json j{{"id", ex.id}, {"knowledge", ex.knowledge}, {"context", ex.context}, {"response", ex.response}};
    out << j.dump() << '\n';
  }
}

void write_style_corpus(const std::filesystem::path& path, std::span<const StyleSentence> sentences) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : sentences) {
    nlohmann::ordered_json j{{"id", s.id}, {"text", s.text}, {"style", std::string(to_string(s.style))}};
    out << j.dump() << '\n';
  }
}

const std::string& select_knowledge_top1(std::span<const std::string> candidates, std::string_view response) {
  if (candidates.empty()) throw std::invalid_argument("select_knowledge_top1: no candidates");
  const auto ref = tokenize(response);
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double s = metrics::bleu_n(tokenize(candidates[i]), ref, 1);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return candidates[best];
}

std::pair<std::vector<StyleSentence>, std::vector<StyleSentence>> split_style_corpus(
    std::span<const StyleSentence> sentences, std::uint64_t seed) {
  if (sentences.size() < 2) throw std::invalid_argument("split_style_corpus: need at least 2 sentences");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::pair<std::vector<StyleSentence>, std::vector<StyleSentence>> halves;
  for (const auto& s : sentences) (coin(rng) ? halves.first : halves.second).push_back(s);
  return halves;
}

CorpusSplit split_corpus(std::span<const std::string> ids, double valid_fraction, double test_fraction,
                         std::uint64_t seed) {
  if (valid_fraction < 0.0 || test_fraction < 0.0 || valid_fraction + test_fraction >= 1.0) {
    throw std::invalid_argument("split_corpus: fractions must be non-negative and sum below 1");
  }
  std::vector<std::string> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = order.size();
  const auto n_valid = static_cast<std::size_t>(static_cast<double>(n) * valid_fraction);
  const auto n_test = static_cast<std::size_t>(static_cast<double>(n) * test_fraction);
  CorpusSplit split;
  split.valid.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_valid));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_valid),
                    order.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test), order.end());
  return split;
}

}  // namespace dtr::corpus
