#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dtr/special_tokens.hpp"

namespace dtr::corpus {

enum class Style { kPositive, kNegative, kPolite };

inline constexpr std::array<Style, 3> kAllStyles = {Style::kPositive, Style::kNegative, Style::kPolite};

std::string_view to_string(Style s);
std::optional<Style> parse_style(std::string_view label);

/// One (knowledge, context, response) record of the dialogue corpus.
struct DialogueExample {
  std::string id;
  std::vector<std::string> knowledge;
  std::vector<std::string> context;
  std::string response;
};

struct StyleSentence {
  std::string id;
  std::string text;
  Style style = Style::kPositive;
};

/// Lowercased word/punctuation tokens. Control tags such as "[*]" survive as
/// single tokens.
std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(std::span<const std::string> tokens);

class Vocabulary {
 public:
  /// Specials only, at ids 0..7.
  Vocabulary();

  int add(const std::string& token);
  /// UNK for unknown tokens.
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const int> ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Tokens with frequency >= min_count, ordered by (descending count, token).
Vocabulary build_vocab(std::span<const std::vector<std::string>> streams, int min_count);

struct LoadError {
  std::size_t line = 0;
  std::string message;
};

template <typename T>
struct LoadResult {
  std::vector<T> records;
  std::vector<LoadError> errors;
  std::size_t lines = 0;  // non-blank lines seen
};

/// JSONL with fields id, knowledge[], context[], response. Throws
/// std::runtime_error when the file cannot be opened; bad lines are collected
/// in `errors` with their line numbers.
LoadResult<DialogueExample> load_kdg_corpus(const std::filesystem::path& path);
/// JSONL with fields id, text, style.
LoadResult<StyleSentence> load_style_corpus(const std::filesystem::path& path);

void write_kdg_corpus(const std::filesystem::path& path, std::span<const DialogueExample> examples);
void write_style_corpus(const std::filesystem::path& path, std::span<const StyleSentence> sentences);

/// Candidate with the highest BLEU-1 against `response`; ties keep the lowest index.
const std::string& select_knowledge_top1(std::span<const std::string> candidates, std::string_view response);

/// Each sentence lands in the first half with probability 0.5 (seeded).
std::pair<std::vector<StyleSentence>, std::vector<StyleSentence>> split_style_corpus(
    std::span<const StyleSentence> sentences, std::uint64_t seed);

struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> valid;
  std::vector<std::string> test;
};

CorpusSplit split_corpus(std::span<const std::string> ids, double valid_fraction, double test_fraction,
                         std::uint64_t seed);

}  // namespace dtr::corpus
