#pragma once

// Deterministic toy corpora. Dialogue responses copy one knowledge sentence
// verbatim plus a filler word; style sentences are a content core plus one
// marker word from a per-style marker set.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dtr/corpus.hpp"

namespace dtr::synthetic {

std::span<const std::string_view> content_words();
std::span<const std::string_view> filler_words();
std::span<const std::string_view> style_markers(corpus::Style style);

/// Token positions of the planted words in the tokenized text. For style
/// sentences these are the markers, for dialogues the filler.
struct GoldAnnotation {
  std::string id;
  std::string kind;  // "style" or "dialogue"
  std::vector<int> positions;
};

struct SyntheticCorpus {
  std::vector<corpus::DialogueExample> dialogues;
  std::map<corpus::Style, std::vector<corpus::StyleSentence>> styles;
  std::vector<GoldAnnotation> gold;
};

SyntheticCorpus synth_corpus(std::uint64_t seed, std::size_t n_dialogues, std::size_t n_style);

/// Writes dialogues.jsonl, style_<name>.jsonl per style and gold.jsonl.
void write_synthetic(const std::filesystem::path& dir, const SyntheticCorpus& corpus);

std::map<std::string, GoldAnnotation> load_gold(const std::filesystem::path& path);

}  // namespace dtr::synthetic
