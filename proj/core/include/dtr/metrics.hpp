#pragma once

// Automatic response metrics: relevance (unigram F1, BLEU-1/2, ROUGE-L),
// diversity (Distinct-n, inner Distinct-n across styles) and length.
// All functions take whitespace-free token sequences.

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtr::metrics {

using Tokens = std::vector<std::string>;

/// Clipped unigram-overlap F1. Empty hypothesis scores 0.
double unigram_f1(std::span<const std::string> hyp, std::span<const std::string> ref);

/// Sentence BLEU-n (n in {1,2}): geometric mean of clipped 1..n-gram
/// precisions times the brevity penalty. A zero higher-order match count is
/// add-one smoothed; a hypothesis shorter than n scores 0.
double bleu_n(std::span<const std::string> hyp, std::span<const std::string> ref, int n);

/// ROUGE-L F1 (beta = 1) from the longest common subsequence.
double rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Unique n-grams over total n-grams across the whole corpus; 0 when empty.
double distinct_n(std::span<const Tokens> corpus, int n);

/// Mean over groups of distinct_n computed on each group's three pooled
/// responses. Throws std::invalid_argument naming the id of a group whose
/// size is not 3.
double inner_distinct_n(std::span<const std::vector<Tokens>> groups, int n, std::span<const std::string> ids = {});

double average_length(std::span<const Tokens> corpus);

/// Corpus-level metric set for one style (Table-1 column order).
struct EvalReport {
  std::string style;
  std::size_t n_examples = 0;
  double style_intensity = 0.0;
  double f1 = 0.0;
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double rouge_l = 0.0;
  double distinct1 = 0.0;
  double distinct2 = 0.0;
  std::optional<double> inner_distinct1;
  std::optional<double> inner_distinct2;
  double average_length = 0.0;
  // knowledge-retention drop: generator F1 minus styled F1
  double generator_f1 = 0.0;
  double f1_drop = 0.0;
  double f1_relative_drop = 0.0;
  double generator_style_intensity = 0.0;
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Relevance and diversity metrics of `hyps` against `refs` (same length).
EvalReport score_corpus(std::span<const Tokens> hyps, std::span<const Tokens> refs);

/// Fixed-width table mirroring the Table-1 column order.
std::string format_table(std::span<const EvalReport> reports);

}  // namespace dtr::metrics
