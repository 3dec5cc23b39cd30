#include "dtr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dtr::metrics {
namespace {

std::string ngram_key(std::span<const std::string> tokens, std::size_t start, int n) {
  std::string key;
  for (int k = 0; k < n; ++k) {
    if (k) key.push_back('\x1f');
    key += tokens[start + static_cast<std::size_t>(k)];
  }
  return key;
}

std::map<std::string, int> ngram_counts(std::span<const std::string> tokens, int n) {
  std::map<std::string, int> counts;
  if (tokens.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) ++counts[ngram_key(tokens, i, n)];
  return counts;
}

int clipped_matches(const std::map<std::string, int>& hyp, const std::map<std::string, int>& ref) {
  int matches = 0;
  for (const auto& [gram, c] : hyp) {
    auto it = ref.find(gram);
    if (it != ref.end()) matches += std::min(c, it->second);
  }
  return matches;
}

double harmonic(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double unigram_f1(std::span<const std::string> hyp, std::span<const std::string> ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const int overlap = clipped_matches(ngram_counts(hyp, 1), ngram_counts(ref, 1));
  return harmonic(static_cast<double>(overlap) / static_cast<double>(hyp.size()),
                  static_cast<double>(overlap) / static_cast<double>(ref.size()));
}

double bleu_n(std::span<const std::string> hyp, std::span<const std::string> ref, int n) {
  if (n < 1 || n > 2) throw std::invalid_argument("bleu_n: n must be 1 or 2");
  if (hyp.size() < static_cast<std::size_t>(n)) return 0.0;
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    const int matches = clipped_matches(ngram_counts(hyp, k), ngram_counts(ref, k));
    const double total = static_cast<double>(hyp.size() - static_cast<std::size_t>(k) + 1);
    double p = static_cast<double>(matches) / total;
    if (matches == 0) {
      if (k == 1) return 0.0;
      p = 1.0 / (total + 1.0);
    }
    log_sum += std::log(p);
  }
  const double bp = hyp.size() < ref.size()
                        ? std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size()))
                        : 1.0;
  return bp * std::exp(log_sum / n);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const auto l = static_cast<double>(lcs_length(hyp, ref));
  return harmonic(l / static_cast<double>(hyp.size()), l / static_cast<double>(ref.size()));
}

double distinct_n(std::span<const Tokens> corpus, int n) {
  std::set<std::string> unique;
  std::size_t total = 0;
  for (const auto& hyp : corpus) {
    if (hyp.size() < static_cast<std::size_t>(n)) continue;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= hyp.size(); ++i) {
      unique.insert(ngram_key(hyp, i, n));
      ++total;
    }
  }
  return total ? static_cast<double>(unique.size()) / static_cast<double>(total) : 0.0;
}

double inner_distinct_n(std::span<const std::vector<Tokens>> groups, int n, std::span<const std::string> ids) {
  std::vector<double> per_group;
  per_group.reserve(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].size() != 3) {
      const std::string id = g < ids.size() ? ids[g] : "#" + std::to_string(g);
      throw std::invalid_argument("inner_distinct_n: group '" + id + "' has " + std::to_string(groups[g].size()) +
                                  " responses, expected 3");
    }
    per_group.push_back(distinct_n(groups[g], n));
  }
  return mean(per_group);
}

double average_length(std::span<const Tokens> corpus) {
  if (corpus.empty()) return 0.0;
  double total = 0.0;
  for (const auto& h : corpus) total += static_cast<double>(h.size());
  return total / static_cast<double>(corpus.size());
}

EvalReport score_corpus(std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("score_corpus: hypothesis/reference count mismatch");
  EvalReport r;
  r.n_examples = hyps.size();
  std::vector<double> f1, b1, b2, rl;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    f1.push_back(unigram_f1(hyps[i], refs[i]));
    b1.push_back(bleu_n(hyps[i], refs[i], 1));
    b2.push_back(bleu_n(hyps[i], refs[i], 2));
    rl.push_back(rouge_l(hyps[i], refs[i]));
  }
  r.f1 = mean(f1);
  r.bleu1 = mean(b1);
  r.bleu2 = mean(b2);
  r.rouge_l = mean(rl);
  r.distinct1 = distinct_n(hyps, 1);
  r.distinct2 = distinct_n(hyps, 2);
  r.average_length = average_length(hyps);
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"style", r.style},
                     {"n_examples", r.n_examples},
                     {"style_intensity", r.style_intensity},
                     {"f1", r.f1},
                     {"bleu1", r.bleu1},
                     {"bleu2", r.bleu2},
                     {"rouge_l", r.rouge_l},
                     {"distinct1", r.distinct1},
                     {"distinct2", r.distinct2},
                     {"inner_distinct1", r.inner_distinct1 ? nlohmann::json(*r.inner_distinct1) : nlohmann::json()},
                     {"inner_distinct2", r.inner_distinct2 ? nlohmann::json(*r.inner_distinct2) : nlohmann::json()},
                     {"average_length", r.average_length},
                     {"generator_f1", r.generator_f1},
                     {"f1_drop", r.f1_drop},
                     {"f1_relative_drop", r.f1_relative_drop},
                     {"generator_style_intensity", r.generator_style_intensity}};
}

std::string format_table(std::span<const EvalReport> reports) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "Style" << std::right;
  for (const char* h : {"Intensity", "F1", "B-1", "B-2", "R", "D-1", "D-2", "iD-1", "iD-2", "AvgLen", "F1-drop"}) {
    os << std::setw(10) << h;
  }
  os << "\n" << std::fixed << std::setprecision(3);
  for (const auto& r : reports) {
    os << std::left << std::setw(10) << r.style << std::right << std::setw(10) << r.style_intensity << std::setw(10)
       << r.f1 << std::setw(10) << r.bleu1 << std::setw(10) << r.bleu2 << std::setw(10) << r.rouge_l << std::setw(10)
       << r.distinct1 << std::setw(10) << r.distinct2;
    for (const auto& v : {r.inner_distinct1, r.inner_distinct2}) {
      if (v) {
        os << std::setw(10) << *v;
      } else {
        os << std::setw(10) << "-";
      }
    }
    os << std::setw(10) << std::setprecision(2) << r.average_length << std::setprecision(3) << std::setw(10)
       << r.f1_drop << "\n";
  }
  return os.str();
}

}  // namespace dtr::metrics
