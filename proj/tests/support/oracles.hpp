#pragma once

// Brute-force reference implementations used as test oracles. They favour
// obviousness over speed and share no code with the library.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace oracle {

using Seq = std::vector<std::string>;

inline std::vector<Seq> ngrams(const Seq& s, std::size_t n) {
  std::vector<Seq> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out.emplace_back(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n));
  return out;
}

// Greedy one-to-one matching of equal items; equals the clipped count.
inline std::size_t matched(const std::vector<Seq>& hyp, const std::vector<Seq>& ref) {
  std::vector<bool> used(ref.size(), false);
  std::size_t m = 0;
  for (const auto& h : hyp) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == h) {
        used[j] = true;
        ++m;
        break;
      }
    }
  }
  return m;
}

inline double f1(const Seq& hyp, const Seq& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const double m = static_cast<double>(matched(ngrams(hyp, 1), ngrams(ref, 1)));
  if (m == 0.0) return 0.0;
  const double p = m / static_cast<double>(hyp.size());
  const double r = m / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

// Sentence BLEU with add-one smoothing of zero higher-order counts.
inline double bleu(const Seq& hyp, const Seq& ref, std::size_t n) {
  if (hyp.size() < n) return 0.0;
  double product = 1.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const double total = static_cast<double>(hyp.size() - k + 1);
    const double m = static_cast<double>(matched(ngrams(hyp, k), ngrams(ref, k)));
    if (m == 0.0 && k == 1) return 0.0;
    product *= m == 0.0 ? 1.0 / (total + 1.0) : m / total;
  }
  const double bp = hyp.size() < ref.size() ? std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size())) : 1.0;
  return bp * std::pow(product, 1.0 / static_cast<double>(n));
}

inline bool is_subsequence(const Seq& sub, const Seq& s) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < s.size() && j < sub.size(); ++i) {
    if (s[i] == sub[j]) ++j;
  }
  return j == sub.size();
}

// Longest common subsequence by enumerating every subsequence of `a`.
inline std::size_t lcs(const Seq& a, const Seq& b) {
  std::size_t best = 0;
  for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
    Seq sub;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (mask & (1u << i)) sub.push_back(a[i]);
    }
    if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
  }
  return best;
}

inline double rouge_l(const Seq& hyp, const Seq& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const double l = static_cast<double>(lcs(hyp, ref));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(hyp.size());
  const double r = l / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

inline double distinct(const std::vector<Seq>& corpus, std::size_t n) {
  std::vector<Seq> all;
  for (const auto& s : corpus) {
    for (auto& g : ngrams(s, n)) all.push_back(std::move(g));
  }
  if (all.empty()) return 0.0;
  std::size_t unique = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    bool seen = false;
    for (std::size_t j = 0; j < i && !seen; ++j) seen = all[j] == all[i];
    if (!seen) ++unique;
  }
  return static_cast<double>(unique) / static_cast<double>(all.size());
}

inline double inner_distinct(const std::vector<std::vector<Seq>>& groups, std::size_t n) {
  if (groups.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& g : groups) sum += distinct(g, n);
  return sum / static_cast<double>(groups.size());
}

// Every sequence of length <= max_len over `alphabet`, shortest first.
inline std::vector<Seq> all_sequences(const Seq& alphabet, std::size_t max_len) {
  std::vector<Seq> out{{}};
  std::vector<Seq> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<Seq> next;
    for (const auto& s : frontier) {
      for (const auto& a : alphabet) {
        Seq t = s;
        t.push_back(a);
        next.push_back(std::move(t));
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace oracle
