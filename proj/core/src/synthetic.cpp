#include "dtr/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

namespace dtr::synthetic {
namespace {

using corpus::Style;
using Rng = std::mt19937_64;

constexpr std::array<std::string_view, 48> kContent = {
    "pizza",  "cheese", "butter",  "bread",    "soup",   "salad",   "coffee",  "tea",    "river",    "mountain",
    "forest", "ocean",  "guitar",  "violin",   "piano",  "drums",   "movie",   "novel",  "poem",     "song",
    "camera", "phone",  "laptop",  "garden",   "museum", "library", "castle",  "bridge", "train",    "bicycle",
    "football", "tennis", "chess", "archery", "sandwich", "mustard", "pasta", "rice",  "lemon",    "apple",
    "tiger",  "eagle",  "dolphin", "rabbit",   "winter", "summer",  "city",    "village"};

constexpr std::array<std::string_view, 4> kFillers = {"well", "yeah", "so", "okay"};
constexpr std::array<std::string_view, 4> kPositive = {"wonderful", "delightful", "lovely", "great"};
constexpr std::array<std::string_view, 4> kNegative = {"awful", "terrible", "dreadful", "horrible"};
constexpr std::array<std::string_view, 4> kPolite = {"please", "kindly", "thanks", "sorry"};
// skewed so that the most common marker is easy to reconstruct from context
constexpr std::array<double, 4> kMarkerWeights = {0.4, 0.25, 0.2, 0.15};

constexpr std::array<std::string_view, 3> kQuestions = {"do you know about", "tell me about", "what do you think of"};

std::size_t pick(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

bool coin(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

std::vector<std::string> content_core(Rng& rng, std::size_t lo, std::size_t hi) {
  std::vector<std::string_view> pool(kContent.begin(), kContent.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  const std::size_t n = lo + pick(rng, hi - lo + 1);
  return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::string join(const std::vector<std::string>& words) { return corpus::detokenize(words); }

std::string padded_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i + 1);
  return buf;
}

}  // namespace

std::span<const std::string_view> content_words() { return kContent; }
std::span<const std::string_view> filler_words() { return kFillers; }

std::span<const std::string_view> style_markers(Style style) {
  switch (style) {
    case Style::kPositive:
      return kPositive;
    case Style::kNegative:
      return kNegative;
    case Style::kPolite:
      return kPolite;
  }
  return {};
}

SyntheticCorpus synth_corpus(std::uint64_t seed, std::size_t n_dialogues, std::size_t n_style) {
  if (n_dialogues < 1 || n_style < 1) throw std::invalid_argument("synth_corpus: sizes must be >= 1");
  Rng rng(seed);
  SyntheticCorpus out;

  for (std::size_t i = 0; i < n_dialogues; ++i) {
    corpus::DialogueExample ex;
    ex.id = padded_id("syn-d", i);
    std::array<std::vector<std::string>, 2> knowledge = {content_core(rng, 5, 6), content_core(rng, 5, 6)};
    const std::size_t gold = pick(rng, 2);
    for (const auto& k : knowledge) ex.knowledge.push_back(join(k));

    if (coin(rng, 0.3)) ex.context.emplace_back("hello there");
    const auto& topic = knowledge[gold][pick(rng, knowledge[gold].size())];
    ex.context.push_back(std::string(kQuestions[pick(rng, kQuestions.size())]) + " " + topic);

    std::vector<std::string> response = knowledge[gold];
    const std::string filler(kFillers[pick(rng, kFillers.size())]);
    int filler_pos = 0;
    if (coin(rng, 0.6)) {
      response.insert(response.begin(), filler);
    } else {
      filler_pos = static_cast<int>(response.size());
      response.push_back(filler);
    }
    ex.response = join(response);
    out.gold.push_back({ex.id, "dialogue", {filler_pos}});
    out.dialogues.push_back(std::move(ex));
  }

  std::discrete_distribution<std::size_t> marker_dist(kMarkerWeights.begin(), kMarkerWeights.end());
  for (Style style : corpus::kAllStyles) {
    const auto markers = style_markers(style);
    auto& sentences = out.styles[style];
    const std::string prefix = "syn-" + std::string(corpus::to_string(style)).substr(0, 3) + "-";
    for (std::size_t i = 0; i < n_style; ++i) {
      auto words = content_core(rng, 4, 6);
      const std::string marker(markers[marker_dist(rng)]);
      int pos = 0;
      if (coin(rng, 0.6)) {
        words.insert(words.begin(), marker);
      } else {
        pos = static_cast<int>(words.size());
        words.push_back(marker);
      }
      corpus::StyleSentence s{padded_id(prefix.c_str(), i), join(words), style};
      out.gold.push_back({s.id, "style", {pos}});
      sentences.push_back(std::move(s));
    }
  }
  return out;
}

void write_synthetic(const std::filesystem::path& dir, const SyntheticCorpus& corpus) {
  std::filesystem::create_directories(dir);
  corpus::write_kdg_corpus(dir / "dialogues.jsonl", corpus.dialogues);
  for (const auto& [style, sentences] : corpus.styles) {
    corpus::write_style_corpus(dir / ("style_" + std::string(corpus::to_string(style)) + ".jsonl"), sentences);
  }
  std::ofstream out(dir / "gold.jsonl", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "gold.jsonl").string());
  for (const auto& g : corpus.gold) {
    nlohmann::ordered_json j{{"id", g.id}, {"kind", g.kind}, {"positions", g.positions}};
    out << j.dump() << '\n';
  }
}

std::map<std::string, GoldAnnotation> load_gold(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open gold annotations " + path.string());
  std::map<std::string, GoldAnnotation> gold;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    GoldAnnotation g{j.at("id").get<std::string>(), j.at("kind").get<std::string>(),
                     j.at("positions").get<std::vector<int>>()};
    gold.emplace(g.id, std::move(g));
  }
  return gold;
}

}  // namespace dtr::synthetic
