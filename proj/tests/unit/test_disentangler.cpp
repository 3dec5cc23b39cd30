#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dtr/corpus.hpp"
#include "dtr/disentangler.hpp"
#include "dtr/embedding.hpp"
#include "dtr/special_tokens.hpp"
#include "helpers.hpp"

using namespace dtr;
using namespace dtr::disent;

namespace {

nn::ModelConfig tiny_config(int vocab) {
  nn::ModelConfig c;
  c.layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.dropout = 0.0;
  c.max_len = 16;
  c.vocab_size = vocab;
  return c;
}

std::vector<int> replaced_positions(std::span<const Action> a) {
  std::vector<int> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == Action::kReplace) out.push_back(static_cast<int>(i));
  }
  return out;
}

}  // namespace

TEST_CASE("replace_count floors with a minimum of one") {
  CHECK(replace_count(11, 25) == 2);
  CHECK(replace_count(4, 25) == 1);
  CHECK(replace_count(3, 25) == 1);
  CHECK(replace_count(8, 25) == 2);
  CHECK(replace_count(5, 99) == 4);
}

TEST_CASE("template from the grilled cheese response") {
  const auto words = corpus::tokenize("yeah , i like the grilled cheese sandwich with butter .");
  REQUIRE(words.size() == 11);
  corpus::Vocabulary v;
  for (const auto& w : words) v.add(w);
  const auto ids = v.encode(words);
  std::vector<double> scores(11, 0.1);
  scores[0] = 0.9;
  scores[3] = 0.8;
  const Template t = extract_template(ids, scores, 25);
  CHECK(corpus::detokenize(v.decode(t.tokens)) == "[*] , i [*] the grilled cheese sandwich with butter .");
}

TEST_CASE("threshold examples") {
  const std::vector<double> equal(4, 0.5);
  CHECK(replaced_positions(threshold_actions(equal, 25)) == std::vector<int>{0});
  const std::vector<double> s{0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.6, 0.4};
  CHECK(replaced_positions(threshold_actions(s, 25)) == std::vector<int>{1, 3});
  const std::vector<int> toks{10, 11, 12, 13, 14, 15, 16, 17};
  const Template t = extract_template(toks, s, 25);
  CHECK(std::count(t.tokens.begin(), t.tokens.end(), kStar) == 2);
}

TEST_CASE("adjacent replaced tokens collapse into one tag") {
  const std::vector<int> toks{10, 11, 12, 13};
  const std::vector<Action> a{Action::kReplace, Action::kReplace, Action::kRetain, Action::kReplace};
  CHECK(apply_actions(toks, a).tokens == std::vector<int>{kStar, 12, kStar});
}

TEST_CASE("template properties over random scores") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::uniform_int_distribution<int> len(1, 14);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto m = static_cast<std::size_t>(len(rng));
    std::vector<int> toks(m);
    std::iota(toks.begin(), toks.end(), 20);
    std::vector<double> s(m);
    for (double& x : s) x = u(rng);
    std::vector<int> previous;
    for (double rate : {10.0, 25.0, 40.0, 60.0, 80.0}) {
      const auto actions = threshold_actions(s, rate);
      const auto replaced = replaced_positions(actions);
      CHECK(static_cast<int>(replaced.size()) == replace_count(m, rate));
      CHECK(std::includes(replaced.begin(), replaced.end(), previous.begin(), previous.end()));
      previous = replaced;

      const Template t = extract_template(toks, s, rate);
      std::vector<int> kept;
      for (int tok : t.tokens) {
        if (tok != kStar) kept.push_back(tok);
      }
      CHECK(std::includes(toks.begin(), toks.end(), kept.begin(), kept.end()));
      CHECK(kept.size() == m - replaced.size());
      if (m >= 2 && rate == 25.0) CHECK_FALSE(kept.empty());
      for (std::size_t i = 1; i < t.tokens.size(); ++i) CHECK_FALSE((t.tokens[i] == kStar && t.tokens[i - 1] == kStar));
    }
  }
}

TEST_CASE("mask_count and mask_tokens") {
  CHECK(mask_count(7) == 1);
  CHECK(mask_count(20) == 3);
  CHECK(mask_count(1) == 1);
  nn::Rng rng(1);
  const std::vector<int> t(20, 9);
  const auto masked = mask_tokens(t, rng);
  CHECK(std::count(masked.begin(), masked.end(), kMask) == 3);
}

TEST_CASE("ranking triples") {
  DistanceSequence equal{"e", {8, 9, 10}, {0.3, 0.3, 0.3}, {}};
  DistanceSequence three{"t", {8, 9, 10}, {0.1, 0.5, 0.9}, {}};
  DistanceSequence many{"m", {}, {}, {}};
  for (int i = 0; i < 8; ++i) {
    many.tokens.push_back(8 + i);
    many.distances.push_back(0.1 * i);
  }
  const std::vector<DistanceSequence> one_equal{equal};
  CHECK(build_ranking_triples(one_equal, 10, 1).empty());
  const std::vector<DistanceSequence> one_three{three};
  const auto t3 = build_ranking_triples(one_three, 10, 1);
  REQUIRE(t3.size() == 3);
  for (const auto& t : t3) CHECK(t.y == (three.distances[t.i] < three.distances[t.j] ? 1 : -1));

  const std::vector<DistanceSequence> all{equal, three, many};
  const auto a = build_ranking_triples(all, 10, 5);
  const auto b = build_ranking_triples(all, 10, 5);
  REQUIRE(a.size() == 13);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].sentence == b[k].sentence);
    CHECK(a[k].i == b[k].i);
    CHECK(a[k].j == b[k].j);
  }
}

TEST_CASE("ranking loss") {
  CHECK(ranking_loss(0.8, 0.3, 1, 0.2) == doctest::Approx(0.0));
  CHECK(ranking_loss(0.4, 0.5, 1, 0.2) == doctest::Approx(0.3));
  CHECK(ranking_loss(0.6, 0.6, 1, 0.2) == doctest::Approx(0.2));
  CHECK(ranking_loss(0.6, 0.6, -1, 0.2) == doctest::Approx(0.2));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int k = 0; k < 1000; ++k) {
    const double a = u(rng), b = u(rng);
    CHECK(ranking_loss(a, b, 1, 0.2) == ranking_loss(b, a, -1, 0.2));
  }
}

TEST_CASE("scores of a fresh disentangler") {
  Disentangler d(tiny_config(20), 3);
  const std::vector<int> r{8, 9, 10, 11}, u{12}, k{13, 14};
  const TokenScores alpha = d.score(r, u, k, false);
  CHECK(alpha.scores == alpha.alpha);
  CHECK(alpha.beta.empty());
  const TokenScores both = d.score(r, u, k, true);
  REQUIRE(both.beta.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(both.beta[i] == doctest::Approx(0.5));
    CHECK(both.scores[i] == doctest::Approx(both.alpha[i] + 0.5));
  }
  d.params().at("alpha.w").value.setZero();
  for (double x : d.score(r, u, k, true).scores) CHECK(x == doctest::Approx(1.0));
  const TokenScores again = d.score(r, u, k, true);
  CHECK(again.scores == d.score(r, u, k, true).scores);
}

TEST_CASE("beta input layout") {
  Disentangler d(tiny_config(20), 3);
  const std::vector<int> r{8, 9}, u{10}, k{11, 12};
  CHECK(d.beta_input(r, u, k) == std::vector<int>{8, 9, kSep, 10, kSep, 11, 12});
  const std::vector<int> long_k(30, 13);
  const auto in = d.beta_input(r, u, long_k);
  CHECK(in.size() == 16);
  CHECK(in[0] == 8);
}

TEST_CASE("freezing touches one side only") {
  Disentangler d(tiny_config(20), 3);
  d.freeze_alpha(true);
  for (const auto& [name, p] : d.params()) CHECK(p.frozen == !d.is_beta_param(name));
  d.freeze_alpha(false);
  d.freeze_beta(true);
  for (const auto& [name, p] : d.params()) CHECK(p.frozen == d.is_beta_param(name));
}

TEST_CASE("disentangler save and load") {
  testing::TempDir dir("dis");
  Disentangler d(tiny_config(20), 4);
  d.save(dir / "d.ckpt");
  const Disentangler back = Disentangler::load(dir / "d.ckpt", 20);
  const std::vector<int> r{8, 9, 10};
  CHECK(back.score(r, {}, {}, true).scores == d.score(r, {}, {}, true).scores);
  CHECK_THROWS(Disentangler::load(dir / "d.ckpt", 21));
}

TEST_CASE("leave-one-out distances stay in range") {
  testing::QuietLogs quiet;
  corpus::Vocabulary v;
  for (const char* w : {"good", "pizza", "the", "was", "great"}) v.add(w);
  nn::Seq2SeqModel dae(tiny_config(v.size()), 2);
  EmbeddingTable table(2, "test");
  table.add("good", nn::RowVector::Map(std::vector<double>{1.0, 0.0}.data(), 2));
  table.add("pizza", nn::RowVector::Map(std::vector<double>{0.0, 1.0}.data(), 2));
  const std::vector<int> sentence{v.id("the"), v.id("pizza"), v.id("was"), v.id("good")};
  const DistanceSequence d = leave_one_out_distances(dae, sentence, v, table);
  REQUIRE(d.distances.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(d.distances[i] >= 0.0);
    CHECK(d.distances[i] <= 2.0);
    CHECK_FALSE(is_special(d.predictions[i]));
    CHECK((d.distances[i] == 0.0) == (d.predictions[i] == sentence[i] ||
                                      (table.contains(v.token(sentence[i])) && table.contains(v.token(d.predictions[i])) &&
                                       cosine(table.vector(v.token(sentence[i])), table.vector(v.token(d.predictions[i]))) == 1.0)));
  }
  const std::vector<int> one{v.id("the")};
  CHECK(leave_one_out_distances(dae, one, v, table).distances.empty());
}
