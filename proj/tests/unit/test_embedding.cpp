#include <doctest.h>

#include <cmath>

#include "dtr/embedding.hpp"
#include "helpers.hpp"

using namespace dtr;

namespace {
nn::RowVector vec(std::initializer_list<double> xs) {
  nn::RowVector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}
}  // namespace

TEST_CASE("word2vec text format loads with and without a header") {
  testing::TempDir dir("emb");
  testing::write_file(dir / "h.txt", "2 3\ncat 1 0 0\ndog 0 1 0\n");
  testing::write_file(dir / "n.txt", "cat 1 0 0\ndog 0 1 0\n");
  for (const char* name : {"h.txt", "n.txt"}) {
    const auto t = EmbeddingTable::load_text(dir / name);
    CHECK(t.size() == 2);
    CHECK(t.dim() == 3);
    CHECK(t.vector("dog")(1) == 1.0);
  }
  testing::write_file(dir / "bad.txt", "cat 1 0 0\ndog 0 1\n");
  CHECK_THROWS(EmbeddingTable::load_text(dir / "bad.txt"));

  const auto t = EmbeddingTable::load_text(dir / "h.txt");
  t.save_text(dir / "out.txt");
  const auto back = EmbeddingTable::load_text(dir / "out.txt");
  CHECK(back.vector("cat") == t.vector("cat"));
}

TEST_CASE("token distance") {
  EmbeddingTable t(2, "test");
  t.add("a", vec({1, 0}));
  t.add("b", vec({0, 1}));
  t.add("c", vec({-1, 0}));
  t.add("d", vec({2, 0}));
  CHECK(token_distance(t, "a", "a") == 0.0);
  CHECK(token_distance(t, "a", "b") == doctest::Approx(1.0));
  CHECK(token_distance(t, "a", "c") == doctest::Approx(2.0));
  CHECK(token_distance(t, "a", "d") == doctest::Approx(0.0));
  CHECK(token_distance(t, "a", "zzz") == 1.0);
  CHECK(token_distance(t, "zzz", "zzz") == 0.0);
  CHECK_THROWS_AS(t.vector("zzz"), std::out_of_range);
}
