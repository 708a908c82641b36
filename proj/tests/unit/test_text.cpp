#include <doctest.h>

#include <cmath>

#include "aloha/common.hpp"
#include "aloha/text.hpp"

using namespace aloha::text;

TEST_CASE("tokenize") {
  CHECK(tokenize("Hello, World!") == std::vector<std::string>{"hello", "world"});
  CHECK(tokenize("  don't  stop ") == std::vector<std::string>{"don", "t", "stop"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("...!?").empty());
  CHECK(tokenize("a b c d", 2) == std::vector<std::string>{"a", "b"});
  CHECK(tokenize("Mixed CASE", static_cast<std::size_t>(-1), false) == std::vector<std::string>{"Mixed", "CASE"});
  CHECK(tokenize("caf\xc3\xa9 au lait") == std::vector<std::string>{"caf\xc3\xa9", "au", "lait"});
}

TEST_CASE("tf-idf on a three-document fixture") {
  TfIdf t({"the cat sat", "the dog sat", "a cat ran"});
  CHECK(t.num_documents() == 3);
  const double common = std::log(4.0 / 3.0) + 1.0;  // df = 2
  const double rare = std::log(2.0) + 1.0;          // df = 1
  const double unseen = std::log(4.0) + 1.0;        // df = 0
  CHECK(t.idf("the") == doctest::Approx(common).epsilon(1e-15));
  CHECK(t.idf("dog") == doctest::Approx(rare).epsilon(1e-15));
  CHECK(t.idf("zebra") == doctest::Approx(unseen).epsilon(1e-15));

  auto v = t.vectorize("the dog dog");
  REQUIRE(v.size() == 2);
  const double norm = std::sqrt(common * common + 4 * rare * rare);
  double w_the = 0, w_dog = 0;
  for (auto [k, w] : v) (k == aloha::fnv1a("the") ? w_the : w_dog) = w;
  CHECK(w_the == doctest::Approx(common / norm).epsilon(1e-12));
  CHECK(w_dog == doctest::Approx(2 * rare / norm).epsilon(1e-12));

  // "the cat" is (common, common); "the dog" is (common, rare); one shared term.
  const double expected = common * common / (std::sqrt(2.0) * common * std::sqrt(common * common + rare * rare));
  CHECK(t.similarity("the cat", "the dog") == doctest::Approx(expected).epsilon(1e-12));
  CHECK(t.similarity("The CAT!", "the cat") == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.similarity("cat", "dog") == 0.0);
  CHECK(t.similarity("", "cat") == 0.0);
}
