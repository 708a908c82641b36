#include <doctest.h>

#include <numeric>

#include "../support/oracles.hpp"
#include "aloha/ccm.hpp"
#include "aloha/common.hpp"

using namespace aloha;
using namespace aloha::ccm;

namespace {

std::vector<CharacterId> all_ids(int n) {
  std::vector<CharacterId> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

// Corpus whose dense ids 0..n-1 line up with factor rows.
Corpus named_corpus(int n) {
  std::string hla;
  for (int u = 0; u < n; ++u) hla += std::to_string(u) + "\tchar" + std::to_string(u) + "\tS\tx\n";
  return parse_corpus(hla, "");
}

}  // namespace

TEST_CASE("first level size") {
  CHECK(first_level_size(45820, 0.10) == 4582);
  CHECK(first_level_size(49, 0.10) == 5);
  CHECK(first_level_size(50, 0.10) == 5);
  CHECK(first_level_size(51, 0.10) == 6);
  CHECK(first_level_size(3, 0.10) == 1);
  CHECK(first_level_size(7, 1.0) == 7);
}

TEST_CASE("config validation") {
  CommunityConfig c;
  CHECK_NOTHROW(c.validate());
  c.first_level_fraction = 0.0;
  CHECK_THROWS(c.validate());
  c.first_level_fraction = 1.5;
  CHECK_THROWS(c.validate());
  c = {};
  c.second_level_k = 0;
  CHECK_THROWS(c.validate());
  c = {};
  c.min_frequency = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("identical vectors put every other character in the positive set") {
  csm::LatentFactors f;
  f.X = csm::Matrix::Constant(3, 2, 0.5);
  f.Y = csm::Matrix::Zero(1, 2);
  CommunityConfig cfg{1.0, 2, 1};
  auto c = build_community(f, 0, cfg, all_ids(3));
  CHECK(c.positive == std::set<CharacterId>{1, 2});
  CHECK(c.negative.empty());
  CHECK(c.first_level == std::vector<CharacterId>{1, 2});
}

TEST_CASE("matches the literal three-step oracle on clustered factors") {
  const std::vector<CommunityConfig> configs = {
      {0.10, 30, 10}, {0.10, 5, 2}, {0.25, 10, 3}, {0.5, 8, 1}, {1.0, 49, 49}, {0.02, 3, 1}};
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto f = oracle::clustered_factors(50, 4, 2, 0.4, seed);
    std::vector<CharacterId> dialogue;
    for (int u = 0; u < 50; u += 3) dialogue.push_back(u);
    for (const auto& cfg : configs) {
      for (CharacterId target : {0, 7, 49}) {
        const auto expected = oracle::community(f, target, cfg, dialogue);
        CHECK(build_community(f, target, cfg, dialogue) == expected);
        CHECK(reference::build_community(f, target, cfg, dialogue) == expected);
      }
    }
  }
}

TEST_CASE("tied similarities break by ascending id") {
  csm::LatentFactors f;
  f.X.resize(5, 2);
  f.X << 1, 0, 0, 1, 0, 2, 1, 1, 0, 3;
  f.Y = csm::Matrix::Zero(1, 2);
  // Characters 1, 2 and 4 are all parallel; 3 sits at 45 degrees from target 0.
  CommunityConfig cfg{0.5, 2, 1};
  auto c = build_community(f, 0, cfg, all_ids(5));
  CHECK(c.first_level == std::vector<CharacterId>{3, 1});
  CHECK(c == oracle::community(f, 0, cfg, all_ids(5)));
}

TEST_CASE("structural properties") {
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    auto f = oracle::clustered_factors(60, 5, 3, 0.6, seed);
    std::vector<CharacterId> dialogue;
    for (int u = 0; u < 60; u += 2) dialogue.push_back(u);
    const CharacterId target = static_cast<CharacterId>(seed % 60);

    SUBCASE("determinism and set laws") {
      CommunityConfig cfg{0.2, 10, 3};
      auto c = build_community(f, target, cfg, dialogue);
      CHECK(c == build_community(f, target, cfg, dialogue));
      CHECK_FALSE(c.positive.count(target));
      CHECK_FALSE(c.negative.count(target));
      for (CharacterId p : c.positive) {
        CHECK_FALSE(c.negative.count(p));
        CHECK(c.count_of(p) >= cfg.min_frequency);
      }
      std::set<CharacterId> covered(c.negative.begin(), c.negative.end());
      for (CharacterId d : dialogue) {
        if (c.positive.count(d) || d == target) covered.insert(d);
      }
      CHECK(covered == std::set<CharacterId>(dialogue.begin(), dialogue.end()));
    }
    SUBCASE("raising min_frequency never grows the positive set") {
      std::set<CharacterId> prev;
      for (int mf = 1; mf <= 12; ++mf) {
        auto c = build_community(f, target, {0.2, 10, mf}, dialogue);
        if (mf > 1) CHECK(std::includes(prev.begin(), prev.end(), c.positive.begin(), c.positive.end()));
        prev = c.positive;
      }
    }
    SUBCASE("enlarging the fraction never lowers a second-level count") {
      Community prev;
      for (double frac : {0.05, 0.1, 0.2, 0.4, 0.8, 1.0}) {
        auto c = build_community(f, target, {frac, 10, 1}, dialogue);
        for (auto [m, k] : prev.second_level_counts) CHECK(c.count_of(m) >= k);
        prev = c;
      }
    }
  }
}

TEST_CASE("errors") {
  csm::LatentFactors f;
  f.X = csm::Matrix::Zero(4, 2);
  f.Y = csm::Matrix::Zero(1, 2);
  CHECK_THROWS_WITH(build_community(f, 0, {}, all_ids(4)), doctest::Contains("zero"));
  f.X = csm::Matrix::Ones(4, 2);
  CHECK_THROWS(build_community(f, 0, {}, {}));
  CHECK_THROWS_AS(build_community(f, 4, {}, all_ids(4)), NotFoundError);
}

TEST_CASE("community report") {
  auto corpus = named_corpus(50);
  auto f = oracle::clustered_factors(50, 4, 2, 0.3, 3);
  SUBCASE("defaults echoed and empty positive set flagged") {
    CommunityConfig cfg;
    auto c = build_community(f, 0, cfg, all_ids(50));
    REQUIRE(c.positive.empty());  // only 5 second-level lists exist, fewer than min_frequency 10
    auto report = community_report(c, corpus, cfg);
    CHECK(report.find("10% / second level top 30 / minimum frequency 10") != std::string::npos);
    CHECK(report.find("positive community empty") != std::string::npos);
    CHECK(report.find("first level size: 5") != std::string::npos);
  }
  SUBCASE("member counts equal the second-level map") {
    CommunityConfig cfg{0.2, 10, 2};
    auto c = build_community(f, 0, cfg, all_ids(50));
    REQUIRE_FALSE(c.positive.empty());
    auto report = community_report(c, corpus, cfg);
    for (CharacterId p : c.positive) {
      const std::string row = "  " + std::to_string(p) + "\tchar" + std::to_string(p) + "\t" +
                              std::to_string(c.second_level_counts.at(p)) + "\n";
      CHECK(report.find(row) != std::string::npos);
    }
    CHECK(report.find("negative set size: " + std::to_string(c.negative.size())) != std::string::npos);
  }
}

TEST_CASE("export and import") {
  auto corpus = named_corpus(50);
  auto f = oracle::clustered_factors(50, 4, 2, 0.3, 5);
  CommunityConfig cfg{0.2, 10, 2};
  auto c = build_community(f, 4, cfg, all_ids(50));
  auto text = export_community(c, corpus);
  std::size_t lines = std::count(text.begin(), text.end(), '\n');
  CHECK(lines == c.first_level.size() + c.positive.size() + c.negative.size());
  CHECK(text.rfind("FL\t", 0) == 0);

  auto back = import_community(text, 4);
  CHECK(back.first_level == c.first_level);
  CHECK(back.positive == c.positive);
  CHECK(back.negative == c.negative);
  for (CharacterId m : c.first_level) CHECK(back.count_of(m) == c.count_of(m));
  for (CharacterId m : c.positive) CHECK(back.count_of(m) == c.count_of(m));
  CHECK(export_community(back, corpus) == text);

  CHECK_THROWS_AS(import_community("XX\t1\ta\t0\n", 0), ParseError);
  CHECK_THROWS_AS(import_community("FL\t1\ta\n", 0), ParseError);
}
