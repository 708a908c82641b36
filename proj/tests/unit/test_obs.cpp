#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "aloha/common.hpp"
#include "aloha/obs.hpp"

using namespace aloha;
using namespace aloha::obs;

namespace {

// Character k (external id k+1) owns HLAs h0..h(k+3) and five lines.
// The last character has no HLAs and no dialogue.
Corpus fixture(int n = 12) {
  std::string hla, dia;
  for (int k = 0; k < n; ++k) {
    hla += std::to_string(k + 1) + "\tC" + std::to_string(k) + "\tS\t";
    for (int h = 0; h < k + 4; ++h) hla += (h ? "|h" : "h") + std::to_string(h);
    hla += '\n';
    for (int j = 0; j < 5; ++j) {
      dia += "S\t0\tcontext " + std::to_string(j) + "\t" + std::to_string(k + 1) + "\tspeaker" + std::to_string(k) +
             " says thing" + std::to_string(j) + "\n";
    }
  }
  hla += std::to_string(n + 1) + "\tBare\tS\t\n";
  return parse_corpus(hla, dia);
}

csm::LatentFactors factors_for(const Corpus& c, std::uint64_t seed) {
  return csm::initial_factors(c.num_characters(), c.num_hlas(), 3, seed);
}

Observation none_obs(std::string ctx = "ctx") {
  Observation o;
  o.hla_slots.fill(std::string(kNone));
  o.context_text = std::move(ctx);
  return o;
}

}  // namespace

TEST_CASE("top_important_hlas") {
  auto corpus = parse_corpus("1\tA\tS\ta|b|c|d\n", "");
  csm::LatentFactors f;
  f.X.resize(1, 2);
  f.X << 1, 2;
  f.Y.resize(4, 2);
  // scores a=1, b=4, c=-1, d=4
  f.Y << 1, 0, 0, 2, -1, 0, 2, 1;
  CHECK(top_important_hlas(f, corpus, 0) == std::vector<std::string>{"b", "d", "a", "c"});
  CHECK(top_important_hlas(f, corpus, 0, 2) == std::vector<std::string>{"b", "d"});
}

TEST_CASE("build_obs") {
  auto corpus = fixture();
  auto f = factors_for(corpus, 1);
  SUBCASE("no_hla_og gives eight none slots") {
    auto o = build_obs(corpus, 3, "Hello", ObsMode::no_hla_og, f, 0);
    for (const auto& s : o.hla_slots) CHECK(s == kNone);
    CHECK(o.context_text == "Hello");
    CHECK_FALSE(o.guided());
  }
  SUBCASE("eight-HLA character gives the same slot set for every seed") {
    const std::set<std::string> all = {"h0", "h1", "h2", "h3", "h4", "h5", "h6", "h7"};
    std::set<std::vector<std::string>> orders;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto o = build_obs(corpus, 4, "x", ObsMode::hla_og, f, seed);
      CHECK(std::set<std::string>(o.hla_slots.begin(), o.hla_slots.end()) == all);
      orders.insert({o.hla_slots.begin(), o.hla_slots.end()});
    }
    CHECK(orders.size() > 1);
  }
  SUBCASE("slots are distinct own HLAs and reproducible") {
    auto a = build_obs(corpus, 11, "x", ObsMode::hla_og, f, 5);
    auto b = build_obs(corpus, 11, "x", ObsMode::hla_og, f, 5);
    CHECK(a == b);
    std::set<std::string> own;
    for (HlaId h : corpus.character(11).hla_ids) own.insert(corpus.hla_names()[h]);
    std::set<std::string> seen(a.hla_slots.begin(), a.hla_slots.end());
    CHECK(seen.size() == kSlots);
    for (const auto& s : seen) CHECK(own.count(s));
  }
  SUBCASE("few HLAs are padded with none") {
    auto o = build_obs(corpus, 0, "x", ObsMode::hla_og, f, 2);
    CHECK(std::count(o.hla_slots.begin(), o.hla_slots.end(), std::string(kNone)) == 4);
    CHECK(o.guided());
  }
  SUBCASE("zero-HLA character") {
    CHECK_THROWS(build_obs(corpus, 12, "x", ObsMode::hla_og, f, 0));
  }
}

TEST_CASE("render_obs") {
  auto o = none_obs("Hello");
  auto r = render_obs(o);
  CHECK(std::count(r.begin(), r.end(), '\n') == 8);
  CHECK(r.substr(r.rfind('\n') + 1) == "Hello");
  CHECK(r.rfind("hla: none\n", 0) == 0);
  CHECK(render_obs(o) == r);
  CHECK(parse_obs(r) == o);
  auto other = o;
  other.hla_slots[3] = "brave";
  CHECK(render_obs(other) != r);
  CHECK(parse_obs(render_obs(other)) == other);
  CHECK_THROWS(parse_obs("hla: a\nhello"));
}

TEST_CASE("sample_uniform") {
  auto corpus = fixture();
  auto pool = LinePool::all(corpus);
  const LineId gt = corpus.lines_of(2).front();
  SamplingConfig cfg;
  cfg.seed = 3;

  auto set = sample_uniform(corpus, pool, gt, none_obs(), cfg);
  CHECK(set.candidates.size() == 20);
  CHECK(set.candidates[set.gt_index] == corpus.pair(gt).response.text);
  CHECK(set.target == 2);
  CHECK(std::set<LineId>(set.line_ids.begin(), set.line_ids.end()).size() == 20);
  CHECK(std::count(set.line_ids.begin(), set.line_ids.end(), gt) == 1);
  for (std::size_t j = 0; j < set.candidates.size(); ++j) {
    if (static_cast<int>(j) != set.gt_index) CHECK(set.provenance[j] != 2);
  }
  CHECK(sample_uniform(corpus, pool, gt, none_obs(), cfg).line_ids == set.line_ids);

  cfg.n_distractors = 0;
  auto single = sample_uniform(corpus, pool, gt, none_obs(), cfg);
  CHECK(single.candidates.size() == 1);
  CHECK(single.gt_index == 0);

  cfg.n_distractors = 56;
  CHECK_THROWS_WITH(sample_uniform(corpus, pool, gt, none_obs(), cfg), doctest::Contains("insufficient"));
}

TEST_CASE("sample_uniform picks speakers uniformly") {
  // One distractor per set; its speaker should be uniform over the 11 others.
  auto corpus = fixture();
  auto pool = LinePool::all(corpus);
  const LineId gt = corpus.lines_of(0).front();
  SamplingConfig cfg;
  cfg.n_distractors = 1;
  constexpr int kDraws = 10000;
  std::map<CharacterId, int> counts;
  for (int s = 0; s < kDraws; ++s) {
    cfg.seed = static_cast<std::uint64_t>(s);
    auto set = sample_uniform(corpus, pool, gt, none_obs(), cfg);
    ++counts[set.provenance[1 - set.gt_index]];
  }
  CHECK(counts.size() == 11);
  const double p = 1.0 / 11.0;
  const double sigma = std::sqrt(kDraws * p * (1 - p));
  for (auto [c, k] : counts) CHECK(std::abs(k - kDraws * p) <= 3 * sigma);
}

TEST_CASE("exact-text duplicates of the ground truth are never distractors") {
  auto corpus = parse_corpus("1\tA\tS\ta\n2\tB\tS\tb\n3\tC\tS\tc\n",
                             "S\t0\tx\t1\tsame words\nS\t0\tx\t2\tsame words\nS\t0\tx\t2\tother\nS\t0\tx\t3\tmore\n");
  SamplingConfig cfg;
  cfg.n_distractors = 2;
  for (std::uint64_t s = 0; s < 30; ++s) {
    cfg.seed = s;
    auto set = sample_uniform(corpus, LinePool::all(corpus), 0, none_obs(), cfg);
    CHECK(std::count(set.candidates.begin(), set.candidates.end(), "same words") == 1);
  }
}

namespace {

// Target T (id 0), positive P (id 1), negatives N0..N5 (ids 2..7).
// 25 negative lines mention "apple" or "pear"; 40 do not share any word with the ground truth.
struct NegativeFixture {
  Corpus corpus;
  ccm::Community community;
};

NegativeFixture negative_fixture() {
  std::string hla = "1\tT\tS\tx\n2\tP\tS\tx\n";
  for (int k = 0; k < 6; ++k) hla += std::to_string(k + 3) + "\tN" + std::to_string(k) + "\tS\tx\n";
  std::string dia = "S\t0\tc\t1\tapple pear\nS\t0\tc\t1\tapple again\nS\t0\tc\t2\tapple pear pie\n";
  for (int j = 0; j < 25; ++j) {
    dia += "S\t0\tc\t" + std::to_string(3 + j % 6) + "\t" + (j % 2 ? "apple" : "pear") + " w" + std::to_string(j) + "\n";
  }
  for (int j = 0; j < 40; ++j) dia += "S\t0\tc\t" + std::to_string(3 + j % 6) + "\tz" + std::to_string(j) + " q\n";
  NegativeFixture f{parse_corpus(hla, dia), {}};
  f.community.target = 0;
  f.community.positive = {1};
  for (int k = 2; k < 8; ++k) f.community.negative.insert(k);
  return f;
}

std::vector<std::string> documents(const Corpus& c) {
  std::vector<std::string> docs;
  for (const auto& p : c.pairs()) docs.push_back(p.response.text);
  return docs;
}

}  // namespace

TEST_CASE("sample_negative") {
  auto fx = negative_fixture();
  const auto& corpus = fx.corpus;
  text::TfIdf tfidf(documents(corpus));
  auto pool = LinePool::all(corpus);
  const LineId gt = 0;
  auto shares_word = [](const std::string& s) {
    return s.find("apple") != std::string::npos || s.find("pear") != std::string::npos;
  };

  SUBCASE("pool_k = 25 keeps every distractor among the word-sharing lines") {
    SamplingConfig cfg;
    cfg.mode = SamplingMode::negative_character;
    cfg.similarity_pool_k = 25;
    for (std::uint64_t s = 0; s < 50; ++s) {
      cfg.seed = s;
      auto set = sample_negative(corpus, pool, fx.community, gt, none_obs(), cfg, tfidf);
      CHECK(set.candidates.size() == 20);
      for (std::size_t j = 0; j < set.candidates.size(); ++j) {
        if (static_cast<int>(j) == set.gt_index) continue;
        CHECK(shares_word(set.candidates[j]));
        CHECK(fx.community.negative.count(set.provenance[j]));
      }
    }
  }
  SUBCASE("pool_k = pool size reaches every negative line") {
    SamplingConfig cfg;
    cfg.similarity_pool_k = 65;
    std::set<LineId> seen;
    for (std::uint64_t s = 0; s < 400; ++s) {
      cfg.seed = s;
      auto set = sample_negative(corpus, pool, fx.community, gt, none_obs(), cfg, tfidf);
      for (std::size_t j = 0; j < set.line_ids.size(); ++j) {
        if (static_cast<int>(j) != set.gt_index) seen.insert(set.line_ids[j]);
      }
    }
    CHECK(seen.size() == 65);
  }
  SUBCASE("too small a negative pool") {
    SamplingConfig cfg;
    cfg.n_distractors = 66;
    cfg.similarity_pool_k = 66;
    CHECK_THROWS(sample_negative(corpus, pool, fx.community, gt, none_obs(), cfg, tfidf));
  }
}

TEST_CASE("candidate file round trip") {
  auto corpus = fixture();
  auto pool = LinePool::all(corpus);
  auto f = factors_for(corpus, 4);
  std::vector<CandidateSet> sets;
  for (int k = 0; k < 5; ++k) {
    SamplingConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(k);
    const LineId gt = corpus.lines_of(k).back();
    auto obs = build_obs(corpus, k, "tab\there\nnewline | pipe", ObsMode::hla_og, f, k);
    sets.push_back(sample_uniform(corpus, pool, gt, obs, cfg));
  }
  auto text = write_candidate_sets(sets);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
  auto back = read_candidate_sets(text);
  REQUIRE(back.size() == sets.size());
  for (std::size_t k = 0; k < sets.size(); ++k) {
    CHECK(back[k].obs == sets[k].obs);
    CHECK(back[k].candidates == sets[k].candidates);
    CHECK(back[k].gt_index == sets[k].gt_index);
    CHECK(back[k].target == sets[k].target);
    CHECK(back[k].provenance == sets[k].provenance);
  }
  CHECK(write_candidate_sets(back) == text);
  CHECK_THROWS_AS(read_candidate_sets("only\tthree\tfields\n"), ParseError);
  CHECK_THROWS_AS(read_candidate_sets(text.substr(0, text.find('\n')) + "x\n"), ParseError);
}
