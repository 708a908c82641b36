#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "aloha/common.hpp"
#include "aloha/metrics.hpp"
#include "aloha/ranker.hpp"

using namespace aloha;
using namespace aloha::ranker;

namespace {

ModelConfig small_config(double init_scale = 0.1, int dim = 8) {
  ModelConfig c;
  c.vocab_buckets = 1u << 12;
  c.dim = dim;
  c.init_scale = init_scale;
  c.seed = 17;
  return c;
}

obs::Observation unguided(std::string ctx) {
  obs::Observation o;
  o.hla_slots.fill(std::string(obs::kNone));
  o.context_text = std::move(ctx);
  return o;
}

// Twenty candidates built from a word pool; the gt shares words with the context.
obs::CandidateSet make_set(std::uint64_t seed, int n = 20) {
  static const std::vector<std::string> words = {"red",   "blue", "green", "tea",  "cake", "ship", "moon",
                                                 "storm", "gold", "iron",  "rain", "song", "wolf", "fire"};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> w(0, words.size() - 1);
  auto phrase = [&](int len) {
    std::string s;
    for (int k = 0; k < len; ++k) s += (k ? " " : "") + words[w(rng)];
    return s;
  };
  obs::CandidateSet set;
  const std::string ctx = phrase(4);
  set.obs = unguided(ctx);
  std::uniform_int_distribution<int> where(0, n - 1);
  set.gt_index = where(rng);
  for (int j = 0; j < n; ++j) {
    set.candidates.push_back(j == set.gt_index ? ctx.substr(0, ctx.find(' ')) + " " + phrase(2) : phrase(3));
    set.provenance.push_back(j);
  }
  set.target = set.gt_index;
  return set;
}

}  // namespace

TEST_CASE("tokenizer caps keep the prefix") {
  Tokenizer t;
  std::string text;
  for (int k = 0; k < 400; ++k) text += "w" + std::to_string(k) + " ";
  auto toks = t(text, t.obs_cap);
  REQUIRE(toks.size() == 360);
  CHECK(toks.front() == "w0");
  CHECK(toks.back() == "w359");
  CHECK(t(text, t.cand_cap).size() == 72);
  CHECK(t("", 360).empty());
  CHECK(t("Hello, world!", 360) == std::vector<std::string>{"hello", "world"});
}

TEST_CASE("zero model") {
  auto m = BiEncoderModel::zeros(small_config());
  CHECK(m.encode_text("anything at all", Side::context).isZero(0.0));
  CHECK(m.score("a b", "c d") == 0.0);
  auto set = make_set(1);
  BiEncoderScorer scorer(m);
  auto r = rank(scorer, set);
  for (int j = 0; j < 20; ++j) CHECK(r.order[j] == j);
  CHECK(r.gt_rank == set.gt_index + 1);
  CHECK(std::abs(set_loss(m, set) - std::log(20.0)) < 1e-9);
}

TEST_CASE("encoding") {
  auto m = BiEncoderModel(small_config(0.0, 2));  // zero rows, identity projections
  auto put = [&](const char* tok, double a, double b) {
    auto row = m.mutable_row(m.bucket(tok));
    row[0] = a;
    row[1] = b;
  };
  put("alpha", 1.0, 2.0);
  put("beta", 3.0, -1.0);
  REQUIRE(m.bucket("alpha") != m.bucket("beta"));
  m.projection(Side::context) << 1.0, 2.0, 0.0, 1.0;
  m.projection(Side::candidate) << 0.5, 0.0, 1.0, -1.0;

  SUBCASE("mean pooling ignores repetition") {
    CHECK(m.encode_text("alpha", Side::context) == m.encode_text("alpha alpha alpha", Side::context));
  }
  SUBCASE("hand-computed mean times projection") {
    // mean = (2, 0.5); context W = [[1,2],[0,1]] so W^T mean = (2, 4.5).
    auto c = m.encode_text("alpha beta", Side::context);
    CHECK(c[0] == doctest::Approx(2.0));
    CHECK(c[1] == doctest::Approx(4.5));
    // candidate W = [[0.5,0],[1,-1]] on mean (1,2): (0.5 + 2, -2) = (2.5, -2).
    auto r = m.encode_text("alpha", Side::candidate);
    CHECK(r[0] == doctest::Approx(2.5));
    CHECK(r[1] == doctest::Approx(-2.0));
    CHECK(m.score("alpha beta", "alpha") == doctest::Approx(2.0 * 2.5 - 4.5 * 2.0));
  }
  SUBCASE("empty text encodes to zero") { CHECK(m.encode_text("", Side::candidate).isZero(0.0)); }
}

TEST_CASE("scores are linear in the candidate projection") {
  BiEncoderModel m(small_config());
  auto set = make_set(4);
  BiEncoderScorer scorer(m);
  const auto before = rank(scorer, set);
  BiEncoderModel scaled = m;
  scaled.projection(Side::candidate) *= 3.0;
  BiEncoderScorer scaled_scorer(scaled);
  const auto after = rank(scaled_scorer, set);
  for (std::size_t j = 0; j < before.scores.size(); ++j) {
    CHECK(after.scores[j] == doctest::Approx(3.0 * before.scores[j]).epsilon(1e-12));
  }
  CHECK(after.order == before.order);
}

TEST_CASE("rank") {
  SUBCASE("gt sharing the only informative token ranks first") {
    auto m = BiEncoderModel(small_config(0.0, 2));
    auto row = m.mutable_row(m.bucket("blue"));
    row[0] = 1.0;
    obs::CandidateSet set;
    set.obs = unguided("the sky is blue");
    set.candidates = {"grass is green", "blue indeed", "no idea"};
    set.gt_index = 1;
    set.provenance = {0, 1, 2};
    BiEncoderScorer scorer(m);
    CHECK(rank(scorer, set).gt_rank == 1);
  }
  SUBCASE("permuting distractors keeps the gt rank") {
    BiEncoderModel m(small_config());
    auto set = make_set(9);
    BiEncoderScorer scorer(m);
    const int base = rank(scorer, set).gt_rank;
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
      auto shuffled = set;
      std::vector<std::string> others;
      for (int j = 0; j < 20; ++j) {
        if (j != set.gt_index) others.push_back(set.candidates[j]);
      }
      std::shuffle(others.begin(), others.end(), rng);
      shuffled.candidates.clear();
      for (int j = 0, k = 0; j < 20; ++j) {
        shuffled.candidates.push_back(j == set.gt_index ? set.candidates[j] : others[k++]);
      }
      CHECK(rank(scorer, shuffled).gt_rank == base);
    }
  }
  SUBCASE("hits@1 downstream equals the share of sets ranked first") {
    BiEncoderModel m(small_config());
    BiEncoderScorer scorer(m);
    std::vector<metrics::RankSample> samples;
    int firsts = 0;
    for (std::uint64_t s = 0; s < 40; ++s) {
      auto set = make_set(s);
      const int r = rank(scorer, set).gt_rank;
      CHECK(r >= 1);
      CHECK(r <= 20);
      firsts += r == 1;
      samples.push_back({r, 20, "", ""});
    }
    CHECK(metrics::hits_at(samples, 1) == firsts / 40.0);
  }
}

TEST_CASE("training") {
  SUBCASE("single set is memorized") {
    BiEncoderModel m(small_config(0.1, 16));
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.learning_rate = 0.01;
    auto result = train(m, {make_set(3)}, cfg);
    CHECK(result.loss_curve.size() == 201);
    CHECK(result.loss_curve.back() < 0.05);
  }
  SUBCASE("zero-initialized loss curve starts at ln 20") {
    auto m = BiEncoderModel::zeros(small_config());
    TrainConfig cfg;
    cfg.epochs = 1;
    std::vector<obs::CandidateSet> sets = {make_set(1), make_set(2)};
    auto result = train(m, sets, cfg);
    CHECK(std::abs(result.loss_curve.front() - std::log(20.0)) < 1e-9);
  }
  SUBCASE("ten sets with a small step roughly halve the loss") {
    BiEncoderModel m(small_config(0.1, 16));
    std::vector<obs::CandidateSet> sets;
    for (std::uint64_t s = 0; s < 10; ++s) sets.push_back(make_set(100 + s));
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 10;
    cfg.learning_rate = 0.005;
    auto curve = train(m, sets, cfg).loss_curve;
    CHECK(curve.back() < 0.5 * curve.front());
    for (std::size_t e = 1; e < curve.size(); ++e) CHECK(curve[e] <= curve[e - 1] + 1e-12);
  }
  SUBCASE("bitwise deterministic") {
    std::vector<obs::CandidateSet> sets;
    for (std::uint64_t s = 0; s < 12; ++s) sets.push_back(make_set(s));
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 8;
    BiEncoderModel a(small_config()), b(small_config());
    train(a, sets, cfg);
    train(b, sets, cfg);
    CHECK(a.serialize() == b.serialize());
  }
  SUBCASE("stage checks") {
    BiEncoderModel m(small_config());
    auto guided = make_set(1);
    guided.obs.hla_slots[0] = "brave";
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_WITH(train(m, {guided}, cfg), doctest::Contains("unguided"));
    cfg.stage = Stage::lsrm_finetune;
    CHECK_THROWS_WITH(train(m, {guided}, cfg), doctest::Contains("trained starting model"));
    CHECK_THROWS_WITH(train(m, {make_set(1)}, cfg), doctest::Contains("HLA-guided"));
    cfg.stage = Stage::uniform;
    train(m, {make_set(1)}, cfg);
    cfg.stage = Stage::lsrm_finetune;
    CHECK_NOTHROW(train(m, {guided}, cfg));
    CHECK_THROWS(train(m, {}, cfg));
    cfg.epochs = 0;
    CHECK_THROWS(train(m, {guided}, cfg));
  }
}

TEST_CASE("gradients") {
  BiEncoderModel m(small_config(0.5, 8));
  m.projection(Side::context) += Eigen::MatrixXd::Constant(8, 8, 0.1);
  auto set = make_set(21);

  SUBCASE("analytic gradients match central differences") {
    auto check = gradient_check(m, set, 1e-5, 256, 1);
    CHECK(check.parameters_checked >= 200);
    CHECK(check.max_relative_error < 1e-4);
  }
  SUBCASE("tokens absent from the set get no gradient") {
    Gradient g;
    set_loss_and_gradient(m, set, g);
    const std::uint32_t absent = m.bucket("zzzz-not-present");
    CHECK(g.rows.count(absent) == 0);
    for (int k = 0; k < 8; ++k) {
      ParamRef p{ParamRef::Kind::embedding, absent, 0, k};
      CHECK(analytic_gradient(g, p) == 0.0);
      CHECK(finite_difference(m, set, p, 1e-3) == 0.0);
    }
  }
  SUBCASE("central differences converge at second order") {
    Gradient g;
    set_loss_and_gradient(m, set, g);
    const std::uint32_t b = m.bucket("red");
    ParamRef p{ParamRef::Kind::embedding, b, 0, 2};
    const double exact = analytic_gradient(g, p);
    const double e1 = std::abs(finite_difference(m, set, p, 0.02) - exact);
    const double e2 = std::abs(finite_difference(m, set, p, 0.04) - exact);
    CHECK(e1 > 0.0);
    CHECK(e2 / e1 == doctest::Approx(4.0).epsilon(0.1));
  }
}

TEST_CASE("model files round-trip exactly") {
  BiEncoderModel m(small_config());
  std::vector<obs::CandidateSet> sets = {make_set(1), make_set(2), make_set(3)};
  TrainConfig cfg;
  cfg.epochs = 2;
  train(m, sets, cfg);
  auto text = m.serialize();
  auto back = BiEncoderModel::deserialize(text);
  CHECK(back.serialize() == text);
  CHECK(back.steps == m.steps);
  for (const auto& s : sets) {
    for (const auto& c : s.candidates) CHECK(back.score(s.obs.context_text, c) == m.score(s.obs.context_text, c));
  }
  CHECK_THROWS(BiEncoderModel::deserialize("garbage"));
  CHECK_THROWS(BiEncoderModel::deserialize(text.substr(0, text.size() / 2)));
}

TEST_CASE("loss curve format") {
  CHECK(format_loss_curve({2.5, 1.25}) == "0\t2.5\n1\t1.25\n");
}

TEST_CASE("tf-idf scorer") {
  TfidfScorer scorer(text::TfIdf({"hello there friend", "goodbye now", "hello again"}));
  auto s = scorer.scores("hello there friend", {"goodbye now", "hello there friend", "hello again", "xyz"});
  CHECK(s[1] == doctest::Approx(1.0));
  CHECK(s[1] > s[2]);
  CHECK(s[0] == 0.0);
  CHECK(s[3] == 0.0);
}
