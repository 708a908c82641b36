#include <doctest.h>

#include <chrono>
#include <set>
#include <thread>

#include "aloha/service.hpp"
#include "aloha/synth.hpp"

// After Eigen: resolv.h defines _res, which Eigen uses as a parameter name.
#include <httplib.h>

using namespace aloha;
using namespace aloha::service;

namespace {

ServiceData synthetic_data(std::vector<CharacterId> built = {0, 5}) {
  const auto s = synth::generate({});
  ServiceData d;
  d.corpus = parse_corpus(s.hla_text, s.dialogue_text);
  d.factors = csm::fit(csm::InteractionMatrix::from_corpus(d.corpus), {}).factors;
  d.community_config = {0.25, 9, 3};
  for (CharacterId t : built) {
    d.communities[t] = ccm::build_community(d.factors, t, d.community_config, d.corpus.dialogue_characters());
  }
  ranker::ModelConfig mc;
  mc.dim = 16;
  d.model = ranker::BiEncoderModel(mc);
  return d;
}

// Runs the service on an ephemeral port for the lifetime of the object.
struct LiveServer {
  ChatService service;
  int port = 0;
  std::thread thread;

  explicit LiveServer(ServiceData d, ChatOptions o = {}) : service(std::move(d), o) {
    port = service.bind_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { service.listen_after_bind(); });
  }
  ~LiveServer() {
    service.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

Json body_of(const httplib::Result& r) {
  REQUIRE(r);
  return Json::parse(r->body);
}

void check_error(const httplib::Result& r, int status, const std::string& code) {
  REQUIRE(r);
  CHECK(r->status == status);
  const auto j = Json::parse(r->body);
  CHECK(j["error"]["code"] == code);
  CHECK(j["error"]["message"].is_string());
}

std::string chat_body(std::int64_t id, const std::string& message, const std::string& nonce = "n1") {
  return Json{{"character_id", id}, {"message", message}, {"nonce", nonce}, {"history", Json::array()}}.dump();
}

}  // namespace

TEST_CASE("live http api") {
  LiveServer server(synthetic_data());
  auto cli = server.client();

  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(body_of(health) == Json{{"status", "ok"}});
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");
  auto pre = cli.Options("/chat");
  REQUIRE(pre);
  CHECK(pre->status == 204);

  SUBCASE("search") {
    auto all = body_of(cli.Get("/characters?q="))["characters"];
    CHECK(all.size() == 40);
    for (std::size_t k = 1; k < all.size(); ++k) CHECK(all[k - 1]["character_id"] < all[k]["character_id"]);
    auto some = body_of(cli.Get("/characters?q=CHARACTER1"))["characters"];
    REQUIRE(some.size() == 10);
    CHECK(some[0]["name"] == "Character10");
    CHECK(some[0]["show"].is_string());
    auto none = cli.Get("/characters?q=zzz");
    CHECK(none->status == 200);
    CHECK(body_of(none)["characters"].empty());
  }

  SUBCASE("hlas and errors") {
    auto h = body_of(cli.Get("/characters/1/hlas"));
    CHECK(h["name"] == "Character00");
    CHECK(h["hlas"].size() == 10);
    CHECK(h["important_hlas"].size() == 10);
    auto missing = cli.Get("/characters/999/hlas");
    check_error(missing, 404, "not_found");
    CHECK(body_of(missing)["error"]["message"].get<std::string>().find("999") != std::string::npos);
    check_error(cli.Get("/characters/abc/hlas"), 400, "bad_request");
    check_error(cli.Get("/nowhere"), 404, "not_found");
  }

  SUBCASE("community") {
    const auto& d = server.service.data();
    auto c = body_of(cli.Get("/characters/1/community"));
    CHECK(c["status"] == "built");
    const auto& comm = d.communities.at(0);
    CHECK(c["report"] == ccm::community_report(comm, d.corpus, d.community_config));
    CHECK(c["positive"].size() == comm.positive.size());
    CHECK(c["negative_size"] == comm.negative.size());
    for (std::size_t k = 1; k < c["positive"].size(); ++k) CHECK(c["positive"][k - 1]["count"] >= c["positive"][k]["count"]);
    check_error(cli.Get("/characters/2/community"), 404, "not_built");
  }

  SUBCASE("chat") {
    const auto& d = server.service.data();
    const auto& comm = d.communities.at(0);
    const auto started = std::chrono::steady_clock::now();
    auto r = cli.Post("/chat", chat_body(1, "is it going to rain today?"), "application/json");
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(ms < 200.0);
    auto j = Json::parse(r->body);
    REQUIRE(j["ranked_candidates"].size() == 5);
    CHECK(j["reply"] == j["ranked_candidates"][0]["text"]);
    CHECK(j["obs_rendered"].get<std::string>().find("hla: ") == 0);
    for (const auto& c : j["ranked_candidates"]) {
      const auto speaker = *d.corpus.find_external(c["source_character_id"].get<std::int64_t>());
      CHECK(comm.positive.count(speaker) == 1);
      CHECK(comm.negative.count(speaker) == 0);
      CHECK(speaker != 0);
    }
    for (std::size_t k = 1; k < j["ranked_candidates"].size(); ++k) {
      CHECK(j["ranked_candidates"][k - 1]["score"] >= j["ranked_candidates"][k]["score"]);
    }

    auto again = cli.Post("/chat", chat_body(1, "is it going to rain today?"), "application/json");
    CHECK(again->body == r->body);

    Json with_history = {{"character_id", 1},
                         {"message", "and tomorrow?"},
                         {"nonce", "n1"},
                         {"top_k", 3},
                         {"history", Json::array()}};
    for (int k = 0; k < 30; ++k) with_history["history"].push_back({{"speaker", "user"}, {"text", "turn " + std::to_string(k)}});
    auto h = body_of(cli.Post("/chat", with_history.dump(), "application/json"));
    CHECK(h["ranked_candidates"].size() == 3);
    CHECK(h["obs_rendered"].get<std::string>().find("turn 29 and tomorrow?") != std::string::npos);

    check_error(cli.Post("/chat", chat_body(1, "   "), "application/json"), 400, "bad_request");
    check_error(cli.Post("/chat", "{not json", "application/json"), 400, "bad_request");
    check_error(cli.Post("/chat", chat_body(4242, "hi"), "application/json"), 404, "not_found");
    check_error(cli.Post("/chat", chat_body(2, "hi"), "application/json"), 409, "not_built");
  }
}

TEST_CASE("chat pool obeys include_target_lines") {
  auto d = synthetic_data({0});
  ChatOptions o;
  o.top_k = 1000;
  o.pool_size = 1000;
  ChatService closed(synthetic_data({0}), o);
  o.include_target_lines = true;
  ChatService open(std::move(d), o);
  const auto a = closed.chat(chat_body(1, "rain"));
  const auto b = open.chat(chat_body(1, "rain"));
  REQUIRE(a.status == 200);
  REQUIRE(b.status == 200);
  std::size_t positive_lines = 0;
  const auto& data = closed.data();
  for (CharacterId c : data.communities.at(0).positive) positive_lines += data.corpus.lines_of(c).size();
  CHECK(a.body["ranked_candidates"].size() == positive_lines);
  CHECK(b.body["ranked_candidates"].size() == positive_lines + data.corpus.lines_of(0).size());
}

TEST_CASE("prefilter picks the only line sharing the message's words") {
  // Target T with community members A and B; only one of their lines mentions
  // the message's words. With an all-zero model the ranker ties everywhere,
  // so the prefilter order decides the reply.
  const std::string hla = "1\tT\tS\th1|h2\n2\tA\tS\th1|h2\n3\tB\tS\th1|h3\n4\tN\tS\th4\n";
  const std::string dialogue =
      "S\t9\tctx\t1\ttarget line about lanterns\n"
      "S\t9\tctx\t2\tgood morning to you\n"
      "S\t9\tctx\t2\tthe weather is fine\n"
      "S\t9\tctx\t3\twhere are the purple giraffes\n"
      "S\t9\tctx\t3\tnothing much happening\n"
      "S\t9\tctx\t4\tpurple giraffes everywhere\n";
  ServiceData d;
  d.corpus = parse_corpus(hla, dialogue);
  d.factors = csm::fit(csm::InteractionMatrix::from_corpus(d.corpus), {}).factors;
  ccm::Community c;
  c.target = 0;
  c.positive = {1, 2};
  c.negative = {3};
  c.second_level_counts = {{1, 1}, {2, 1}};
  d.communities[0] = c;
  ranker::ModelConfig mc;
  mc.dim = 4;
  mc.init_scale = 0.0;
  mc.identity_projection = false;
  d.model = ranker::BiEncoderModel(mc);
  ChatService svc(std::move(d));
  const auto r = svc.chat(chat_body(1, "Purple giraffes?"));
  REQUIRE(r.status == 200);
  CHECK(r.body["reply"] == "where are the purple giraffes");
  CHECK(r.body["ranked_candidates"].size() == 4);
  for (const auto& cand : r.body["ranked_candidates"]) CHECK(cand["source_character"] != "N");

  ccm::Community empty;
  empty.target = 0;
  auto d2 = svc.data();
  d2.communities[0] = empty;
  ChatService none(std::move(d2));
  const auto e = none.chat(chat_body(1, "hello"));
  CHECK(e.status == 422);
  CHECK(e.body["error"]["code"] == "no_candidates");
}
