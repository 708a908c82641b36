#include "aloha/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <random>

#include "aloha/common.hpp"
#include "aloha/obs.hpp"

namespace aloha::service {

namespace fs = std::filesystem;

ServiceData load_service_data(const pipeline::PipelineConfig& config, const std::string& model_path) {
  const auto& w = config.workdir;
  ServiceData d{pipeline::load_ingested(w), csm::deserialize_factors(read_file(pipeline::paths::factors(w))),
                config.community, {}, ranker::BiEncoderModel()};
  const auto dir = fs::path(w) / "community";
  if (fs::exists(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() != ".tsv") continue;
      std::int64_t ext = 0;
      try {
        ext = parse_int(entry.path().stem().string());
      } catch (const Error&) {
        continue;
      }
      if (auto id = d.corpus.find_external(ext)) {
        d.communities[*id] = ccm::import_community(read_file(entry.path().string()), *id);
      }
    }
  }
  std::string path = model_path;
  if (path.empty()) {
    if (config.targets.empty()) throw Error("no model given and no target configured");
    path = (fs::path(pipeline::paths::target_dir(w, config.targets.front())) / "aloha.model").string();
  }
  d.model = ranker::BiEncoderModel::deserialize(read_file(path));
  return d;
}

ApiResponse api_error(int status, const std::string& code, const std::string& message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

ChatService::ChatService(ServiceData data, ChatOptions options)
    : data_(std::move(data)), options_(options), server_(std::make_unique<httplib::Server>()) {
  for (const auto& [target, community] : data_.communities) {
    Pool p;
    for (CharacterId c : community.positive) {
      if (c == target) continue;
      const auto& ls = data_.corpus.lines_of(c);
      p.lines.insert(p.lines.end(), ls.begin(), ls.end());
    }
    if (options_.include_target_lines) {
      const auto& ls = data_.corpus.lines_of(target);
      p.lines.insert(p.lines.end(), ls.begin(), ls.end());
    }
    std::sort(p.lines.begin(), p.lines.end());
    std::vector<std::string> docs;
    for (LineId l : p.lines) docs.push_back(data_.corpus.pair(l).response.text);
    p.tfidf = text::TfIdf(docs);
    for (const auto& doc : docs) p.vectors.push_back(p.tfidf.vectorize(doc));
    pools_.emplace(target, std::move(p));
  }
  routes();
}

ChatService::~ChatService() = default;

ApiResponse ChatService::health() const { return {200, {{"status", "ok"}}}; }

namespace {

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

Json character_json(const Corpus& corpus, CharacterId id) {
  const auto& c = corpus.character(id);
  return {{"character_id", c.external_id}, {"name", c.name}, {"show", corpus.show_names()[c.show_id]}};
}

}  // namespace

ApiResponse ChatService::search(const std::string& query) const {
  const auto q = lower(query);
  Json out = Json::array();
  for (const auto& c : data_.corpus.characters()) {
    if (out.size() >= 50) break;
    if (lower(c.name).find(q) != std::string::npos) out.push_back(character_json(data_.corpus, c.id));
  }
  return {200, {{"characters", out}}};
}

std::optional<CharacterId> ChatService::resolve(const std::string& id, ApiResponse& error) const {
  std::int64_t ext = 0;
  try {
    ext = parse_int(id);
  } catch (const Error&) {
    error = api_error(400, "bad_request", "character id must be an integer, got '" + id + "'");
    return std::nullopt;
  }
  auto found = data_.corpus.find_external(ext);
  if (!found) error = api_error(404, "not_found", "character " + std::to_string(ext) + " not found");
  return found;
}

ApiResponse ChatService::hlas(const std::string& id) const {
  ApiResponse err;
  auto c = resolve(id, err);
  if (!c) return err;
  Json out = character_json(data_.corpus, *c);
  Json names = Json::array();
  for (HlaId h : data_.corpus.character(*c).hla_ids) names.push_back(data_.corpus.hla_names()[h]);
  out["hlas"] = names;
  out["important_hlas"] = obs::top_important_hlas(data_.factors, data_.corpus, *c);
  return {200, out};
}

ApiResponse ChatService::community(const std::string& id) const {
  ApiResponse err;
  auto c = resolve(id, err);
  if (!c) return err;
  auto it = data_.communities.find(*c);
  if (it == data_.communities.end()) {
    return api_error(404, "not_built", "community for character " + id + " has not been built");
  }
  const auto& comm = it->second;
  std::vector<CharacterId> pos(comm.positive.begin(), comm.positive.end());
  std::stable_sort(pos.begin(), pos.end(),
                   [&](CharacterId a, CharacterId b) { return comm.count_of(a) > comm.count_of(b); });
  Json members = Json::array();
  for (CharacterId p : pos) {
    auto m = character_json(data_.corpus, p);
    m["count"] = comm.count_of(p);
    members.push_back(m);
  }
  Json first = Json::array();
  for (CharacterId f : comm.first_level) first.push_back(data_.corpus.character(f).external_id);
  Json out = character_json(data_.corpus, *c);
  out["status"] = "built";
  out["positive"] = members;
  out["negative_size"] = comm.negative.size();
  out["first_level"] = first;
  out["report"] = ccm::community_report(comm, data_.corpus, data_.community_config);
  return {200, out};
}

const ChatService::Pool& ChatService::pool_for(CharacterId target) const { return pools_.at(target); }

ApiResponse ChatService::chat(const std::string& body) const {
  Json req;
  try {
    req = Json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    return api_error(400, "bad_request", "request body is not valid JSON");
  }
  if (!req.is_object()) return api_error(400, "bad_request", "request body must be a JSON object");
  if (!req.contains("character_id") || !req["character_id"].is_number_integer()) {
    return api_error(400, "bad_request", "character_id must be an integer");
  }
  if (!req.contains("message") || !req["message"].is_string() || trim(req["message"].get<std::string>()).empty()) {
    return api_error(400, "bad_request", "message must be a non-empty string");
  }
  const std::string id = std::to_string(req["character_id"].get<std::int64_t>());
  const std::string message = req["message"].get<std::string>();

  std::vector<std::string> history;
  if (req.contains("history")) {
    if (!req["history"].is_array()) return api_error(400, "bad_request", "history must be an array");
    for (const auto& turn : req["history"]) {
      if (!turn.is_object() || !turn.contains("text") || !turn["text"].is_string()) {
        return api_error(400, "bad_request", "history turns need a text field");
      }
      history.push_back(turn["text"].get<std::string>());
    }
  }
  if (history.size() > options_.history_cap) {
    history.erase(history.begin(), history.end() - static_cast<std::ptrdiff_t>(options_.history_cap));
  }
  std::size_t top_k = options_.top_k;
  if (req.contains("top_k")) {
    if (!req["top_k"].is_number_unsigned() || req["top_k"].get<std::size_t>() == 0) {
      return api_error(400, "bad_request", "top_k must be a positive integer");
    }
    top_k = req["top_k"].get<std::size_t>();
  }

  ApiResponse err;
  auto target = resolve(id, err);
  if (!target) return err;
  if (!pools_.count(*target)) {
    return api_error(409, "not_built", "community for character " + id + " has not been built");
  }
  const auto& pool = pool_for(*target);
  if (pool.lines.empty()) return api_error(422, "no_candidates", "the positive community of character " + id + " has no dialogue");

  std::uint64_t seed;
  if (req.contains("nonce") && req["nonce"].is_string()) {
    seed = fnv1a(req["nonce"].get<std::string>());
  } else {
    seed = std::random_device{}();
  }
  const std::string context = history.empty() ? message : history.back() + " " + message;
  const auto observation = obs::build_obs(data_.corpus, *target, context, obs::ObsMode::hla_og, data_.factors, seed);

  // Lexical prefilter against the message, ties by line id.
  const auto query = pool.tfidf.vectorize(message);
  std::vector<std::pair<double, std::size_t>> sims;
  for (std::size_t k = 0; k < pool.lines.size(); ++k) sims.emplace_back(text::cosine(query, pool.vectors[k]), k);
  std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  sims.resize(std::min(sims.size(), options_.pool_size));

  std::vector<std::string> candidates;
  for (const auto& s : sims) candidates.push_back(data_.corpus.pair(pool.lines[s.second]).response.text);
  const auto scores = ranker::BiEncoderScorer(data_.model).scores(obs::render_obs(observation), candidates);
  std::vector<std::size_t> order(candidates.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  Json ranked = Json::array();
  for (std::size_t k = 0; k < std::min(top_k, order.size()); ++k) {
    const auto& line = data_.corpus.pair(pool.lines[sims[order[k]].second]).response;
    const auto& speaker = data_.corpus.character(line.character_id);
    ranked.push_back({{"text", line.text},
                      {"score", scores[order[k]]},
                      {"source_character", speaker.name},
                      {"source_character_id", speaker.external_id}});
  }
  return {200,
          {{"reply", ranked[0]["text"]}, {"ranked_candidates", ranked}, {"obs_rendered", obs::render_obs(observation)}}};
}

void ChatService::routes() {
  auto& s = *server_;
  auto send = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  s.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  s.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
  s.Get("/characters", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, search(req.has_param("q") ? req.get_param_value("q") : ""));
  });
  s.Get(R"(/characters/([^/]+)/hlas)",
        [this, send](const httplib::Request& req, httplib::Response& res) { send(res, hlas(req.matches[1])); });
  s.Get(R"(/characters/([^/]+)/community)",
        [this, send](const httplib::Request& req, httplib::Response& res) { send(res, community(req.matches[1])); });
  s.Post("/chat", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, chat(req.body)); });
  s.set_error_handler([send](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty()) send(res, api_error(res.status, "not_found", "no route for " + req.method + " " + req.path));
  });
  s.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, api_error(500, "internal", what));
  });
}

bool ChatService::listen(const std::string& host, int port) { return server_->listen(host, port); }
int ChatService::bind_any_port(const std::string& host) { return server_->bind_to_any_port(host); }
bool ChatService::listen_after_bind() { return server_->listen_after_bind(); }
void ChatService::stop() { server_->stop(); }

}  // namespace aloha::service
