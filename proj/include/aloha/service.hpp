#pragma once

#include <json.hpp>
#include <map>
#include <memory>
#include <string>

#include "aloha/ccm.hpp"
#include "aloha/corpus.hpp"
#include "aloha/csm.hpp"
#include "aloha/pipeline.hpp"
#include "aloha/ranker.hpp"
#include "aloha/text.hpp"

namespace httplib {
class Server;
}

namespace aloha::service {

using Json = nlohmann::json;

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string model_path;
};

struct ChatOptions {
  std::size_t pool_size = 100;
  std::size_t top_k = 5;
  std::size_t history_cap = 20;
  /// Let the target's own lines into its chat pool.
  bool include_target_lines = false;
};

/// Read-only artifacts behind the API.
struct ServiceData {
  Corpus corpus;
  csm::LatentFactors factors;
  ccm::CommunityConfig community_config;
  std::map<CharacterId, ccm::Community> communities;
  ranker::BiEncoderModel model;
};

/// Loads corpus, factors, every built community and the ranker from a workdir.
/// Without `model_path` the first configured target's fine-tuned model is used.
ServiceData load_service_data(const pipeline::PipelineConfig& config, const std::string& model_path = "");

struct ApiResponse {
  int status = 200;
  Json body;
};

ApiResponse api_error(int status, const std::string& code, const std::string& message);

class ChatService {
 public:
  explicit ChatService(ServiceData data, ChatOptions options = {});
  ~ChatService();
  ChatService(const ChatService&) = delete;
  ChatService& operator=(const ChatService&) = delete;

  ApiResponse health() const;
  ApiResponse search(const std::string& query) const;
  ApiResponse hlas(const std::string& id) const;
  ApiResponse community(const std::string& id) const;
  ApiResponse chat(const std::string& body) const;

  bool listen(const std::string& host, int port);
  /// Binds an ephemeral port and returns it; serve with listen_after_bind.
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();

  const ServiceData& data() const { return data_; }

 private:
  struct Pool {
    std::vector<LineId> lines;
    text::TfIdf tfidf;
    std::vector<text::SparseVector> vectors;
  };

  std::optional<CharacterId> resolve(const std::string& id, ApiResponse& error) const;
  const Pool& pool_for(CharacterId target) const;
  void routes();

  ServiceData data_;
  ChatOptions options_;
  std::map<CharacterId, Pool> pools_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace aloha::service
