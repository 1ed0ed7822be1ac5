#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadrag/vlm_gateway.hpp"

namespace cadrag {

enum class WireDialect { openai_chat, gemini_generate };

WireDialect wire_dialect_from_string(std::string_view s);

struct HttpBackendConfig {
  WireDialect dialect = WireDialect::openai_chat;
  /// e.g. https://api.openai.com/v1 or https://generativelanguage.googleapis.com
  std::string base_url;
  std::string api_key;
  std::chrono::seconds timeout{120};
};

/// Reads MODEL_API_KEY, MODEL_BASE_URL, MODEL_NAME and MODEL_DIALECT.
/// Returns nullopt when MODEL_API_KEY is unset.
struct EnvModelConfig {
  HttpBackendConfig backend;
  std::string model_name;
};
std::optional<EnvModelConfig> model_config_from_env();

// Wire bodies are exposed for testing the dialects without a network.
nlohmann::json openai_request_body(const ChatRequest& request);
BackendReply parse_openai_response(const nlohmann::json& body);
nlohmann::json gemini_request_body(const ChatRequest& request);
BackendReply parse_gemini_response(const nlohmann::json& body);

/// Chat backend speaking one of the two wire dialects over HTTP(S).
/// Non-2xx statuses and connection failures surface as TransportError.
class HttpChatBackend : public ChatBackend {
 public:
  explicit HttpChatBackend(HttpBackendConfig config);
  BackendReply complete(const ChatRequest& request) override;

 private:
  HttpBackendConfig config_;
};

/// Text embeddings over an OpenAI-style /embeddings endpoint.
class HttpEmbedder {
 public:
  HttpEmbedder(HttpBackendConfig config, std::string model);
  std::vector<double> embed(const std::string& text);

 private:
  HttpBackendConfig config_;
  std::string model_;
};

}  // namespace cadrag
