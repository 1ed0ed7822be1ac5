#include "cadrag/http_backend.hpp"

#include <cstdlib>

#include "httplib.h"

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

using json = nlohmann::json;

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // without trailing slash
};

SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos)
    throw PreconditionError("base URL needs a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  SplitUrl out;
  if (path_start == std::string::npos) {
    out.origin = url;
  } else {
    out.origin = url.substr(0, path_start);
    out.path = url.substr(path_start);
  }
  while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
  return out;
}

const char* env_or_null(const char* name) {
  const char* v = std::getenv(name);
  return (v && *v) ? v : nullptr;
}

json post_json(const HttpBackendConfig& config, const std::string& path,
               const httplib::Headers& headers, const json& body) {
  auto url = split_url(config.base_url);
  httplib::Client client(url.origin);
  client.set_connection_timeout(std::chrono::seconds(30));
  client.set_read_timeout(config.timeout);
  client.set_write_timeout(config.timeout);
  auto res = client.Post(url.path + path, headers, body.dump(), "application/json");
  if (!res)
    throw TransportError(0, true, "request to " + config.base_url + path +
                                      " failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300)
    throw TransportError::from_status(res->status, res->body);
  try {
    return json::parse(res->body);
  } catch (const json::exception& e) {
    throw TransportError(res->status, false,
                         std::string("malformed JSON response: ") + e.what());
  }
}

}  // namespace

WireDialect wire_dialect_from_string(std::string_view s) {
  auto v = to_lower_ascii(s);
  if (v == "openai" || v == "openai_chat" || v == "chat-completions")
    return WireDialect::openai_chat;
  if (v == "gemini" || v == "gemini_generate" || v == "generate-content")
    return WireDialect::gemini_generate;
  throw PreconditionError("unknown wire dialect '" + std::string(s) + "'");
}

std::optional<EnvModelConfig> model_config_from_env() {
  const char* key = env_or_null("MODEL_API_KEY");
  if (!key) return std::nullopt;
  EnvModelConfig cfg;
  cfg.backend.api_key = key;
  if (const char* d = env_or_null("MODEL_DIALECT"))
    cfg.backend.dialect = wire_dialect_from_string(d);
  if (const char* url = env_or_null("MODEL_BASE_URL")) {
    cfg.backend.base_url = url;
  } else {
    cfg.backend.base_url = cfg.backend.dialect == WireDialect::openai_chat
                               ? "https://api.openai.com/v1"
                               : "https://generativelanguage.googleapis.com/v1beta";
  }
  cfg.model_name = env_or_null("MODEL_NAME") ? env_or_null("MODEL_NAME")
                   : cfg.backend.dialect == WireDialect::openai_chat ? "gpt-4o"
                                                                      : "gemini-2.0-flash";
  return cfg;
}

json openai_request_body(const ChatRequest& request) {
  json messages = json::array();
  if (request.system_text)
    messages.push_back({{"role", "system"}, {"content", *request.system_text}});
  json content = json::array();
  for (const auto& b : request.user_blocks) {
    if (const auto* t = std::get_if<TextBlock>(&b)) {
      content.push_back({{"type", "text"}, {"text", t->text}});
    } else {
      content.push_back({{"type", "image_url"},
                         {"image_url", {{"url", std::get<ImageBlock>(b).data_url}}}});
    }
  }
  messages.push_back({{"role", "user"}, {"content", content}});
  return {{"model", request.model_name},
          {"messages", messages},
          {"temperature", request.temperature},
          {"max_tokens", request.max_output}};
}

BackendReply parse_openai_response(const json& body) {
  BackendReply reply;
  try {
    const auto& msg = body.at("choices").at(0).at("message");
    const auto& content = msg.at("content");
    if (content.is_string()) {
      reply.text = content.get<std::string>();
    } else if (content.is_array()) {
      for (const auto& part : content)
        if (part.contains("text")) reply.text += part["text"].get<std::string>();
    }
    if (body.contains("usage") && body["usage"].is_object()) {
      TokenUsage u;
      u.input_tokens = body["usage"].value("prompt_tokens", 0);
      u.output_tokens = body["usage"].value("completion_tokens", 0);
      reply.usage = u;
    }
  } catch (const json::exception& e) {
    throw TransportError(200, false, std::string("unexpected chat response shape: ") + e.what());
  }
  return reply;
}

json gemini_request_body(const ChatRequest& request) {
  json parts = json::array();
  for (const auto& b : request.user_blocks) {
    if (const auto* t = std::get_if<TextBlock>(&b)) {
      parts.push_back({{"text", t->text}});
    } else {
      const auto& url = std::get<ImageBlock>(b).data_url;
      auto marker = url.find(";base64,");
      parts.push_back({{"inline_data",
                        {{"mime_type", url.substr(5, marker - 5)},
                         {"data", url.substr(marker + 8)}}}});
    }
  }
  json body = {{"contents", json::array({{{"role", "user"}, {"parts", parts}}})},
               {"generationConfig",
                {{"temperature", request.temperature},
                 {"maxOutputTokens", request.max_output}}}};
  if (request.system_text)
    body["systemInstruction"] = {{"parts", json::array({{{"text", *request.system_text}}})}};
  return body;
}

BackendReply parse_gemini_response(const json& body) {
  BackendReply reply;
  try {
    const auto& parts = body.at("candidates").at(0).at("content").at("parts");
    for (const auto& part : parts)
      if (part.contains("text")) reply.text += part["text"].get<std::string>();
    if (body.contains("usageMetadata") && body["usageMetadata"].is_object()) {
      TokenUsage u;
      u.input_tokens = body["usageMetadata"].value("promptTokenCount", 0);
      u.output_tokens = body["usageMetadata"].value("candidatesTokenCount", 0);
      reply.usage = u;
    }
  } catch (const json::exception& e) {
    throw TransportError(200, false,
                         std::string("unexpected generate-content response shape: ") + e.what());
  }
  return reply;
}

HttpChatBackend::HttpChatBackend(HttpBackendConfig config) : config_(std::move(config)) {
  (void)split_url(config_.base_url);
}

BackendReply HttpChatBackend::complete(const ChatRequest& request) {
  if (config_.dialect == WireDialect::openai_chat) {
    httplib::Headers headers = {{"Authorization", "Bearer " + config_.api_key}};
    return parse_openai_response(
        post_json(config_, "/chat/completions", headers, openai_request_body(request)));
  }
  httplib::Headers headers = {{"x-goog-api-key", config_.api_key}};
  return parse_gemini_response(post_json(
      config_, "/models/" + request.model_name + ":generateContent", headers,
      gemini_request_body(request)));
}

HttpEmbedder::HttpEmbedder(HttpBackendConfig config, std::string model)
    : config_(std::move(config)), model_(std::move(model)) {}

std::vector<double> HttpEmbedder::embed(const std::string& text) {
  httplib::Headers headers = {{"Authorization", "Bearer " + config_.api_key}};
  auto body = post_json(config_, "/embeddings", headers,
                        {{"model", model_}, {"input", text}});
  try {
    return body.at("data").at(0).at("embedding").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw TransportError(200, false, std::string("unexpected embeddings response: ") + e.what());
  }
}

}  // namespace cadrag
