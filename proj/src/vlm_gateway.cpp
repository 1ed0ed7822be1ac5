#include "cadrag/vlm_gateway.hpp"

#include <random>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

constexpr std::string_view kDataUrlPrefix = "data:";
constexpr std::string_view kBase64Marker = ";base64,";

bool is_base64_char(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
         (c >= '0' && c <= '9') || c == '+' || c == '/';
}

}  // namespace

std::size_t ChatRequest::image_count() const {
  return static_cast<std::size_t>(std::count_if(
      user_blocks.begin(), user_blocks.end(),
      [](const ContentBlock& b) { return std::holds_alternative<ImageBlock>(b); }));
}

std::string ChatRequest::joined_text() const {
  std::string out;
  bool first = true;
  for (const auto& b : user_blocks) {
    if (const auto* t = std::get_if<TextBlock>(&b)) {
      if (!first) out += '\n';
      out += t->text;
      first = false;
    }
  }
  return out;
}

void ChatRequest::validate() const {
  if (user_blocks.empty()) throw PreconditionError("chat request has no user blocks");
  for (const auto& b : user_blocks) {
    if (const auto* img = std::get_if<ImageBlock>(&b)) {
      try {
        (void)decode_data_url(img->data_url);
      } catch (const FormatError& e) {
        throw PreconditionError(std::string("invalid image attachment: ") + e.what());
      }
    }
  }
}

PromptSize prompt_size(const ChatRequest& request) {
  PromptSize size;
  if (request.system_text) size.text_chars += request.system_text->size();
  for (const auto& b : request.user_blocks) {
    if (const auto* t = std::get_if<TextBlock>(&b)) {
      size.text_chars += t->text.size();
    } else {
      ++size.image_count;
      size.image_bytes += std::get<ImageBlock>(b).data_url.size();
    }
  }
  return size;
}

void RetryPolicy::validate() const {
  if (max_retries < 0) throw PreconditionError("max_retries must be >= 0");
  if (base_delay.count() <= 0) throw PreconditionError("base_delay must be > 0");
  if (multiplier < 1.0) throw PreconditionError("multiplier must be >= 1");
  if (jitter < 0.0 || jitter > 1.0) throw PreconditionError("jitter must be in [0,1]");
}

std::chrono::milliseconds RetryPolicy::nominal_delay(int retry) const {
  double ms = static_cast<double>(base_delay.count()) *
              std::pow(multiplier, static_cast<double>(retry - 1));
  return std::chrono::milliseconds(static_cast<std::int64_t>(std::llround(ms)));
}

bool TransportError::is_retryable_status(int status) {
  return status == 0 || status == 408 || status == 429 || status >= 500;
}

TransportError TransportError::from_status(int status, const std::string& body) {
  std::string snippet = body.size() > 300 ? body.substr(0, 300) + "..." : body;
  return TransportError(status, is_retryable_status(status),
                        "HTTP " + std::to_string(status) + ": " + snippet);
}

SystemClock& SystemClock::instance() {
  static SystemClock clock;
  return clock;
}

std::chrono::steady_clock::time_point VirtualClock::now() {
  std::lock_guard lock(mu_);
  return t_;
}

void VirtualClock::sleep_for(std::chrono::milliseconds d) {
  std::lock_guard lock(mu_);
  sleeps_.push_back(d);
  t_ += d;
}

std::vector<std::chrono::milliseconds> VirtualClock::sleeps() const {
  std::lock_guard lock(mu_);
  return sleeps_;
}

ModelResponse send_chat(const ChatRequest& request, ChatBackend& backend,
                        const RetryPolicy& policy, Clock& clock) {
  request.validate();
  policy.validate();
  thread_local std::mt19937_64 rng{std::random_device{}()};

  const int max_attempts = policy.max_retries + 1;
  auto start = clock.now();
  for (int attempt = 1;; ++attempt) {
    try {
      auto reply = backend.complete(request);
      ModelResponse resp;
      resp.text = std::move(reply.text);
      resp.usage = reply.usage;
      resp.attempt_count = attempt;
      resp.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
          clock.now() - start);
      return resp;
    } catch (const TransportError& e) {
      if (!e.retryable()) throw;
      if (attempt >= max_attempts)
        throw RetryExhaustedError(attempt, e.status(), e.what());
      auto delay = policy.nominal_delay(attempt);
      if (policy.jitter > 0.0) {
        std::uniform_real_distribution<double> u(-policy.jitter, policy.jitter);
        delay = std::chrono::milliseconds(static_cast<std::int64_t>(
            std::llround(static_cast<double>(delay.count()) * (1.0 + u(rng)))));
      }
      clock.sleep_for(delay);
    }
  }
}

std::string base64_encode(std::string_view bytes) {
  if (bytes.empty()) return {};
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(bytes.data()),
                          static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.empty()) return {};
  if (text.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
  std::size_t pad = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (c == '=') {
      if (i + 2 < text.size()) throw FormatError("misplaced base64 padding");
      ++pad;
    } else if (!is_base64_char(c) || pad) {
      throw FormatError("invalid base64 character");
    }
  }
  std::string out(3 * (text.size() / 4), '\0');
  int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(text.data()),
                          static_cast<int>(text.size()));
  if (n < 0) throw FormatError("invalid base64 payload");
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string encode_image_attachment(const std::filesystem::path& path) {
  auto ext = to_lower_ascii(path.extension().string());
  std::string media;
  if (ext == ".png") media = "image/png";
  else if (ext == ".jpg" || ext == ".jpeg") media = "image/jpeg";
  else throw FormatError("unsupported image extension '" + ext + "' for " + path.string());
  if (!std::filesystem::is_regular_file(path))
    throw IoError("image not found: " + path.string());
  auto bytes = read_file(path);
  return std::string(kDataUrlPrefix) + media + std::string(kBase64Marker) +
         base64_encode(bytes);
}

DecodedDataUrl decode_data_url(std::string_view url) {
  if (url.substr(0, kDataUrlPrefix.size()) != kDataUrlPrefix)
    throw FormatError("not a data URL");
  auto marker = url.find(kBase64Marker);
  if (marker == std::string_view::npos) throw FormatError("data URL is not base64");
  DecodedDataUrl out;
  out.media_type = std::string(url.substr(kDataUrlPrefix.size(), marker - kDataUrlPrefix.size()));
  if (out.media_type != "image/png" && out.media_type != "image/jpeg")
    throw FormatError("unsupported media type " + out.media_type);
  out.bytes = base64_decode(url.substr(marker + kBase64Marker.size()));
  if (out.bytes.empty()) throw FormatError("empty image payload");
  return out;
}

std::string request_fingerprint(const ChatRequest& request) {
  nlohmann::json canon = nlohmann::json::array();
  canon.push_back(request.model_name);
  canon.push_back(request.system_text ? nlohmann::json(*request.system_text)
                                      : nlohmann::json(nullptr));
  for (const auto& b : request.user_blocks) {
    if (const auto* t = std::get_if<TextBlock>(&b)) {
      canon.push_back({"text", t->text});
    } else {
      canon.push_back({"image", sha256_hex(std::get<ImageBlock>(b).data_url)});
    }
  }
  return sha256_hex(
      canon.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace));
}

ReplayFixture::ReplayFixture(std::vector<ReplayRecord> records)
    : records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (!by_fp_.emplace(records_[i].fingerprint, i).second)
      throw SchemaError("duplicate fingerprint in replay fixture: " +
                        records_[i].fingerprint);
  }
}

ReplayFixture ReplayFixture::load(const std::filesystem::path& path) {
  std::vector<ReplayRecord> records;
  for (const auto& row : read_jsonl(path)) {
    if (!row.is_object() || !row.contains("fingerprint") ||
        !row["fingerprint"].is_string() || !row.contains("response_text") ||
        !row["response_text"].is_string())
      throw SchemaError(path.string() +
                        ": replay records need string fields fingerprint and response_text");
    records.push_back({row["fingerprint"].get<std::string>(),
                       row["response_text"].get<std::string>()});
  }
  return ReplayFixture(std::move(records));
}

void ReplayFixture::save(const std::filesystem::path& path) const {
  std::vector<nlohmann::ordered_json> rows;
  for (const auto& r : records_) {
    nlohmann::ordered_json j;
    j["fingerprint"] = r.fingerprint;
    j["response_text"] = r.response_text;
    rows.push_back(std::move(j));
  }
  write_file_atomic(path, to_jsonl(rows));
}

const std::string* ReplayFixture::find(std::string_view fingerprint) const {
  auto it = by_fp_.find(fingerprint);
  return it == by_fp_.end() ? nullptr : &records_[it->second].response_text;
}

std::string ReplayFixture::nearest(std::string_view fingerprint) const {
  std::string best;
  std::size_t best_diff = static_cast<std::size_t>(-1);
  for (const auto& r : records_) {
    std::size_t n = std::max(r.fingerprint.size(), fingerprint.size());
    std::size_t diff = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= r.fingerprint.size() || i >= fingerprint.size() ||
          r.fingerprint[i] != fingerprint[i])
        ++diff;
    }
    if (diff < best_diff) {
      best_diff = diff;
      best = r.fingerprint;
    }
  }
  return best;
}

BackendReply ReplayBackend::complete(const ChatRequest& request) {
  auto fp = request_fingerprint(request);
  if (const auto* text = fixture_.find(fp)) {
    ++hits_;
    return {*text, std::nullopt};
  }
  ++misses_;
  throw ReplayMissError(fp, fixture_.nearest(fp));
}

std::unique_ptr<ChatBackend> replay_backend(ReplayFixture fixture) {
  return std::make_unique<ReplayBackend>(std::move(fixture));
}

BackendReply RecordingBackend::complete(const ChatRequest& request) {
  auto reply = inner_.complete(request);
  auto fp = request_fingerprint(request);
  std::lock_guard lock(mu_);
  records_[fp] = reply.text;
  return reply;
}

ReplayFixture RecordingBackend::fixture() const {
  std::lock_guard lock(mu_);
  std::vector<ReplayRecord> records;
  for (const auto& [fp, text] : records_) records.push_back({fp, text});
  return ReplayFixture(std::move(records));
}

}  // namespace cadrag
