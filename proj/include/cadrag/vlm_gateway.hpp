#pragma once

// Chat-style vision-language model access: request model, retry policy,
// bounded parallel fan-out and record/replay backends.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "cadrag/error.hpp"

namespace cadrag {

struct TextBlock {
  std::string text;
  bool operator==(const TextBlock&) const = default;
};

struct ImageBlock {
  std::string data_url;
  bool operator==(const ImageBlock&) const = default;
};

using ContentBlock = std::variant<TextBlock, ImageBlock>;

struct ChatRequest {
  std::optional<std::string> system_text;
  std::vector<ContentBlock> user_blocks;
  std::string model_name;
  double temperature = 0.0;
  int max_output = 1024;

  void add_text(std::string text) { user_blocks.push_back(TextBlock{std::move(text)}); }
  void add_image(std::string data_url) {
    user_blocks.push_back(ImageBlock{std::move(data_url)});
  }

  std::size_t image_count() const;
  /// All text blocks joined with "\n" (images omitted).
  std::string joined_text() const;

  /// Throws PreconditionError when there are no user blocks or an image is
  /// not a valid base64 data URL.
  void validate() const;

  bool operator==(const ChatRequest&) const = default;
};

/// Prompt size surfaced to callers; no cap is enforced.
struct PromptSize {
  std::size_t text_chars = 0;
  std::size_t image_count = 0;
  std::size_t image_bytes = 0;
};
PromptSize prompt_size(const ChatRequest& request);

struct TokenUsage {
  std::int64_t input_tokens = 0;
  std::int64_t output_tokens = 0;
};

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds base_delay{1000};
  double multiplier = 2.0;
  /// Fraction of each delay added or removed uniformly at random.
  double jitter = 0.0;

  /// Throws PreconditionError on an invalid policy.
  void validate() const;
  /// Delay before retry number `retry` (1-based), ignoring jitter.
  std::chrono::milliseconds nominal_delay(int retry) const;
};

struct ModelResponse {
  std::string text;
  std::optional<TokenUsage> usage;
  std::chrono::milliseconds latency{0};
  int attempt_count = 1;
};

struct BackendReply {
  std::string text;
  std::optional<TokenUsage> usage;
};

/// Failure reported by a backend. `status` is the HTTP status when one
/// exists (0 for connection-level failures).
class TransportError : public Error {
 public:
  TransportError(int status, bool retryable, const std::string& what)
      : Error(what), status_(status), retryable_(retryable) {}

  int status() const noexcept { return status_; }
  bool retryable() const noexcept { return retryable_; }

  /// 429, 5xx and connection failures retry; other 4xx do not.
  static bool is_retryable_status(int status);
  static TransportError from_status(int status, const std::string& body);

 private:
  int status_;
  bool retryable_;
};

class RetryExhaustedError : public Error {
 public:
  RetryExhaustedError(int attempts, int last_status, const std::string& cause)
      : Error("gave up after " + std::to_string(attempts) +
              " attempts; last error: " + cause),
        attempts_(attempts),
        last_status_(last_status),
        cause_(cause) {}

  int attempts() const noexcept { return attempts_; }
  int last_status() const noexcept { return last_status_; }
  const std::string& cause() const noexcept { return cause_; }

 private:
  int attempts_;
  int last_status_;
  std::string cause_;
};

class ReplayMissError : public TransportError {
 public:
  ReplayMissError(std::string fingerprint, std::string nearest)
      : TransportError(0, false,
                       "no replay record for fingerprint " + fingerprint +
                           (nearest.empty() ? std::string()
                                            : " (nearest recorded: " + nearest + ")")),
        fingerprint_(std::move(fingerprint)),
        nearest_(std::move(nearest)) {}

  const std::string& fingerprint() const noexcept { return fingerprint_; }
  const std::string& nearest() const noexcept { return nearest_; }

 private:
  std::string fingerprint_;
  std::string nearest_;
};

/// A chat backend. Implementations must tolerate concurrent calls.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual BackendReply complete(const ChatRequest& request) = 0;
};

/// Adapts a callable into a backend; handy for scripted backends in tests.
class FunctionBackend : public ChatBackend {
 public:
  using Fn = std::function<BackendReply(const ChatRequest&)>;
  explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}
  BackendReply complete(const ChatRequest& request) override { return fn_(request); }

 private:
  Fn fn_;
};

class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::chrono::steady_clock::time_point now() = 0;
  virtual void sleep_for(std::chrono::milliseconds d) = 0;
};

class SystemClock : public Clock {
 public:
  std::chrono::steady_clock::time_point now() override {
    return std::chrono::steady_clock::now();
  }
  void sleep_for(std::chrono::milliseconds d) override {
    std::this_thread::sleep_for(d);
  }
  static SystemClock& instance();
};

/// Records requested sleeps and advances a virtual time instead of blocking.
class VirtualClock : public Clock {
 public:
  std::chrono::steady_clock::time_point now() override;
  void sleep_for(std::chrono::milliseconds d) override;
  std::vector<std::chrono::milliseconds> sleeps() const;

 private:
  mutable std::mutex mu_;
  std::chrono::steady_clock::time_point t_{};
  std::vector<std::chrono::milliseconds> sleeps_;
};

ModelResponse send_chat(const ChatRequest& request, ChatBackend& backend,
                        const RetryPolicy& policy = {},
                        Clock& clock = SystemClock::instance());

// ---------------------------------------------------------------------------
// Image attachments, encoding helpers and fingerprints.

std::string base64_encode(std::string_view bytes);
/// Throws FormatError on malformed input.
std::string base64_decode(std::string_view text);
std::string sha256_hex(std::string_view bytes);

/// "data:image/<png|jpeg>;base64,<payload>" for a .png/.jpg/.jpeg file.
std::string encode_image_attachment(const std::filesystem::path& path);

struct DecodedDataUrl {
  std::string media_type;
  std::string bytes;
};
DecodedDataUrl decode_data_url(std::string_view data_url);

/// Stable SHA-256 over model name, system text, text blocks and attachment
/// digests, in block order.
std::string request_fingerprint(const ChatRequest& request);

// ---------------------------------------------------------------------------
// Parallel fan-out.

template <typename T>
struct ItemResult {
  std::optional<T> value;
  std::string error;
  std::exception_ptr exception;

  bool ok() const noexcept { return value.has_value(); }
};

/// Applies `task` to every item with at most `worker_limit` tasks in flight.
/// Results come back in input order; a throwing task only fills its own slot.
template <typename Item, typename Fn>
auto parallel_map(const std::vector<Item>& items, std::size_t worker_limit,
                  Fn&& task)
    -> std::vector<ItemResult<std::invoke_result_t<Fn&, const Item&>>> {
  using R = std::invoke_result_t<Fn&, const Item&>;
  if (worker_limit < 1) throw PreconditionError("worker_limit must be >= 1");
  std::vector<ItemResult<R>> results(items.size());
  std::atomic<std::size_t> next{0};

  auto work = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      try {
        results[i].value.emplace(task(items[i]));
      } catch (const std::exception& e) {
        results[i].error = e.what();
        results[i].exception = std::current_exception();
      } catch (...) {
        results[i].error = "unknown exception";
        results[i].exception = std::current_exception();
      }
    }
  };

  std::size_t n_threads = std::min(worker_limit, items.size());
  if (n_threads <= 1) {
    work();
    return results;
  }
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  return results;
}

// ---------------------------------------------------------------------------
// Record / replay.

struct ReplayRecord {
  std::string fingerprint;
  std::string response_text;
};

/// Fingerprint -> canned response. Fingerprints are unique.
class ReplayFixture {
 public:
  ReplayFixture() = default;
  explicit ReplayFixture(std::vector<ReplayRecord> records);

  static ReplayFixture load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const std::vector<ReplayRecord>& records() const noexcept { return records_; }
  const std::string* find(std::string_view fingerprint) const;
  /// Recorded fingerprint with the fewest differing hex digits.
  std::string nearest(std::string_view fingerprint) const;

 private:
  std::vector<ReplayRecord> records_;
  std::map<std::string, std::size_t, std::less<>> by_fp_;
};

class ReplayBackend : public ChatBackend {
 public:
  explicit ReplayBackend(ReplayFixture fixture) : fixture_(std::move(fixture)) {}
  BackendReply complete(const ChatRequest& request) override;

  std::size_t hits() const noexcept { return hits_.load(); }
  std::size_t misses() const noexcept { return misses_.load(); }

 private:
  ReplayFixture fixture_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

std::unique_ptr<ChatBackend> replay_backend(ReplayFixture fixture);

/// Forwards to an inner backend and remembers every successful exchange.
class RecordingBackend : public ChatBackend {
 public:
  explicit RecordingBackend(ChatBackend& inner) : inner_(inner) {}
  BackendReply complete(const ChatRequest& request) override;

  /// Records sorted by fingerprint.
  ReplayFixture fixture() const;

 private:
  ChatBackend& inner_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> records_;
};

}  // namespace cadrag
