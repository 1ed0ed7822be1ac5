#pragma once

// Human review of annotation bundles: an append-only decision log, the
// materialized bundle statuses, and the HTTP service in front of them.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadrag/corpus.hpp"
#include "cadrag/datasetgen.hpp"

namespace cadrag {

enum class Verdict { keep, discard };
std::string_view to_string(Verdict v);
Verdict verdict_from_string(std::string_view s);

/// 1 is a review note; 2-4 are discard reasons.
enum ReasonCode : int {
  kStructureReviewNote = 1,
  kSimilarDescriptions = 2,
  kAssemblyIndistinguishable = 3,
  kOtherAmbiguity = 4,
};
std::string_view reason_name(int code);

struct AnnotationDecision {
  std::string bundle_id;
  Verdict verdict = Verdict::keep;
  std::optional<int> reason_code;
  std::optional<std::string> note;
  std::string annotator_id;
  std::string timestamp;

  /// Throws ValidationError: discard needs reason 2-4, keep allows only 1.
  void validate() const;
  /// Equal apart from the timestamp.
  bool same_payload(const AnnotationDecision& other) const;

  nlohmann::ordered_json to_json() const;
  /// Throws SchemaError on missing or mistyped fields.
  static AnnotationDecision from_json(const nlohmann::ordered_json& j);

  bool operator==(const AnnotationDecision&) const = default;
};

inline constexpr std::string_view kDecisionLogFile = "decisions.jsonl";

/// Folds a decision history into current statuses (last write wins).
std::map<std::string, AnnotationDecision> replay_decisions(
    const std::vector<AnnotationDecision>& log);

struct QueuePage {
  std::vector<AnnotationBundle> items;
  std::size_t total = 0;
  std::optional<std::size_t> next_offset;
};

struct RecordOutcome {
  AnnotationDecision decision;
  bool appended = false;  // false for an idempotent repeat
};

class UnknownBundleError : public Error {
 public:
  using Error::Error;
};

/// Bundles from `<dir>/<id>/bundle.json` plus `<dir>/decisions.jsonl`.
/// Reads run concurrently; writes are serialized.
class AnnotationStore {
 public:
  using TimestampFn = std::function<std::string()>;

  explicit AnnotationStore(fs::path bundles_dir, TimestampFn now = {});

  const fs::path& bundles_dir() const noexcept { return dir_; }
  fs::path log_path() const { return dir_ / std::string(kDecisionLogFile); }

  /// Pending bundles ordered by bundle_id.
  QueuePage queue(std::size_t offset, std::size_t limit) const;
  /// Bundle with its current status applied; nullopt when unknown.
  std::optional<AnnotationBundle> bundle(std::string_view id) const;
  std::vector<AnnotationBundle> all() const;

  /// Throws UnknownBundleError or ValidationError. Appends to the log before
  /// updating memory.
  RecordOutcome record(AnnotationDecision decision);

  std::vector<AnnotationDecision> history() const;
  /// Kept bundles as human-preference spec items, ordered by bundle_id.
  std::vector<SpecItem> export_items() const;
  /// Counts per status and per reason code.
  nlohmann::ordered_json summary() const;

 private:
  AnnotationBundle with_status(const AnnotationBundle& b) const;

  fs::path dir_;
  TimestampFn now_;
  std::map<std::string, AnnotationBundle, std::less<>> bundles_;
  std::vector<AnnotationDecision> log_;
  std::map<std::string, AnnotationDecision, std::less<>> current_;
  mutable std::shared_mutex mu_;
};

std::string utc_timestamp();

inline constexpr int kDefaultAnnotatePort = 8787;

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = kDefaultAnnotatePort;  // 0 picks a free port
  std::optional<fs::path> ui_dir;   // static files mounted at "/"
};

class AnnotateServer {
 public:
  AnnotateServer(AnnotationStore& store, ServeOptions options = {});
  ~AnnotateServer();
  AnnotateServer(const AnnotateServer&) = delete;
  AnnotateServer& operator=(const AnnotateServer&) = delete;

  /// Binds and serves on a background thread; returns the bound port.
  /// Throws IoError when the port cannot be bound.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const noexcept { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace cadrag
