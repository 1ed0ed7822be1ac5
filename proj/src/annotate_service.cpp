#include "cadrag/annotate_service.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <thread>

#include "httplib.h"

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

void append_line_durably(const fs::path& path, const std::string& line) {
  fs::create_directories(path.parent_path());
  FILE* f = std::fopen(path.c_str(), "ab");
  if (!f) throw IoError("cannot open " + path.string() + " for append");
  bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size();
  ok = std::fflush(f) == 0 && ok;
  ok = ::fsync(::fileno(f)) == 0 && ok;
  ok = std::fclose(f) == 0 && ok;
  if (!ok) throw IoError("failed to append to " + path.string());
}

const char* content_type_for(const fs::path& p) {
  auto ext = to_lower_ascii(p.extension().string());
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  return "application/octet-stream";
}

nlohmann::ordered_json error_body(std::string_view message) {
  return {{"error", std::string(message)}};
}

void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::size_t query_size(const httplib::Request& req, const char* key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  auto v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ValidationError(std::string("query parameter '") + key + "' must be a non-negative integer");
  }
}

nlohmann::ordered_json queue_summary(const AnnotationBundle& b) {
  return {{"bundle_id", b.bundle_id},
          {"assembly_id", b.assembly_id},
          {"specification", b.specification},
          {"flags", b.flags}};
}

}  // namespace

std::string_view to_string(Verdict v) { return v == Verdict::keep ? "keep" : "discard"; }

Verdict verdict_from_string(std::string_view s) {
  if (s == "keep") return Verdict::keep;
  if (s == "discard") return Verdict::discard;
  throw ValidationError("verdict must be 'keep' or 'discard', got '" + std::string(s) + "'");
}

std::string_view reason_name(int code) {
  switch (code) {
    case kStructureReviewNote: return "structure_review_note";
    case kSimilarDescriptions: return "similar_descriptions";
    case kAssemblyIndistinguishable: return "assembly_indistinguishable";
    case kOtherAmbiguity: return "other_ambiguity";
  }
  return "unknown";
}

void AnnotationDecision::validate() const {
  if (bundle_id.empty()) throw ValidationError("bundle_id is required");
  if (trim_view(annotator_id).empty()) throw ValidationError("annotator_id is required");
  if (verdict == Verdict::discard) {
    if (!reason_code) throw ValidationError("discard requires a reason_code");
    if (*reason_code < kSimilarDescriptions || *reason_code > kOtherAmbiguity)
      throw ValidationError("discard reason_code must be 2, 3 or 4");
  } else if (reason_code && *reason_code != kStructureReviewNote) {
    throw ValidationError("keep accepts only reason_code 1");
  }
}

bool AnnotationDecision::same_payload(const AnnotationDecision& o) const {
  return bundle_id == o.bundle_id && verdict == o.verdict && reason_code == o.reason_code &&
         note == o.note && annotator_id == o.annotator_id;
}

nlohmann::ordered_json AnnotationDecision::to_json() const {
  nlohmann::ordered_json j;
  j["bundle_id"] = bundle_id;
  j["verdict"] = std::string(to_string(verdict));
  j["reason_code"] = reason_code ? nlohmann::ordered_json(*reason_code)
                                 : nlohmann::ordered_json(nullptr);
  if (note) j["note"] = *note;
  j["annotator_id"] = annotator_id;
  j["timestamp"] = timestamp;
  return j;
}

AnnotationDecision AnnotationDecision::from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw SchemaError("decision must be a JSON object");
  AnnotationDecision d;
  try {
    d.bundle_id = j.at("bundle_id").get<std::string>();
    d.verdict = verdict_from_string(j.at("verdict").get<std::string>());
    if (j.contains("reason_code") && !j["reason_code"].is_null())
      d.reason_code = j["reason_code"].get<int>();
    if (j.contains("note") && !j["note"].is_null()) d.note = j["note"].get<std::string>();
    d.annotator_id = j.value("annotator_id", "");
    d.timestamp = j.value("timestamp", "");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed decision: ") + e.what());
  }
  return d;
}

std::map<std::string, AnnotationDecision> replay_decisions(
    const std::vector<AnnotationDecision>& log) {
  std::map<std::string, AnnotationDecision> current;
  for (const auto& d : log) current.insert_or_assign(d.bundle_id, d);
  return current;
}

std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  ::gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

AnnotationStore::AnnotationStore(fs::path bundles_dir, TimestampFn now)
    : dir_(std::move(bundles_dir)), now_(now ? std::move(now) : TimestampFn(utc_timestamp)) {
  for (auto& b : load_bundles(dir_)) {
    auto id = b.bundle_id;
    bundles_.emplace(std::move(id), std::move(b));
  }
  if (fs::is_regular_file(log_path()))
    for (const auto& row : read_jsonl(log_path()))
      log_.push_back(AnnotationDecision::from_json(row));
  for (auto& [id, d] : replay_decisions(log_)) current_.emplace(id, d);
}

AnnotationBundle AnnotationStore::with_status(const AnnotationBundle& b) const {
  AnnotationBundle out = b;
  auto it = current_.find(b.bundle_id);
  if (it == current_.end()) return out;
  out.status = it->second.verdict == Verdict::keep ? BundleStatus::kept : BundleStatus::discarded;
  out.reason_code = it->second.reason_code;
  return out;
}

QueuePage AnnotationStore::queue(std::size_t offset, std::size_t limit) const {
  std::shared_lock lock(mu_);
  std::vector<const AnnotationBundle*> pending;
  for (const auto& [id, b] : bundles_)
    if (!current_.count(id)) pending.push_back(&b);
  QueuePage page;
  page.total = pending.size();
  for (std::size_t i = offset; i < pending.size() && page.items.size() < limit; ++i)
    page.items.push_back(*pending[i]);
  std::size_t end = offset + page.items.size();
  if (end < pending.size()) page.next_offset = end;
  return page;
}

std::optional<AnnotationBundle> AnnotationStore::bundle(std::string_view id) const {
  std::shared_lock lock(mu_);
  auto it = bundles_.find(id);
  if (it == bundles_.end()) return std::nullopt;
  return with_status(it->second);
}

std::vector<AnnotationBundle> AnnotationStore::all() const {
  std::shared_lock lock(mu_);
  std::vector<AnnotationBundle> out;
  for (const auto& [id, b] : bundles_) out.push_back(with_status(b));
  return out;
}

RecordOutcome AnnotationStore::record(AnnotationDecision decision) {
  std::unique_lock lock(mu_);
  if (!bundles_.count(decision.bundle_id))
    throw UnknownBundleError("unknown bundle '" + decision.bundle_id + "'");
  decision.validate();
  auto it = current_.find(decision.bundle_id);
  if (it != current_.end() && it->second.same_payload(decision)) return {it->second, false};
  decision.timestamp = now_();
  append_line_durably(log_path(), to_jsonl({decision.to_json()}));
  log_.push_back(decision);
  current_.insert_or_assign(decision.bundle_id, decision);
  return {decision, true};
}

std::vector<AnnotationDecision> AnnotationStore::history() const {
  std::shared_lock lock(mu_);
  return log_;
}

std::vector<SpecItem> AnnotationStore::export_items() const {
  std::shared_lock lock(mu_);
  std::vector<SpecItem> out;
  for (const auto& [id, b] : bundles_) {
    auto it = current_.find(id);
    if (it == current_.end() || it->second.verdict != Verdict::keep) continue;
    SpecItem item;
    item.spec_id = b.spec_id;
    item.assembly_id = b.assembly_id;
    item.specification = b.specification;
    item.gt_filenames = b.gt_filenames;
    item.source = SpecSource::human_preference;
    out.push_back(std::move(item));
  }
  return out;
}

nlohmann::ordered_json AnnotationStore::summary() const {
  std::shared_lock lock(mu_);
  std::size_t kept = 0, discarded = 0;
  std::map<int, std::size_t> reasons;
  for (const auto& [id, d] : current_) {
    if (!bundles_.count(id)) continue;
    (d.verdict == Verdict::keep ? kept : discarded)++;
    if (d.reason_code) ++reasons[*d.reason_code];
  }
  nlohmann::ordered_json j;
  j["total"] = bundles_.size();
  j["pending"] = bundles_.size() - kept - discarded;
  j["kept"] = kept;
  j["discarded"] = discarded;
  j["reasons"] = nlohmann::ordered_json::object();
  for (int code = kStructureReviewNote; code <= kOtherAmbiguity; ++code)
    j["reasons"][std::to_string(code)] = {{"name", std::string(reason_name(code))},
                                          {"count", reasons[code]}};
  return j;
}

struct AnnotateServer::Impl {
  AnnotationStore& store;
  ServeOptions options;
  httplib::Server server;
  std::thread thread;

  Impl(AnnotationStore& s, ServeOptions o) : store(s), options(std::move(o)) { routes(); }

  void routes() {
    server.Get("/queue", [this](const httplib::Request& req, httplib::Response& res) {
      std::size_t offset, limit;
      try {
        offset = query_size(req, "offset", 0);
        limit = query_size(req, "limit", 50);
      } catch (const ValidationError& e) {
        return send_json(res, 400, error_body(e.what()));
      }
      auto page = store.queue(offset, limit);
      nlohmann::ordered_json body;
      body["items"] = nlohmann::ordered_json::array();
      for (const auto& b : page.items) body["items"].push_back(queue_summary(b));
      body["total"] = page.total;
      body["next_offset"] = page.next_offset ? nlohmann::ordered_json(*page.next_offset)
                                             : nlohmann::ordered_json(nullptr);
      send_json(res, 200, body);
    });

    server.Get(R"(/bundle/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto b = store.bundle(req.matches[1].str());
      if (!b) return send_json(res, 404, error_body("unknown bundle"));
      auto body = b->to_json();
      body.erase("assembly_image");
      body.erase("merged_image");
      bool merged = b->merged_image && fs::is_regular_file(*b->merged_image);
      body["assembly_image_url"] = "/assets/" + b->bundle_id + "/assembly";
      body["merged_image_url"] = merged ? nlohmann::ordered_json("/assets/" + b->bundle_id + "/merged")
                                        : nlohmann::ordered_json(nullptr);
      body["merged_image_available"] = merged;
      send_json(res, 200, body);
    });

    server.Get(R"(/assets/([^/]+)/(assembly|merged))",
               [this](const httplib::Request& req, httplib::Response& res) {
                 auto b = store.bundle(req.matches[1].str());
                 if (!b) return send_json(res, 404, error_body("unknown bundle"));
                 std::optional<fs::path> path;
                 if (req.matches[2].str() == "assembly") path = b->assembly_image;
                 else path = b->merged_image;
                 if (!path || !fs::is_regular_file(*path))
                   return send_json(res, 404, error_body("image unavailable"));
                 res.status = 200;
                 res.set_content(read_file(*path), content_type_for(*path));
               });

    server.Post("/decision", [this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::ordered_json body;
      try {
        body = nlohmann::ordered_json::parse(req.body);
      } catch (const nlohmann::json::exception& e) {
        return send_json(res, 400, error_body(std::string("invalid JSON: ") + e.what()));
      }
      try {
        auto outcome = store.record(AnnotationDecision::from_json(body));
        auto b = store.bundle(outcome.decision.bundle_id);
        send_json(res, 200,
                  {{"decision", outcome.decision.to_json()},
                   {"status", std::string(to_string(b->status))},
                   {"appended", outcome.appended}});
      } catch (const UnknownBundleError& e) {
        send_json(res, 404, error_body(e.what()));
      } catch (const ValidationError& e) {
        send_json(res, 422, error_body(e.what()));
      } catch (const SchemaError& e) {
        send_json(res, 400, error_body(e.what()));
      } catch (const IoError& e) {
        send_json(res, 500, error_body(e.what()));
      }
    });

    server.Get("/export", [this](const httplib::Request&, httplib::Response& res) {
      std::vector<nlohmann::ordered_json> rows;
      for (const auto& item : store.export_items()) rows.push_back(item.to_json());
      res.status = 200;
      res.set_content(to_jsonl(rows), "application/x-ndjson");
    });

    server.Get("/summary", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, store.summary());
    });

    if (options.ui_dir && !server.set_mount_point("/", options.ui_dir->string()))
      throw IoError("UI directory not found: " + options.ui_dir->string());
  }

  int bind() {
    int port = options.port == 0 ? server.bind_to_any_port(options.host)
                                 : (server.bind_to_port(options.host, options.port)
                                        ? options.port
                                        : -1);
    if (port < 0)
      throw IoError("cannot bind " + options.host + ":" + std::to_string(options.port));
    return port;
  }
};

AnnotateServer::AnnotateServer(AnnotationStore& store, ServeOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(options))) {}

AnnotateServer::~AnnotateServer() { stop(); }

int AnnotateServer::start() {
  port_ = impl_->bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void AnnotateServer::run() {
  port_ = impl_->bind();
  impl_->server.listen_after_bind();
}

void AnnotateServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace cadrag
