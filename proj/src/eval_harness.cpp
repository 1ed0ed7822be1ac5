#include "cadrag/eval_harness.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "cadrag/step_parser.hpp"
#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string fraction(const Tally& t) {
  return std::to_string(t.correct) + "/" + std::to_string(t.total);
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_percent(const Tally& t) {
  return t.total ? format_percent(t) : std::string();
}

void csv_rows(std::string& out, const std::string& group, const EvalReport& r) {
  auto row = [&](std::string_view bucket, const Tally& t) {
    out += csv_field(group) + "," + std::string(bucket) + "," + std::to_string(t.correct) +
           "," + std::to_string(t.total) + "," + csv_percent(t) + "\n";
  };
  row("overall", r.overall);
  for (auto b : kAllBuckets) row(bucket_key(b), r.bucket(b));
}

std::string percent_row(const EvalReport& r) {
  std::string out = "| " + format_percent(r.overall) + " |";
  for (auto b : kAllBuckets) out += " " + format_percent(r.bucket(b)) + " |";
  return out;
}

std::string bucket_header() {
  std::string out = "| Overall |";
  for (auto b : kAllBuckets) out += " " + std::string(bucket_label(b)) + " |";
  return out;
}

std::string cell_group(const AblationCell& c) {
  return "k" + std::to_string(c.count) + "_" + std::string(to_string(c.mode));
}

}  // namespace

std::optional<long long> Tally::tenths() const {
  if (total <= 0) return std::nullopt;
  // round(1000 * correct / total) with halves going up, in integers.
  return (2000 * correct + total) / (2 * total);
}

std::string format_percent(const Tally& t) {
  auto v = t.tenths();
  if (!v) return std::string(kEmptyCell);
  return std::to_string(*v / 10) + "." + std::to_string(*v % 10);
}

void EvalReport::check() const {
  Tally sum;
  for (const auto& b : buckets) {
    sum.correct += b.correct;
    sum.total += b.total;
  }
  if (sum != overall)
    throw ConsistencyError("bucket tallies " + fraction(sum) + " disagree with overall " +
                           fraction(overall));
  if (static_cast<long long>(items.size()) != overall.total)
    throw ConsistencyError("item count disagrees with overall total");
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["run_id"] = config.run_id;
  j["model"] = config.model_name;
  j["k"] = config.k ? nlohmann::ordered_json(*config.k) : nlohmann::ordered_json(nullptr);
  j["mode"] = config.mode ? nlohmann::ordered_json(*config.mode) : nlohmann::ordered_json(nullptr);
  auto tally = [](const Tally& t) {
    nlohmann::ordered_json o;
    o["correct"] = t.correct;
    o["total"] = t.total;
    o["accuracy"] = t.total ? nlohmann::ordered_json(format_percent(t))
                            : nlohmann::ordered_json(nullptr);
    return o;
  };
  j["overall"] = tally(overall);
  for (auto b : kAllBuckets) j["buckets"][std::string(bucket_key(b))] = tally(bucket(b));
  j["diagnostics"] = {{"mean_precision", fixed3(mean_precision)},
                      {"mean_recall", fixed3(mean_recall)},
                      {"mean_jaccard", fixed3(mean_jaccard)}};
  j["items"] = nlohmann::ordered_json::array();
  for (const auto& v : items)
    j["items"].push_back({{"spec_id", v.spec_id},
                          {"assembly_id", v.assembly_id},
                          {"part_count", v.part_count},
                          {"bucket", std::string(bucket_key(v.bucket))},
                          {"correct", v.correct},
                          {"parse_status", std::string(to_string(v.parse_status))}});
  return j;
}

EvalReport summarize(std::vector<ItemVerdict> items, EvalConfig config) {
  EvalReport r;
  r.config = std::move(config);
  r.items = std::move(items);
  for (const auto& v : r.items) {
    auto& b = r.buckets[static_cast<int>(v.bucket)];
    ++b.total;
    ++r.overall.total;
    if (v.correct) {
      ++b.correct;
      ++r.overall.correct;
    }
    r.mean_precision += v.precision;
    r.mean_recall += v.recall;
    r.mean_jaccard += v.jaccard;
  }
  if (!r.items.empty()) {
    auto n = static_cast<double>(r.items.size());
    r.mean_precision /= n;
    r.mean_recall /= n;
    r.mean_jaccard /= n;
  }
  return r;
}

PartCounts catalog_part_counts(const CorpusIndex& corpus) {
  PartCounts counts;
  for (const auto& a : corpus.assemblies())
    counts[a.assembly_id] = static_cast<long long>(a.part_count());
  return counts;
}

EvalReport score_run(const std::vector<RetrievalResult>& results,
                     const std::vector<SpecItem>& specs, const PartCounts& counts,
                     EvalConfig config) {
  std::map<std::string, const SpecItem*, std::less<>> by_id;
  for (const auto& s : specs) by_id[s.spec_id] = &s;
  std::vector<ItemVerdict> items;
  items.reserve(results.size());
  for (const auto& r : results) {
    auto it = by_id.find(r.spec_id);
    if (it == by_id.end())
      throw ConsistencyError("result for unknown spec_id '" + r.spec_id + "'");
    const auto& spec = *it->second;
    auto pc = counts.find(spec.assembly_id);
    if (pc == counts.end())
      throw ConsistencyError("no part count for assembly '" + spec.assembly_id + "'");
    ItemVerdict v;
    v.spec_id = spec.spec_id;
    v.assembly_id = spec.assembly_id;
    v.part_count = pc->second;
    v.bucket = bucket_of(pc->second);
    v.parse_status = r.parse_status;
    std::vector<std::string> predicted =
        r.error || r.parse_status == ParseStatus::failed ? std::vector<std::string>{}
                                                         : r.predicted;
    v.correct = (r.error || r.parse_status == ParseStatus::failed)
                    ? false
                    : grade_prediction(predicted, spec.gt_filenames);
    std::set<std::string> p(predicted.begin(), predicted.end());
    std::set<std::string> g(spec.gt_filenames.begin(), spec.gt_filenames.end());
    std::size_t inter = 0;
    for (const auto& x : p) inter += g.count(x);
    std::size_t uni = p.size() + g.size() - inter;
    v.precision = p.empty() ? 0.0 : static_cast<double>(inter) / p.size();
    v.recall = g.empty() ? 0.0 : static_cast<double>(inter) / g.size();
    v.jaccard = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
    items.push_back(std::move(v));
  }
  auto report = summarize(std::move(items), std::move(config));
  report.check();
  return report;
}

EvalReport score_run(const std::vector<RetrievalResult>& results,
                     const std::vector<SpecItem>& specs, const CorpusIndex& corpus,
                     EvalConfig config) {
  return score_run(results, specs, catalog_part_counts(corpus), std::move(config));
}

std::vector<CountCheck> cross_check_part_counts(const CorpusIndex& corpus) {
  std::vector<CountCheck> out;
  for (const auto& a : corpus.assemblies()) {
    if (!a.assembly_step) continue;
    CountCheck c;
    c.assembly_id = a.assembly_id;
    c.catalog = static_cast<long long>(a.part_count());
    try {
      c.parsed = static_cast<long long>(step::part_count(step::parse_p21_file(*a.assembly_step)));
      if (*c.parsed != c.catalog)
        c.note = "catalog lists " + std::to_string(c.catalog) + " parts, STEP declares " +
                 std::to_string(*c.parsed);
    } catch (const Error& e) {
      c.note = std::string("STEP not readable: ") + e.what();
    }
    out.push_back(std::move(c));
  }
  return out;
}

ReportFormat report_format_from_string(std::string_view s) {
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  if (s == "csv") return ReportFormat::csv;
  throw PreconditionError("unknown report format '" + std::string(s) + "'");
}

std::string emit_markdown(const EvalReport& r) {
  std::string out;
  if (!r.config.run_id.empty()) out += "Run: " + r.config.run_id + "\n";
  out += "Model: " + (r.config.model_name.empty() ? std::string("unknown") : r.config.model_name) +
         "\n";
  if (r.config.k) out += "Exemplars: " + std::to_string(*r.config.k) + "\n";
  if (r.config.mode) out += "Mode: " + *r.config.mode + "\n";
  out += "\n" + bucket_header() + "\n|---|---|---|---|---|\n" + percent_row(r) + "\n";
  out += "| " + fraction(r.overall) + " |";
  for (auto b : kAllBuckets) out += " " + fraction(r.bucket(b)) + " |";
  out += "\n\nDiagnostics (not used for accuracy): mean precision " + fixed3(r.mean_precision) +
         ", mean recall " + fixed3(r.mean_recall) + ", mean Jaccard " + fixed3(r.mean_jaccard) +
         "\n";
  return out;
}

std::string emit_csv(const EvalReport& r) {
  std::string out = "group,bucket,correct,total,accuracy\n";
  csv_rows(out, r.config.run_id.empty() ? std::string("run") : r.config.run_id, r);
  return out;
}

std::string emit_report(const EvalReport& report, ReportFormat format) {
  return format == ReportFormat::csv ? emit_csv(report) : emit_markdown(report);
}

std::string ablation_cell_file(std::size_t count, ExemplarMode mode) {
  return "cell_k" + std::to_string(count) + "_" + std::string(to_string(mode)) + ".jsonl";
}

AblationTable run_ablation(const std::vector<SpecItem>& specs, const CorpusIndex& corpus,
                           const ErrorNotebook& notebook, ChatBackend& backend,
                           const ModelSettings& settings,
                           const std::vector<std::size_t>& counts,
                           const std::vector<ExemplarMode>& modes,
                           const std::optional<fs::path>& cache_dir) {
  if (notebook.empty()) throw PreconditionError("ablation needs a non-empty notebook");
  SpecIndex index(notebook);
  auto part_counts = catalog_part_counts(corpus);
  std::vector<std::string> expected_ids;
  for (const auto& s : specs) expected_ids.push_back(s.spec_id);

  AblationTable table;
  for (auto count : counts) {
    for (auto mode : modes) {
      AblationCell cell;
      cell.count = count;
      cell.mode = mode;
      EvalConfig config{notebook.source_run_id, settings.model_name, count,
                        std::string(to_string(mode))};
      try {
        std::optional<std::vector<RetrievalResult>> results;
        std::optional<fs::path> cache_file;
        if (cache_dir) {
          cache_file = *cache_dir / ablation_cell_file(count, mode);
          if (fs::is_regular_file(*cache_file)) {
            auto cached = load_results(*cache_file);
            std::vector<std::string> ids;
            for (const auto& r : cached) ids.push_back(r.spec_id);
            if (ids == expected_ids) {
              results = std::move(cached);
              cell.from_cache = true;
            }
          }
        }
        if (!results) {
          results = rag_infer_all(corpus, specs, notebook, index, backend, settings, count, mode);
          if (cache_file) save_results(*results, *cache_file);
        }
        cell.report = score_run(*results, specs, part_counts, config);
      } catch (const Error& e) {
        cell.error = e.what();
      }
      table.cells.push_back(std::move(cell));
    }
  }
  return table;
}

std::string emit_markdown(const AblationTable& table) {
  std::string out = "| Exemplars | Mode " + bucket_header() + "\n|---|---|---|---|---|---|---|\n";
  for (const auto& c : table.cells) {
    out += "| " + std::to_string(c.count) + " | " + std::string(to_string(c.mode)) + " ";
    if (c.report) {
      out += percent_row(*c.report) + "\n";
    } else {
      out += "|";
      for (int i = 0; i < 5; ++i) out += " " + std::string(kEmptyCell) + " |";
      out += "\n";
    }
  }
  bool any_error = false;
  for (const auto& c : table.cells) {
    if (!c.error) continue;
    if (!any_error) out += "\nFailed cells:\n";
    any_error = true;
    out += "- " + cell_group(c) + ": " + *c.error + "\n";
  }
  return out;
}

std::string emit_csv(const AblationTable& table) {
  std::string out = "group,bucket,correct,total,accuracy\n";
  for (const auto& c : table.cells)
    if (c.report) csv_rows(out, cell_group(c), *c.report);
  return out;
}

std::string emit_report(const AblationTable& table, ReportFormat format) {
  return format == ReportFormat::csv ? emit_csv(table) : emit_markdown(table);
}

}  // namespace cadrag
