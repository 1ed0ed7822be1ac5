#pragma once

// Scoring, part-count bucketed reports and exemplar ablation sweeps.

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadrag/corpus.hpp"
#include "cadrag/error_notebook.hpp"
#include "cadrag/pipeline.hpp"
#include "cadrag/rag_engine.hpp"

namespace cadrag {

struct Tally {
  long long correct = 0;
  long long total = 0;

  /// Accuracy in tenths of a percent, rounded half-up. nullopt when empty.
  std::optional<long long> tenths() const;
  bool operator==(const Tally&) const = default;
};

/// "33.6", or "—" for an empty tally.
std::string format_percent(const Tally& t);
inline constexpr std::string_view kEmptyCell = "—";

struct ItemVerdict {
  std::string spec_id;
  std::string assembly_id;
  long long part_count = 0;
  PartCountBucket bucket = PartCountBucket::LT10;
  bool correct = false;
  ParseStatus parse_status = ParseStatus::failed;
  double precision = 0.0;
  double recall = 0.0;
  double jaccard = 0.0;

  bool operator==(const ItemVerdict&) const = default;
};

struct EvalConfig {
  std::string run_id;
  std::string model_name;
  std::optional<std::size_t> k;
  std::optional<std::string> mode;

  bool operator==(const EvalConfig&) const = default;
};

struct EvalReport {
  EvalConfig config;
  std::vector<ItemVerdict> items;
  Tally overall;
  std::array<Tally, 4> buckets{};
  double mean_precision = 0.0;
  double mean_recall = 0.0;
  double mean_jaccard = 0.0;

  const Tally& bucket(PartCountBucket b) const { return buckets[static_cast<int>(b)]; }
  /// Throws ConsistencyError when bucket sums disagree with the overall tally.
  void check() const;
  nlohmann::ordered_json to_json() const;

  bool operator==(const EvalReport&) const = default;
};

/// Builds a report from verdicts alone (used by score_run and for fixtures).
EvalReport summarize(std::vector<ItemVerdict> items, EvalConfig config = {});

using PartCounts = std::map<std::string, long long, std::less<>>;
PartCounts catalog_part_counts(const CorpusIndex& corpus);

/// Results are graded against their spec items in results order. Throws
/// ConsistencyError for a result without a spec or an assembly without a
/// part count.
EvalReport score_run(const std::vector<RetrievalResult>& results,
                     const std::vector<SpecItem>& specs, const PartCounts& counts,
                     EvalConfig config = {});
EvalReport score_run(const std::vector<RetrievalResult>& results,
                     const std::vector<SpecItem>& specs, const CorpusIndex& corpus,
                     EvalConfig config = {});

struct CountCheck {
  std::string assembly_id;
  long long catalog = 0;
  std::optional<long long> parsed;
  std::string note;  // empty when the counts agree
};

/// Catalog part counts against the PRODUCT inventory of assembly.step, for
/// assemblies that have one. Never throws for parse failures; they become
/// notes.
std::vector<CountCheck> cross_check_part_counts(const CorpusIndex& corpus);

enum class ReportFormat { markdown, csv };
ReportFormat report_format_from_string(std::string_view s);

std::string emit_markdown(const EvalReport& report);
/// group,bucket,correct,total,accuracy; empty accuracy for empty buckets.
std::string emit_csv(const EvalReport& report);
std::string emit_report(const EvalReport& report, ReportFormat format);

struct AblationCell {
  std::size_t count = 0;
  ExemplarMode mode = ExemplarMode::cot;
  std::optional<EvalReport> report;
  std::optional<std::string> error;
  bool from_cache = false;
};

struct AblationTable {
  std::vector<AblationCell> cells;
};

inline const std::vector<std::size_t> kDefaultAblationCounts = {1, 5, 10, 20, 50};

/// `cell_k<count>_<mode>.jsonl`
std::string ablation_cell_file(std::size_t count, ExemplarMode mode);

/// One rag_infer sweep per (count, mode). Results of finished cells are
/// cached in `cache_dir` and reused on later runs. A failing cell is recorded
/// and the sweep continues.
AblationTable run_ablation(const std::vector<SpecItem>& specs, const CorpusIndex& corpus,
                           const ErrorNotebook& notebook, ChatBackend& backend,
                           const ModelSettings& settings,
                           const std::vector<std::size_t>& counts,
                           const std::vector<ExemplarMode>& modes,
                           const std::optional<fs::path>& cache_dir = std::nullopt);

std::string emit_markdown(const AblationTable& table);
std::string emit_csv(const AblationTable& table);
std::string emit_report(const AblationTable& table, ReportFormat format);

}  // namespace cadrag
