#pragma once

// Error Notebook: graded baseline runs turned into validated, corrected
// reasoning trajectories.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadrag/corpus.hpp"
#include "cadrag/pipeline.hpp"
#include "cadrag/vlm_gateway.hpp"

namespace cadrag {

/// Order-insensitive set equality; duplicates are ignored.
bool grade_prediction(const std::vector<std::string>& predicted,
                      const std::vector<std::string>& gt);

/// Additional correction attempts after the first one.
inline constexpr int kCorrectionRetries = 2;

enum class EntryOrigin { corrected, passthrough };
std::string_view to_string(EntryOrigin o);
EntryOrigin entry_origin_from_string(std::string_view s);

struct NotebookEntry {
  std::string entry_id;
  std::string spec_id;
  std::string assembly_id;
  std::string specification;
  DescriptionMap desc_map;
  std::string corrected_cot;
  std::vector<std::string> final_answer;
  EntryOrigin origin = EntryOrigin::corrected;
  int correction_attempts = 0;

  nlohmann::ordered_json to_json() const;
  static NotebookEntry from_json(const nlohmann::ordered_json& j);

  bool operator==(const NotebookEntry&) const = default;
};

struct ExclusionRecord {
  std::string spec_id;
  std::string reason;
  int attempts = 0;

  nlohmann::ordered_json to_json() const;
  static ExclusionRecord from_json(const nlohmann::ordered_json& j);

  bool operator==(const ExclusionRecord&) const = default;
};

struct ErrorNotebook {
  std::vector<NotebookEntry> entries;
  std::string source_run_id;
  std::string model_name;
  std::vector<ExclusionRecord> exclusions;

  const NotebookEntry* find_spec(std::string_view spec_id) const;
  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }

  /// Unique spec_ids and entry_ids, every corrected_cot answering its
  /// final_answer. Throws ValidationError.
  void validate() const;

  bool operator==(const ErrorNotebook&) const = default;
};

/// `<notebook>.meta.json`
fs::path notebook_meta_path(const fs::path& notebook_path);

/// Writes the entries as JSONL plus the metadata sidecar (run id, model,
/// exclusions). Both writes are atomic.
void save_notebook(const ErrorNotebook& notebook, const fs::path& path);
/// Loads and validates. The sidecar is optional.
ErrorNotebook load_notebook(const fs::path& path);

/// Throws PreconditionError when prev_cot, spec or gt is empty. Attempts
/// after the first carry a short reminder so each request is distinct.
ChatRequest build_correction_prompt(const fs::path& assembly_image,
                                    const DescriptionMap& descriptions,
                                    std::string_view specification,
                                    std::string_view prev_cot,
                                    const std::vector<std::string>& gt,
                                    const ModelSettings& settings = {}, int attempt = 1);

struct ValidatedTrajectory {
  std::string text;
  std::vector<std::string> answer;
};

/// Throws ValidationError unless the text's final answer equals gt.
ValidatedTrajectory validate_corrected_trajectory(std::string_view text,
                                                  const std::vector<std::string>& gt);

/// Deterministic id for a results file's content.
std::string run_id_for(std::string_view results_bytes);

/// Grades each result; correct ones pass through, wrong ones go through up to
/// 1 + kCorrectionRetries correction attempts. Items that never validate are
/// recorded as exclusions. Throws ConsistencyError for a result without a
/// spec item.
ErrorNotebook build_notebook(const std::vector<RetrievalResult>& baseline,
                             const std::vector<SpecItem>& specs, const CorpusIndex& corpus,
                             ChatBackend& backend, const ModelSettings& settings = {},
                             std::string source_run_id = {});

}  // namespace cadrag
