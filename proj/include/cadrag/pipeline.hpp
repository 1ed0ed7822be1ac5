#pragma once

// Two-stage part retrieval: per-part description generation, then
// specification-aware retrieval with chain-of-thought output.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadrag/corpus.hpp"
#include "cadrag/prompt_template.hpp"
#include "cadrag/vlm_gateway.hpp"

namespace cadrag {

/// Settings shared by every model-calling stage.
struct ModelSettings {
  std::string model_name = "gpt-4o";
  double temperature = 0.0;
  int describe_max_output = 256;
  int answer_max_output = 2048;
  std::size_t workers = 4;
  RetryPolicy retry;
  Clock* clock = nullptr;  // null means the system clock
  const TemplateSet* templates = nullptr;  // null means the defaults

  const TemplateSet& prompts() const {
    return templates ? *templates : TemplateSet::defaults();
  }
  Clock& clock_ref() const { return clock ? *clock : SystemClock::instance(); }
};

/// One "filename: description" line per entry, map order.
std::string render_description_lines(const DescriptionMap& map);

/// Renders `tmpl`, splitting the output at the image marker so the image
/// lands between the surrounding text blocks.
void append_template_with_image(ChatRequest& request, const PromptTemplate& tmpl,
                                const std::map<std::string, std::string>& bindings,
                                const std::string& image_data_url);

// ---------------------------------------------------------------------------
// Stage 1

ChatRequest build_description_prompt(const fs::path& assembly_image,
                                     const fs::path& part_image,
                                     const ModelSettings& settings = {});

/// Trims, drops a leading list bullet and trailing '.'/';'. Returns nullopt
/// when the phrase is empty or still contains ';'.
std::optional<std::string> normalize_description(std::string_view raw);

struct PartFailure {
  std::string filename;
  std::string reason;
};

struct DescribeOutcome {
  DescriptionMap descriptions;
  std::vector<PartFailure> failures;
};

DescribeOutcome describe_parts(const AssemblyRecord& assembly, ChatBackend& backend,
                               const ModelSettings& settings = {});

// ---------------------------------------------------------------------------
// Stage 2

/// Throws PreconditionError on an empty map or specification.
ChatRequest build_retrieval_prompt(const fs::path& assembly_image,
                                   const DescriptionMap& descriptions,
                                   std::string_view specification,
                                   const std::optional<std::string>& fewshot_block,
                                   const ModelSettings& settings = {});

/// Single-step baseline: the assembly image plus every part image, labelled
/// by filename, in place of description lines.
ChatRequest build_image_only_prompt(const AssemblyRecord& assembly,
                                    std::string_view specification,
                                    const ModelSettings& settings = {});

enum class ParseStatus { ok, recovered, failed };
std::string_view to_string(ParseStatus s);
ParseStatus parse_status_from_string(std::string_view s);

struct ParsedAnswer {
  std::vector<std::string> filenames;
  ParseStatus status = ParseStatus::failed;
};

/// Reads the last "Final Answer:" line (answer on the same or the next
/// non-empty line). Never throws.
ParsedAnswer parse_final_answer(std::string_view text);
/// "Final Answer:\n" + filenames joined by ';'.
std::string format_answer(const std::vector<std::string>& filenames);
bool is_filename_token(std::string_view token);

struct RetrievalResult {
  std::string spec_id;
  std::string assembly_id;
  std::vector<std::string> predicted;
  std::string cot_text;
  ParseStatus parse_status = ParseStatus::failed;
  std::vector<std::string> warnings;
  std::optional<std::string> error;
  /// Set by retrieval-augmented runs only.
  std::optional<std::vector<std::string>> exemplar_ids;

  nlohmann::ordered_json to_json() const;
  static RetrievalResult from_json(const nlohmann::ordered_json& j);

  bool operator==(const RetrievalResult&) const = default;
};

std::vector<RetrievalResult> load_results(const fs::path& path);
void save_results(const std::vector<RetrievalResult>& results, const fs::path& path);

/// Sends `request`, parses the answer and drops names outside `known`.
RetrievalResult run_retrieval_request(const SpecItem& spec, const ChatRequest& request,
                                      const std::vector<std::string>& known,
                                      ChatBackend& backend, const ModelSettings& settings);

RetrievalResult retrieve_parts(const SpecItem& spec, const AssemblyRecord& assembly,
                               const DescriptionMap& descriptions, ChatBackend& backend,
                               const ModelSettings& settings = {},
                               const std::optional<std::string>& fewshot_block = std::nullopt);

RetrievalResult retrieve_parts_image_only(const SpecItem& spec,
                                          const AssemblyRecord& assembly,
                                          ChatBackend& backend,
                                          const ModelSettings& settings = {});

/// Stage 2 over many items, fanned out with settings.workers. Items whose
/// assembly or descriptions are missing come back failed with an error.
std::vector<RetrievalResult> retrieve_all(const CorpusIndex& corpus,
                                          const std::vector<SpecItem>& specs,
                                          ChatBackend& backend,
                                          const ModelSettings& settings = {},
                                          bool image_only = false);

}  // namespace cadrag
