#pragma once

// Dataset construction: specification generation from part descriptions,
// ground-truth resolution, and annotation bundles for human review.

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

struct SpecDraft {
  std::string assembly_id;
  std::string desc_a;
  std::string desc_b;
  std::string sentence;

  bool operator==(const SpecDraft&) const = default;
};

/// Numbered "1. desc" list in map order.
std::string render_numbered_descriptions(const DescriptionMap& map);

/// Throws PreconditionError for fewer than two descriptions or a
/// description containing ';'. `avoid_pairs` lists pairs already used for
/// this assembly (empty for the first spec).
ChatRequest build_specgen_prompt(
    const fs::path& assembly_image, const DescriptionMap& descriptions,
    const ModelSettings& settings = {},
    const std::vector<std::pair<std::string, std::string>>& avoid_pairs = {});

/// Line 1: "desc_a;desc_b"; next non-empty line: the sentence.
/// Throws FormatError otherwise.
SpecDraft parse_specgen_output(std::string_view text, std::string assembly_id = {});
std::string format_specgen_output(const SpecDraft& draft);

/// Case-fold, whitespace collapse, trailing period strip.
std::string normalize_for_match(std::string_view description);

/// Filenames matching desc_a and desc_b. Throws ResolutionError when either
/// description matches zero or several filenames.
std::vector<std::string> resolve_ground_truth(const SpecDraft& draft,
                                              const DescriptionMap& descriptions);

struct UnresolvedDraft {
  SpecDraft draft;
  std::string reason;
  std::vector<std::string> candidates;

  nlohmann::ordered_json to_json() const;
};

struct SpecgenOutcome {
  std::vector<SpecItem> items;
  std::vector<UnresolvedDraft> unresolved;
  /// assembly_id -> reason for assemblies skipped before any model call or
  /// whose model call failed.
  std::vector<std::pair<std::string, std::string>> failures;
};

/// Generates `per_assembly` specs for every assembly with descriptions.
/// spec ids are "<assembly_id>-s<n>".
SpecgenOutcome generate_specs(const CorpusIndex& corpus, ChatBackend& backend,
                              const ModelSettings& settings = {},
                              std::size_t per_assembly = 1);

// ---------------------------------------------------------------------------
// Annotation bundles and the renderer subprocess contract.

enum class BundleStatus { pending, kept, discarded };
std::string_view to_string(BundleStatus s);
BundleStatus bundle_status_from_string(std::string_view s);

struct AnnotationBundle {
  std::string bundle_id;
  std::string spec_id;
  std::string assembly_id;
  fs::path assembly_image;
  std::optional<fs::path> merged_image;
  std::string specification;
  std::vector<std::string> gt_filenames;
  BundleStatus status = BundleStatus::pending;
  std::optional<int> reason_code;
  /// "render_failed", "missing_step" when the merged image is unavailable.
  std::vector<std::string> flags;

  bool has_flag(std::string_view f) const;
  nlohmann::ordered_json to_json() const;
  static AnnotationBundle from_json(const nlohmann::ordered_json& j);
};

inline constexpr std::string_view kBundleFile = "bundle.json";

/// Writes `<dir>/<bundle_id>/bundle.json`.
void save_bundle(const AnnotationBundle& bundle, const fs::path& bundles_dir);
std::vector<AnnotationBundle> load_bundles(const fs::path& bundles_dir);

enum class RenderCommand { split, merge, render };
std::string_view to_string(RenderCommand c);

struct RenderManifest {
  RenderCommand command = RenderCommand::render;
  std::vector<fs::path> inputs;
  fs::path output_dir;
  std::vector<fs::path> parts;  // merge only
  int image_width = 800;
  int image_height = 800;

  nlohmann::ordered_json to_json() const;
};

struct RenderOutcome {
  int exit_code = 0;
  /// Parsed single-line JSON from stdout; null when absent or unparsable.
  nlohmann::json result;
};

/// Runs the external CAD tooling for one manifest file.
class RenderInvoker {
 public:
  virtual ~RenderInvoker() = default;
  virtual RenderOutcome invoke(const fs::path& manifest_path) = 0;
};

/// `<command> --manifest <path>` through /bin/sh, capturing stdout.
class SubprocessInvoker : public RenderInvoker {
 public:
  explicit SubprocessInvoker(std::string command) : command_(std::move(command)) {}
  RenderOutcome invoke(const fs::path& manifest_path) override;

 private:
  std::string command_;
};

/// For each spec item: merge the ground-truth part STEP files, render the
/// merged model, and write a pending bundle. Renderer failures flag the
/// bundle and processing continues.
std::vector<AnnotationBundle> make_annotation_bundles(const std::vector<SpecItem>& items,
                                                      const CorpusIndex& corpus,
                                                      RenderInvoker& invoker,
                                                      const fs::path& bundles_dir);

}  // namespace cadrag
