#pragma once

// Data model and on-disk layout of an assembly corpus.
//
// Layout, one directory per assembly under the corpus root:
//
//   <root>/<assembly_id>/assembly.png     assembly image (required)
//   <root>/<assembly_id>/<part>.png|jpg   one image per part
//   <root>/<assembly_id>/<part>.step|stp  optional per-part STEP file
//   <root>/<assembly_id>/assembly.step    optional, used for count cross-checks
//   <root>/<assembly_id>/descriptions.json
//   <root>/<assembly_id>/specs.jsonl

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace cadrag {

namespace fs = std::filesystem;

inline constexpr std::string_view kAssemblyImageStem = "assembly";
inline constexpr std::string_view kDescriptionsFile = "descriptions.json";
inline constexpr std::string_view kSpecsFile = "specs.jsonl";

struct PartRef {
  std::string filename;
  fs::path image;
  std::optional<fs::path> step_path;

  bool operator==(const PartRef&) const = default;
};

struct AssemblyRecord {
  std::string assembly_id;
  fs::path directory;
  fs::path assembly_image;
  std::vector<PartRef> parts;
  std::optional<fs::path> assembly_step;

  std::size_t part_count() const noexcept { return parts.size(); }
  const PartRef* find_part(std::string_view filename) const;

  bool operator==(const AssemblyRecord&) const = default;
};

/// filename -> description, kept in insertion (corpus) order.
class DescriptionMap {
 public:
  using Entry = std::pair<std::string, std::string>;

  DescriptionMap() = default;
  DescriptionMap(std::initializer_list<Entry> entries);

  /// Inserts or replaces.
  void set(std::string filename, std::string description);
  const std::string* find(std::string_view filename) const;
  bool contains(std::string_view filename) const { return find(filename); }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<std::string> filenames() const;
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  nlohmann::ordered_json to_json() const;
  /// Throws SchemaError for anything but an object of string values.
  static DescriptionMap from_json(const nlohmann::ordered_json& j);

  bool operator==(const DescriptionMap&) const = default;

 private:
  std::vector<Entry> entries_;
};

DescriptionMap load_description_map(const fs::path& path);
void save_description_map(const DescriptionMap& map, const fs::path& path);

/// Problems with a description map relative to its assembly (unknown keys,
/// empty descriptions). Empty result means valid.
std::vector<std::string> check_description_map(const DescriptionMap& map,
                                               const AssemblyRecord& assembly);

enum class SpecSource { self_generated, human_preference };

std::string_view to_string(SpecSource s);
SpecSource spec_source_from_string(std::string_view s);

struct SpecItem {
  std::string spec_id;
  std::string assembly_id;
  std::string specification;
  std::vector<std::string> gt_filenames;
  SpecSource source = SpecSource::self_generated;

  nlohmann::ordered_json to_json() const;
  static SpecItem from_json(const nlohmann::ordered_json& j);

  bool operator==(const SpecItem&) const = default;
};

std::vector<SpecItem> load_spec_items(const fs::path& path);
void save_spec_items(const std::vector<SpecItem>& items, const fs::path& path);

enum class PartCountBucket { LT10, B10_20, B20_50, GT50 };

inline constexpr std::array<PartCountBucket, 4> kAllBuckets = {
    PartCountBucket::LT10, PartCountBucket::B10_20, PartCountBucket::B20_50,
    PartCountBucket::GT50};

/// Lower bounds of the three upper buckets; buckets are half-open,
/// [1,b0) [b0,b1) [b1,b2) [b2,inf).
struct BucketBoundaries {
  int b10 = 10;
  int b20 = 20;
  int b50 = 50;
};

PartCountBucket bucket_of(long long part_count,
                          const BucketBoundaries& bounds = {});
std::string_view bucket_label(PartCountBucket b);
std::string_view bucket_key(PartCountBucket b);

struct ValidationIssue {
  std::string assembly_id;
  std::string message;

  bool operator==(const ValidationIssue&) const = default;
};

/// Immutable after construction. Assemblies are sorted by assembly_id.
class CorpusIndex {
 public:
  CorpusIndex() = default;
  CorpusIndex(fs::path root, std::vector<AssemblyRecord> assemblies,
              std::vector<ValidationIssue> issues);

  const fs::path& root() const noexcept { return root_; }
  const std::vector<AssemblyRecord>& assemblies() const noexcept {
    return assemblies_;
  }
  const std::vector<ValidationIssue>& issues() const noexcept {
    return issues_;
  }
  const AssemblyRecord* find(std::string_view assembly_id) const;
  const AssemblyRecord& at(std::string_view assembly_id) const;

  /// descriptions.json of an assembly; nullopt when not generated yet.
  std::optional<DescriptionMap> descriptions(
      const AssemblyRecord& assembly) const;
  DescriptionMap require_descriptions(const AssemblyRecord& assembly) const;

  /// Concatenation of every assembly's specs.jsonl, in assembly order.
  std::vector<SpecItem> collect_spec_items() const;

  bool operator==(const CorpusIndex&) const = default;

 private:
  fs::path root_;
  std::vector<AssemblyRecord> assemblies_;
  std::vector<ValidationIssue> issues_;
};

CorpusIndex scan_dataset(const fs::path& root);

/// Checks spec items against the corpus (assembly exists, gt filenames
/// exist, texts non-empty). Empty result means valid.
std::vector<ValidationIssue> validate_spec_items(
    const std::vector<SpecItem>& items, const CorpusIndex& corpus);

}  // namespace cadrag
