#include "cadrag/corpus.hpp"

#include <algorithm>
#include <set>

#include "cadrag/error.hpp"
#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

bool is_image_extension(const std::string& ext) {
  auto e = to_lower_ascii(ext);
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

bool is_step_extension(const std::string& ext) {
  auto e = to_lower_ascii(ext);
  return e == ".step" || e == ".stp";
}

std::optional<fs::path> find_step_sibling(const fs::path& dir,
                                          const std::string& stem) {
  for (const char* ext : {".step", ".stp", ".STEP", ".STP"}) {
    auto candidate = dir / (stem + ext);
    if (fs::is_regular_file(candidate)) return candidate;
  }
  return std::nullopt;
}

std::string require_string(const nlohmann::ordered_json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string())
    throw SchemaError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

}  // namespace

const PartRef* AssemblyRecord::find_part(std::string_view filename) const {
  for (const auto& p : parts)
    if (p.filename == filename) return &p;
  return nullptr;
}

DescriptionMap::DescriptionMap(std::initializer_list<Entry> entries) {
  for (const auto& [k, v] : entries) set(k, v);
}

void DescriptionMap::set(std::string filename, std::string description) {
  for (auto& e : entries_) {
    if (e.first == filename) {
      e.second = std::move(description);
      return;
    }
  }
  entries_.emplace_back(std::move(filename), std::move(description));
}

const std::string* DescriptionMap::find(std::string_view filename) const {
  for (const auto& e : entries_)
    if (e.first == filename) return &e.second;
  return nullptr;
}

std::vector<std::string> DescriptionMap::filenames() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

nlohmann::ordered_json DescriptionMap::to_json() const {
  auto j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : entries_) j[k] = v;
  return j;
}

DescriptionMap DescriptionMap::from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object())
    throw SchemaError("description map must be a JSON object");
  DescriptionMap m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_string())
      throw SchemaError("description for '" + it.key() + "' is not a string");
    m.entries_.emplace_back(it.key(), it.value().get<std::string>());
  }
  return m;
}

DescriptionMap load_description_map(const fs::path& path) {
  auto text = read_file(path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return DescriptionMap::from_json(j);
}

void save_description_map(const DescriptionMap& map, const fs::path& path) {
  write_file_atomic(path, map.to_json().dump(2) + "\n");
}

std::vector<std::string> check_description_map(const DescriptionMap& map,
                                               const AssemblyRecord& assembly) {
  std::vector<std::string> problems;
  for (const auto& [filename, desc] : map.entries()) {
    if (!assembly.find_part(filename))
      problems.push_back("unknown part '" + filename + "'");
    if (trim_view(desc).empty())
      problems.push_back("empty description for '" + filename + "'");
  }
  return problems;
}

std::string_view to_string(SpecSource s) {
  return s == SpecSource::self_generated ? "self_generated"
                                         : "human_preference";
}

SpecSource spec_source_from_string(std::string_view s) {
  if (s == "self_generated") return SpecSource::self_generated;
  if (s == "human_preference") return SpecSource::human_preference;
  throw SchemaError("unknown spec source '" + std::string(s) + "'");
}

nlohmann::ordered_json SpecItem::to_json() const {
  nlohmann::ordered_json j;
  j["spec_id"] = spec_id;
  j["assembly_id"] = assembly_id;
  j["specification"] = specification;
  j["gt_filenames"] = gt_filenames;
  j["source"] = std::string(to_string(source));
  return j;
}

SpecItem SpecItem::from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw SchemaError("spec item must be a JSON object");
  SpecItem item;
  item.spec_id = require_string(j, "spec_id");
  item.assembly_id = require_string(j, "assembly_id");
  item.specification = require_string(j, "specification");
  auto gt = j.find("gt_filenames");
  if (gt == j.end() || !gt->is_array())
    throw SchemaError("field 'gt_filenames' must be an array");
  for (const auto& f : *gt) {
    if (!f.is_string()) throw SchemaError("gt_filenames entries must be strings");
    item.gt_filenames.push_back(f.get<std::string>());
  }
  item.source = j.contains("source")
                    ? spec_source_from_string(require_string(j, "source"))
                    : SpecSource::self_generated;
  if (item.spec_id.empty()) throw SchemaError("empty spec_id");
  if (trim_view(item.specification).empty())
    throw SchemaError("empty specification in " + item.spec_id);
  if (item.gt_filenames.empty())
    throw SchemaError("empty gt_filenames in " + item.spec_id);
  return item;
}

std::vector<SpecItem> load_spec_items(const fs::path& path) {
  std::vector<SpecItem> items;
  for (const auto& row : read_jsonl(path)) items.push_back(SpecItem::from_json(row));
  return items;
}

void save_spec_items(const std::vector<SpecItem>& items, const fs::path& path) {
  std::vector<nlohmann::ordered_json> rows;
  rows.reserve(items.size());
  for (const auto& item : items) rows.push_back(item.to_json());
  write_file_atomic(path, to_jsonl(rows));
}

PartCountBucket bucket_of(long long part_count, const BucketBoundaries& b) {
  if (part_count < 1)
    throw DomainError("part count must be >= 1, got " +
                      std::to_string(part_count));
  if (part_count < b.b10) return PartCountBucket::LT10;
  if (part_count < b.b20) return PartCountBucket::B10_20;
  if (part_count < b.b50) return PartCountBucket::B20_50;
  return PartCountBucket::GT50;
}

std::string_view bucket_label(PartCountBucket b) {
  switch (b) {
    case PartCountBucket::LT10: return "<10";
    case PartCountBucket::B10_20: return "10–20";
    case PartCountBucket::B20_50: return "20–50";
    case PartCountBucket::GT50: return ">50";
  }
  return "?";
}

std::string_view bucket_key(PartCountBucket b) {
  switch (b) {
    case PartCountBucket::LT10: return "LT10";
    case PartCountBucket::B10_20: return "B10_20";
    case PartCountBucket::B20_50: return "B20_50";
    case PartCountBucket::GT50: return "GT50";
  }
  return "?";
}

CorpusIndex::CorpusIndex(fs::path root, std::vector<AssemblyRecord> assemblies,
                         std::vector<ValidationIssue> issues)
    : root_(std::move(root)),
      assemblies_(std::move(assemblies)),
      issues_(std::move(issues)) {
  std::sort(assemblies_.begin(), assemblies_.end(),
            [](const auto& a, const auto& b) { return a.assembly_id < b.assembly_id; });
}

const AssemblyRecord* CorpusIndex::find(std::string_view assembly_id) const {
  auto it = std::lower_bound(
      assemblies_.begin(), assemblies_.end(), assembly_id,
      [](const AssemblyRecord& a, std::string_view id) { return a.assembly_id < id; });
  if (it == assemblies_.end() || it->assembly_id != assembly_id) return nullptr;
  return &*it;
}

const AssemblyRecord& CorpusIndex::at(std::string_view assembly_id) const {
  const auto* a = find(assembly_id);
  if (!a) throw ConsistencyError("unknown assembly '" + std::string(assembly_id) + "'");
  return *a;
}

std::optional<DescriptionMap> CorpusIndex::descriptions(
    const AssemblyRecord& assembly) const {
  auto path = assembly.directory / kDescriptionsFile;
  if (!fs::is_regular_file(path)) return std::nullopt;
  return load_description_map(path);
}

DescriptionMap CorpusIndex::require_descriptions(
    const AssemblyRecord& assembly) const {
  auto m = descriptions(assembly);
  if (!m)
    throw PreconditionError("assembly '" + assembly.assembly_id +
                            "' has no " + std::string(kDescriptionsFile));
  return *std::move(m);
}

std::vector<SpecItem> CorpusIndex::collect_spec_items() const {
  std::vector<SpecItem> out;
  for (const auto& a : assemblies_) {
    auto path = a.directory / kSpecsFile;
    if (!fs::is_regular_file(path)) continue;
    auto items = load_spec_items(path);
    out.insert(out.end(), items.begin(), items.end());
  }
  return out;
}

CorpusIndex scan_dataset(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec))
    throw IoError("corpus root is not a readable directory: " + root.string());

  std::vector<fs::path> dirs;
  fs::directory_iterator it(root, ec);
  if (ec) throw IoError("cannot read " + root.string() + ": " + ec.message());
  for (const auto& entry : it)
    if (entry.is_directory()) dirs.push_back(entry.path());

  std::vector<AssemblyRecord> records;
  std::vector<ValidationIssue> issues;
  for (const auto& dir : dirs) {
    AssemblyRecord rec;
    rec.assembly_id = dir.filename().string();
    rec.directory = dir;

    std::vector<fs::path> images;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const auto& p = entry.path();
      auto ext = p.extension().string();
      if (p.stem() == kAssemblyImageStem) {
        if (is_image_extension(ext)) rec.assembly_image = p;
        else if (is_step_extension(ext)) rec.assembly_step = p;
        continue;
      }
      if (is_image_extension(ext)) images.push_back(p);
    }
    if (rec.assembly_image.empty()) {
      issues.push_back({rec.assembly_id, "missing assembly image (assembly.png)"});
      continue;
    }
    std::sort(images.begin(), images.end(), [](const auto& a, const auto& b) {
      return natural_less(a.filename().string(), b.filename().string());
    });
    for (const auto& img : images) {
      PartRef part;
      part.filename = img.filename().string();
      part.image = img;
      part.step_path = find_step_sibling(dir, img.stem().string());
      rec.parts.push_back(std::move(part));
    }
    if (rec.parts.empty()) {
      issues.push_back({rec.assembly_id, "assembly has no part images"});
      continue;
    }
    records.push_back(std::move(rec));
  }
  std::sort(issues.begin(), issues.end(), [](const auto& a, const auto& b) {
    return a.assembly_id < b.assembly_id;
  });
  return CorpusIndex(root, std::move(records), std::move(issues));
}

std::vector<ValidationIssue> validate_spec_items(
    const std::vector<SpecItem>& items, const CorpusIndex& corpus) {
  std::vector<ValidationIssue> issues;
  std::set<std::string> ids;
  for (const auto& item : items) {
    if (!ids.insert(item.spec_id).second)
      issues.push_back({item.assembly_id, "duplicate spec_id " + item.spec_id});
    if (trim_view(item.specification).empty())
      issues.push_back({item.assembly_id, item.spec_id + ": empty specification"});
    if (item.gt_filenames.empty())
      issues.push_back({item.assembly_id, item.spec_id + ": empty gt_filenames"});
    const auto* assembly = corpus.find(item.assembly_id);
    if (!assembly) {
      issues.push_back({item.assembly_id, item.spec_id + ": unknown assembly"});
      continue;
    }
    for (const auto& f : item.gt_filenames)
      if (!assembly->find_part(f))
        issues.push_back({item.assembly_id,
                          item.spec_id + ": gt filename '" + f + "' not in assembly"});
  }
  return issues;
}

}  // namespace cadrag
