#include "cadrag/datasetgen.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <map>

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  out += '\'';
  return out;
}

std::vector<std::string> non_empty_lines(std::string_view text) {
  std::vector<std::string> out;
  for (auto& line : split_lines(text)) {
    auto t = trim(line);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

std::string render_numbered_descriptions(const DescriptionMap& map) {
  std::string out;
  std::size_t n = 0;
  for (const auto& [filename, desc] : map.entries()) {
    if (n) out += '\n';
    out += std::to_string(++n) + ". " + desc;
  }
  return out;
}

ChatRequest build_specgen_prompt(
    const fs::path& assembly_image, const DescriptionMap& descriptions,
    const ModelSettings& settings,
    const std::vector<std::pair<std::string, std::string>>& avoid_pairs) {
  if (descriptions.size() < 2)
    throw PreconditionError("specification generation needs at least two descriptions");
  for (const auto& [filename, desc] : descriptions.entries())
    if (desc.find(';') != std::string::npos)
      throw PreconditionError("description of '" + filename +
                              "' contains ';', which the output format reserves");
  ChatRequest req;
  req.model_name = settings.model_name;
  req.temperature = settings.temperature;
  req.max_output = settings.describe_max_output;
  auto text = settings.prompts().specgen.render(
      {{"desc_list_str", render_numbered_descriptions(descriptions)}});
  if (!avoid_pairs.empty()) {
    text += "\n\nChoose a pair different from these already-used pairs:";
    for (const auto& [a, b] : avoid_pairs) text += "\n- " + a + ";" + b;
  }
  req.add_text(std::move(text));
  req.add_image(encode_image_attachment(assembly_image));
  return req;
}

SpecDraft parse_specgen_output(std::string_view text, std::string assembly_id) {
  auto lines = non_empty_lines(text);
  if (lines.empty()) throw FormatError("empty specification output");
  auto segments = split(lines[0], ';');
  if (segments.size() != 2)
    throw FormatError("first line must hold exactly two descriptions separated by ';', got " +
                      std::to_string(segments.size()) + " segment(s)");
  SpecDraft draft;
  draft.assembly_id = std::move(assembly_id);
  draft.desc_a = trim(segments[0]);
  draft.desc_b = trim(segments[1]);
  if (draft.desc_a.empty() || draft.desc_b.empty())
    throw FormatError("empty description in selected pair");
  if (lines.size() < 2) throw FormatError("missing specification sentence line");
  draft.sentence = lines[1];
  return draft;
}

std::string format_specgen_output(const SpecDraft& draft) {
  return draft.desc_a + ";" + draft.desc_b + "\n" + draft.sentence;
}

std::string normalize_for_match(std::string_view description) {
  std::string out;
  bool pending_space = false;
  for (char c : trim_view(description)) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out += ' ';
    pending_space = false;
    out += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
  }
  while (!out.empty() && (out.back() == '.' || out.back() == ' ')) out.pop_back();
  return out;
}

std::vector<std::string> resolve_ground_truth(const SpecDraft& draft,
                                              const DescriptionMap& descriptions) {
  auto resolve_one = [&](const std::string& wanted) {
    auto key = normalize_for_match(wanted);
    std::vector<std::string> matches;
    for (const auto& [filename, desc] : descriptions.entries())
      if (normalize_for_match(desc) == key) matches.push_back(filename);
    if (matches.size() == 1) return matches.front();
    if (matches.size() > 1)
      throw ResolutionError(ResolutionError::Kind::ambiguous, wanted, matches,
                            "description '" + wanted + "' matches " +
                                std::to_string(matches.size()) + " parts: " +
                                join(matches, ", "));
    std::vector<std::pair<std::size_t, std::string>> scored;
    for (const auto& [filename, desc] : descriptions.entries())
      scored.emplace_back(edit_distance(key, normalize_for_match(desc)), desc);
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> closest;
    for (std::size_t i = 0; i < scored.size() && i < 3; ++i)
      closest.push_back(scored[i].second);
    throw ResolutionError(ResolutionError::Kind::unresolved, wanted, closest,
                          "description '" + wanted + "' matches no part; closest: " +
                              join(closest, " | "));
  };
  auto a = resolve_one(draft.desc_a);
  auto b = resolve_one(draft.desc_b);
  if (a == b)
    throw ResolutionError(ResolutionError::Kind::ambiguous, draft.desc_b, {a},
                          "both selected descriptions resolve to '" + a + "'");
  return {a, b};
}

nlohmann::ordered_json UnresolvedDraft::to_json() const {
  nlohmann::ordered_json j;
  j["assembly_id"] = draft.assembly_id;
  j["desc_a"] = draft.desc_a;
  j["desc_b"] = draft.desc_b;
  j["sentence"] = draft.sentence;
  j["reason"] = reason;
  j["candidates"] = candidates;
  return j;
}

SpecgenOutcome generate_specs(const CorpusIndex& corpus, ChatBackend& backend,
                              const ModelSettings& settings, std::size_t per_assembly) {
  struct PerAssembly {
    std::vector<SpecItem> items;
    std::vector<UnresolvedDraft> unresolved;
    std::optional<std::string> failure;
  };
  auto results = parallel_map(
      corpus.assemblies(), settings.workers, [&](const AssemblyRecord& assembly) {
        PerAssembly out;
        auto descriptions = corpus.descriptions(assembly);
        if (!descriptions) {
          out.failure = "no descriptions.json";
          return out;
        }
        std::vector<std::pair<std::string, std::string>> used;
        for (std::size_t n = 0; n < per_assembly; ++n) {
          ChatRequest req;
          try {
            req = build_specgen_prompt(assembly.assembly_image, *descriptions, settings, used);
          } catch (const PreconditionError& e) {
            out.failure = e.what();
            return out;
          }
          std::string text;
          try {
            text = send_chat(req, backend, settings.retry, settings.clock_ref()).text;
          } catch (const Error& e) {
            out.failure = e.what();
            return out;
          }
          SpecDraft draft;
          try {
            draft = parse_specgen_output(text, assembly.assembly_id);
          } catch (const FormatError& e) {
            out.unresolved.push_back({SpecDraft{assembly.assembly_id, "", "", trim(text)},
                                      e.what(), {}});
            continue;
          }
          used.emplace_back(draft.desc_a, draft.desc_b);
          try {
            SpecItem item;
            item.spec_id = assembly.assembly_id + "-s" + std::to_string(n);
            item.assembly_id = assembly.assembly_id;
            item.specification = draft.sentence;
            item.gt_filenames = resolve_ground_truth(draft, *descriptions);
            item.source = SpecSource::self_generated;
            out.items.push_back(std::move(item));
          } catch (const ResolutionError& e) {
            out.unresolved.push_back({draft, e.what(), e.candidates()});
          }
        }
        return out;
      });
  SpecgenOutcome outcome;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& id = corpus.assemblies()[i].assembly_id;
    if (!results[i].ok()) {
      outcome.failures.emplace_back(id, results[i].error);
      continue;
    }
    auto& r = *results[i].value;
    outcome.items.insert(outcome.items.end(), r.items.begin(), r.items.end());
    outcome.unresolved.insert(outcome.unresolved.end(), r.unresolved.begin(),
                              r.unresolved.end());
    if (r.failure) outcome.failures.emplace_back(id, *r.failure);
  }
  return outcome;
}

std::string_view to_string(BundleStatus s) {
  switch (s) {
    case BundleStatus::pending: return "pending";
    case BundleStatus::kept: return "kept";
    case BundleStatus::discarded: return "discarded";
  }
  return "pending";
}

BundleStatus bundle_status_from_string(std::string_view s) {
  if (s == "pending") return BundleStatus::pending;
  if (s == "kept") return BundleStatus::kept;
  if (s == "discarded") return BundleStatus::discarded;
  throw SchemaError("unknown bundle status '" + std::string(s) + "'");
}

bool AnnotationBundle::has_flag(std::string_view f) const {
  return std::find(flags.begin(), flags.end(), f) != flags.end();
}

nlohmann::ordered_json AnnotationBundle::to_json() const {
  nlohmann::ordered_json j;
  j["bundle_id"] = bundle_id;
  j["spec_id"] = spec_id;
  j["assembly_id"] = assembly_id;
  j["assembly_image"] = assembly_image.string();
  j["merged_image"] = merged_image ? nlohmann::ordered_json(merged_image->string())
                                   : nlohmann::ordered_json(nullptr);
  j["specification"] = specification;
  j["gt_filenames"] = gt_filenames;
  j["status"] = std::string(to_string(status));
  j["reason_code"] = reason_code ? nlohmann::ordered_json(*reason_code)
                                 : nlohmann::ordered_json(nullptr);
  j["flags"] = flags;
  return j;
}

AnnotationBundle AnnotationBundle::from_json(const nlohmann::ordered_json& j) {
  AnnotationBundle b;
  try {
    b.bundle_id = j.at("bundle_id").get<std::string>();
    b.spec_id = j.value("spec_id", b.bundle_id);
    b.assembly_id = j.at("assembly_id").get<std::string>();
    b.assembly_image = j.at("assembly_image").get<std::string>();
    if (j.contains("merged_image") && j["merged_image"].is_string())
      b.merged_image = fs::path(j["merged_image"].get<std::string>());
    b.specification = j.at("specification").get<std::string>();
    b.gt_filenames = j.at("gt_filenames").get<std::vector<std::string>>();
    b.status = bundle_status_from_string(j.value("status", "pending"));
    if (j.contains("reason_code") && j["reason_code"].is_number_integer())
      b.reason_code = j["reason_code"].get<int>();
    if (j.contains("flags")) b.flags = j["flags"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed bundle: ") + e.what());
  }
  if (b.status == BundleStatus::discarded && !b.reason_code)
    throw SchemaError("discarded bundle " + b.bundle_id + " lacks a reason code");
  return b;
}

void save_bundle(const AnnotationBundle& bundle, const fs::path& bundles_dir) {
  write_file_atomic(bundles_dir / bundle.bundle_id / kBundleFile,
                    bundle.to_json().dump(2) + "\n");
}

std::vector<AnnotationBundle> load_bundles(const fs::path& bundles_dir) {
  std::vector<AnnotationBundle> out;
  if (!fs::is_directory(bundles_dir))
    throw IoError("bundles directory not found: " + bundles_dir.string());
  for (const auto& entry : fs::directory_iterator(bundles_dir)) {
    auto file = entry.path() / kBundleFile;
    if (!entry.is_directory() || !fs::is_regular_file(file)) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(read_file(file));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(file.string() + ": " + e.what());
    }
    out.push_back(AnnotationBundle::from_json(j));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.bundle_id < b.bundle_id; });
  return out;
}

std::string_view to_string(RenderCommand c) {
  switch (c) {
    case RenderCommand::split: return "split";
    case RenderCommand::merge: return "merge";
    case RenderCommand::render: return "render";
  }
  return "render";
}

nlohmann::ordered_json RenderManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = std::string(to_string(command));
  j["inputs"] = nlohmann::ordered_json::array();
  for (const auto& p : inputs) j["inputs"].push_back(p.string());
  j["output_dir"] = output_dir.string();
  if (command == RenderCommand::merge) {
    j["parts"] = nlohmann::ordered_json::array();
    for (const auto& p : parts) j["parts"].push_back(p.string());
  }
  j["image_size"] = {image_width, image_height};
  return j;
}

RenderOutcome SubprocessInvoker::invoke(const fs::path& manifest_path) {
  auto cmd = command_ + " --manifest " + shell_quote(manifest_path.string());
  RenderOutcome outcome;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) {
    outcome.exit_code = 127;
    return outcome;
  }
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  int status = ::pclose(pipe);
  outcome.exit_code = (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : 128;
  auto lines = non_empty_lines(out);
  if (!lines.empty()) {
    try {
      outcome.result = nlohmann::json::parse(lines.back());
    } catch (const nlohmann::json::exception&) {
      outcome.result = nullptr;
    }
  }
  return outcome;
}

std::vector<AnnotationBundle> make_annotation_bundles(const std::vector<SpecItem>& items,
                                                      const CorpusIndex& corpus,
                                                      RenderInvoker& invoker,
                                                      const fs::path& bundles_dir) {
  std::vector<AnnotationBundle> bundles;
  for (const auto& item : items) {
    const auto& assembly = corpus.at(item.assembly_id);
    AnnotationBundle bundle;
    bundle.bundle_id = item.spec_id;
    bundle.spec_id = item.spec_id;
    bundle.assembly_id = item.assembly_id;
    bundle.assembly_image = fs::absolute(assembly.assembly_image);
    bundle.specification = item.specification;
    bundle.gt_filenames = item.gt_filenames;

    auto work_dir = fs::absolute(bundles_dir / bundle.bundle_id);
    fs::create_directories(work_dir);

    std::vector<fs::path> steps;
    for (const auto& f : item.gt_filenames) {
      const auto* part = assembly.find_part(f);
      if (!part || !part->step_path) {
        steps.clear();
        break;
      }
      steps.push_back(fs::absolute(*part->step_path));
    }
    if (steps.empty()) {
      bundle.flags.push_back("missing_step");
      save_bundle(bundle, bundles_dir);
      bundles.push_back(std::move(bundle));
      continue;
    }

    auto run = [&](const RenderManifest& manifest, const char* name,
                   const fs::path& expected) -> std::optional<fs::path> {
      auto manifest_path = work_dir / name;
      write_file(manifest_path, manifest.to_json().dump(2) + "\n");
      auto outcome = invoker.invoke(manifest_path);
      if (outcome.exit_code != 0) return std::nullopt;
      fs::path produced = expected;
      if (outcome.result.is_object() && outcome.result.contains("output") &&
          outcome.result["output"].is_string())
        produced = outcome.result["output"].get<std::string>();
      if (!fs::is_regular_file(produced)) return std::nullopt;
      return produced;
    };

    RenderManifest merge;
    merge.command = RenderCommand::merge;
    merge.output_dir = work_dir;
    merge.parts = steps;
    auto merged_step = run(merge, "merge_manifest.json", work_dir / "merged.step");
    std::optional<fs::path> image;
    if (merged_step) {
      RenderManifest render;
      render.command = RenderCommand::render;
      render.inputs = {*merged_step};
      render.output_dir = work_dir;
      image = run(render, "render_manifest.json", work_dir / "merged.png");
    }
    if (image) bundle.merged_image = *image;
    else bundle.flags.push_back("render_failed");
    save_bundle(bundle, bundles_dir);
    bundles.push_back(std::move(bundle));
  }
  return bundles;
}

}  // namespace cadrag
