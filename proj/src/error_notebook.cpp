#include "cadrag/error_notebook.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <variant>

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

std::set<std::string> as_set(const std::vector<std::string>& v) {
  return {v.begin(), v.end()};
}

bool has_final_answer_line(std::string_view text) {
  for (const auto& line : split_lines(text))
    if (starts_with_icase(trim_view(line), "Final Answer")) return true;
  return false;
}

}  // namespace

bool grade_prediction(const std::vector<std::string>& predicted,
                      const std::vector<std::string>& gt) {
  return as_set(predicted) == as_set(gt);
}

std::string_view to_string(EntryOrigin o) {
  return o == EntryOrigin::corrected ? "corrected" : "passthrough";
}

EntryOrigin entry_origin_from_string(std::string_view s) {
  if (s == "corrected") return EntryOrigin::corrected;
  if (s == "passthrough") return EntryOrigin::passthrough;
  throw SchemaError("unknown entry origin '" + std::string(s) + "'");
}

nlohmann::ordered_json NotebookEntry::to_json() const {
  nlohmann::ordered_json j;
  j["entry_id"] = entry_id;
  j["spec_id"] = spec_id;
  j["assembly_id"] = assembly_id;
  j["specification"] = specification;
  j["desc_map"] = desc_map.to_json();
  j["corrected_cot"] = corrected_cot;
  j["final_answer"] = final_answer;
  j["origin"] = std::string(to_string(origin));
  j["correction_attempts"] = correction_attempts;
  return j;
}

NotebookEntry NotebookEntry::from_json(const nlohmann::ordered_json& j) {
  NotebookEntry e;
  try {
    e.entry_id = j.at("entry_id").get<std::string>();
    e.spec_id = j.at("spec_id").get<std::string>();
    e.assembly_id = j.value("assembly_id", "");
    e.specification = j.at("specification").get<std::string>();
    e.desc_map = DescriptionMap::from_json(j.at("desc_map"));
    e.corrected_cot = j.at("corrected_cot").get<std::string>();
    e.final_answer = j.at("final_answer").get<std::vector<std::string>>();
    e.origin = entry_origin_from_string(j.at("origin").get<std::string>());
    e.correction_attempts = j.value("correction_attempts", 0);
  } catch (const nlohmann::json::exception& ex) {
    throw SchemaError(std::string("malformed notebook entry: ") + ex.what());
  }
  return e;
}

nlohmann::ordered_json ExclusionRecord::to_json() const {
  return {{"spec_id", spec_id}, {"reason", reason}, {"attempts", attempts}};
}

ExclusionRecord ExclusionRecord::from_json(const nlohmann::ordered_json& j) {
  try {
    return {j.at("spec_id").get<std::string>(), j.at("reason").get<std::string>(),
            j.value("attempts", 0)};
  } catch (const nlohmann::json::exception& ex) {
    throw SchemaError(std::string("malformed exclusion record: ") + ex.what());
  }
}

const NotebookEntry* ErrorNotebook::find_spec(std::string_view spec_id) const {
  for (const auto& e : entries)
    if (e.spec_id == spec_id) return &e;
  return nullptr;
}

void ErrorNotebook::validate() const {
  std::set<std::string> specs, ids;
  for (const auto& e : entries) {
    if (!specs.insert(e.spec_id).second)
      throw ValidationError("duplicate notebook spec_id '" + e.spec_id + "'");
    if (!ids.insert(e.entry_id).second)
      throw ValidationError("duplicate notebook entry_id '" + e.entry_id + "'");
    try {
      validate_corrected_trajectory(e.corrected_cot, e.final_answer);
    } catch (const ValidationError& ex) {
      throw ValidationError("entry '" + e.entry_id + "': " + ex.what());
    }
  }
}

fs::path notebook_meta_path(const fs::path& notebook_path) {
  auto p = notebook_path;
  p += ".meta.json";
  return p;
}

void save_notebook(const ErrorNotebook& notebook, const fs::path& path) {
  std::vector<nlohmann::ordered_json> rows;
  rows.reserve(notebook.entries.size());
  for (const auto& e : notebook.entries) rows.push_back(e.to_json());
  write_file_atomic(path, to_jsonl(rows));
  nlohmann::ordered_json meta;
  meta["source_run_id"] = notebook.source_run_id;
  meta["model_name"] = notebook.model_name;
  meta["entry_count"] = notebook.entries.size();
  meta["exclusions"] = nlohmann::ordered_json::array();
  for (const auto& x : notebook.exclusions) meta["exclusions"].push_back(x.to_json());
  write_file_atomic(notebook_meta_path(path), meta.dump(2) + "\n");
}

ErrorNotebook load_notebook(const fs::path& path) {
  ErrorNotebook nb;
  for (const auto& row : read_jsonl(path)) nb.entries.push_back(NotebookEntry::from_json(row));
  auto meta_path = notebook_meta_path(path);
  if (fs::is_regular_file(meta_path)) {
    try {
      auto meta = nlohmann::ordered_json::parse(read_file(meta_path));
      nb.source_run_id = meta.value("source_run_id", "");
      nb.model_name = meta.value("model_name", "");
      if (meta.contains("exclusions"))
        for (const auto& x : meta["exclusions"])
          nb.exclusions.push_back(ExclusionRecord::from_json(x));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(meta_path.string() + ": " + ex.what());
    }
  }
  nb.validate();
  return nb;
}

ChatRequest build_correction_prompt(const fs::path& assembly_image,
                                    const DescriptionMap& descriptions,
                                    std::string_view specification,
                                    std::string_view prev_cot,
                                    const std::vector<std::string>& gt,
                                    const ModelSettings& settings, int attempt) {
  if (trim_view(prev_cot).empty())
    throw PreconditionError("correction needs a non-empty previous reasoning");
  if (trim_view(specification).empty())
    throw PreconditionError("correction needs a specification");
  if (gt.empty()) throw PreconditionError("correction needs ground-truth filenames");
  if (descriptions.empty()) throw PreconditionError("correction needs part descriptions");
  ChatRequest req;
  req.model_name = settings.model_name;
  req.temperature = settings.temperature;
  req.max_output = settings.answer_max_output;
  append_template_with_image(req, settings.prompts().correction,
                             {{"desc_lines", render_description_lines(descriptions)},
                              {"spec", std::string(specification)},
                              {"prev_cot", std::string(prev_cot)},
                              {"gt_answer", join(gt, ";")}},
                             encode_image_attachment(assembly_image));
  if (attempt > 1)
    req.add_text("Attempt " + std::to_string(attempt) +
                 ": make sure the last line is \"Final Answer:\" followed by exactly "
                 "these filenames: " + join(gt, ";"));
  return req;
}

ValidatedTrajectory validate_corrected_trajectory(std::string_view text,
                                                  const std::vector<std::string>& gt) {
  if (trim_view(text).empty()) throw ValidationError("empty trajectory");
  if (!has_final_answer_line(text))
    throw ValidationError("trajectory has no 'Final Answer' line");
  auto parsed = parse_final_answer(text);
  if (parsed.status == ParseStatus::failed)
    throw ValidationError("trajectory answer could not be parsed");
  if (!grade_prediction(parsed.filenames, gt))
    throw ValidationError("trajectory answers '" + join(parsed.filenames, ";") +
                          "', expected '" + join(gt, ";") + "'");
  return {std::string(text), std::move(parsed.filenames)};
}

std::string run_id_for(std::string_view results_bytes) {
  return "run-" + sha256_hex(results_bytes).substr(0, 12);
}

ErrorNotebook build_notebook(const std::vector<RetrievalResult>& baseline,
                             const std::vector<SpecItem>& specs, const CorpusIndex& corpus,
                             ChatBackend& backend, const ModelSettings& settings,
                             std::string source_run_id) {
  std::map<std::string, const SpecItem*> by_id;
  for (const auto& s : specs) by_id[s.spec_id] = &s;
  std::vector<std::pair<const RetrievalResult*, const SpecItem*>> work;
  std::set<std::string> seen;
  for (const auto& r : baseline) {
    auto it = by_id.find(r.spec_id);
    if (it == by_id.end())
      throw ConsistencyError("result for unknown spec_id '" + r.spec_id + "'");
    if (!seen.insert(r.spec_id).second)
      throw ConsistencyError("duplicate result for spec_id '" + r.spec_id + "'");
    work.emplace_back(&r, it->second);
  }

  using Outcome = std::variant<NotebookEntry, ExclusionRecord>;
  auto outcomes = parallel_map(work, settings.workers, [&](const auto& pair) -> Outcome {
    const auto& [result, spec] = pair;
    const auto* assembly = corpus.find(spec->assembly_id);
    if (!assembly) return ExclusionRecord{spec->spec_id, "unknown assembly", 0};
    auto descriptions = corpus.descriptions(*assembly);
    if (!descriptions || descriptions->empty())
      return ExclusionRecord{spec->spec_id, "no part descriptions", 0};

    NotebookEntry entry;
    entry.entry_id = "nb-" + spec->spec_id;
    entry.spec_id = spec->spec_id;
    entry.assembly_id = spec->assembly_id;
    entry.specification = spec->specification;
    entry.desc_map = *descriptions;
    entry.final_answer = spec->gt_filenames;

    bool correct = !result->error && grade_prediction(result->predicted, spec->gt_filenames);
    if (correct) {
      try {
        validate_corrected_trajectory(result->cot_text, spec->gt_filenames);
        entry.corrected_cot = result->cot_text;
        entry.origin = EntryOrigin::passthrough;
        return entry;
      } catch (const ValidationError&) {
        // Right answer but unusable reasoning text; fall through to correction.
      }
    }
    if (trim_view(result->cot_text).empty())
      return ExclusionRecord{spec->spec_id, "no previous reasoning to correct", 0};

    std::string last_problem;
    for (int attempt = 1; attempt <= 1 + kCorrectionRetries; ++attempt) {
      auto req = build_correction_prompt(assembly->assembly_image, *descriptions,
                                         spec->specification, result->cot_text,
                                         spec->gt_filenames, settings, attempt);
      std::string text;
      try {
        text = send_chat(req, backend, settings.retry, settings.clock_ref()).text;
      } catch (const Error& e) {
        return ExclusionRecord{spec->spec_id, std::string("backend failure: ") + e.what(),
                               attempt};
      }
      try {
        validate_corrected_trajectory(text, spec->gt_filenames);
      } catch (const ValidationError& e) {
        last_problem = e.what();
        continue;
      }
      entry.corrected_cot = std::move(text);
      entry.origin = EntryOrigin::corrected;
      entry.correction_attempts = attempt;
      return entry;
    }
    return ExclusionRecord{spec->spec_id, "no valid correction: " + last_problem,
                           1 + kCorrectionRetries};
  });

  ErrorNotebook nb;
  nb.source_run_id = std::move(source_run_id);
  nb.model_name = settings.model_name;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!outcomes[i].ok()) {
      nb.exclusions.push_back({work[i].second->spec_id, outcomes[i].error, 0});
      continue;
    }
    if (auto* e = std::get_if<NotebookEntry>(&*outcomes[i].value))
      nb.entries.push_back(std::move(*e));
    else
      nb.exclusions.push_back(std::get<ExclusionRecord>(*outcomes[i].value));
  }
  nb.validate();
  return nb;
}

}  // namespace cadrag
