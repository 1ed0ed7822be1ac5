#include "cadrag/pipeline.hpp"

#include <algorithm>
#include <cctype>

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

constexpr std::string_view kAnswerKeyword = "final answer";

bool is_decoration(char c) {
  return c == '*' || c == '_' || c == '#' || c == '>' || c == '`' || c == '-' ||
         c == ' ' || c == '\t';
}

struct AnswerLine {
  bool decorated = false;
  std::string rest;
};

// Recognises a line that starts with "Final Answer", optionally wrapped in
// markdown emphasis, headings or bullets.
std::optional<AnswerLine> match_answer_line(std::string_view line) {
  auto s = trim_view(line);
  AnswerLine out;
  std::size_t i = 0;
  while (i < s.size() && is_decoration(s[i])) ++i;
  if (i > 0) out.decorated = true;
  s.remove_prefix(i);
  if (!starts_with_icase(s, kAnswerKeyword)) return std::nullopt;
  s.remove_prefix(kAnswerKeyword.size());
  // "Final Answer:", "**Final Answer:**", "Final Answer -", "Final Answers:"
  if (!s.empty() && (s.front() == 's' || s.front() == 'S')) {
    s.remove_prefix(1);
    out.decorated = true;
  }
  std::size_t j = 0;
  while (j < s.size() && (s[j] == '*' || s[j] == '_')) ++j;
  if (j) out.decorated = true;
  s.remove_prefix(j);
  s = trim_view(s);
  if (!s.empty() && s.front() == ':') {
    s.remove_prefix(1);
  } else if (!s.empty() && (s.front() == '-' || s.front() == '=')) {
    s.remove_prefix(1);
    out.decorated = true;
  } else {
    out.decorated = true;
  }
  std::size_t k = 0;
  while (k < s.size() && (s[k] == '*' || s[k] == '_' || s[k] == ' ')) ++k;
  if (k && std::any_of(s.begin(), s.begin() + k, [](char c) { return c != ' '; }))
    out.decorated = true;
  s.remove_prefix(k);
  out.rest = trim(s);
  return out;
}

// Trailing markdown closers such as "**" or "`" left on an answer payload.
std::string strip_trailing_emphasis(std::string s, bool& changed) {
  while (!s.empty() && (s.back() == '*' || s.back() == '`' || s.back() == '_')) {
    s.pop_back();
    changed = true;
  }
  return trim(s);
}

bool is_fence_or_blank(std::string_view line) {
  auto t = trim_view(line);
  return t.empty() || t.substr(0, 3) == "```";
}

std::string clean_token(std::string_view raw, bool& changed) {
  auto t = trim_view(raw);
  auto strip_pair = [&](char open, char close) {
    if (t.size() >= 2 && t.front() == open && t.back() == close) {
      t = trim_view(t.substr(1, t.size() - 2));
      changed = true;
      return true;
    }
    return false;
  };
  bool again = true;
  while (again) {
    again = strip_pair('"', '"') || strip_pair('\'', '\'') || strip_pair('`', '`') ||
            strip_pair('[', ']') || strip_pair('(', ')') || strip_pair('*', '*');
  }
  while (!t.empty() && (t.back() == '.' || t.back() == ',' || t.back() == ':' ||
                        t.back() == '!' || t.back() == '?')) {
    t.remove_suffix(1);
    t = trim_view(t);
  }
  return std::string(t);
}

}  // namespace

std::string render_description_lines(const DescriptionMap& map) {
  std::string out;
  for (const auto& [filename, desc] : map.entries()) {
    if (!out.empty()) out += '\n';
    out += filename;
    out += ": ";
    out += desc;
  }
  return out;
}

void append_template_with_image(ChatRequest& request, const PromptTemplate& tmpl,
                                const std::map<std::string, std::string>& bindings,
                                const std::string& image_data_url) {
  const auto& text = tmpl.text();
  auto at = text.find(kImageMarker);
  if (at == std::string::npos) {
    request.add_text(tmpl.render(bindings));
    request.add_image(image_data_url);
    return;
  }
  // Render the halves separately so substituted values can never be
  // mistaken for the marker.
  PromptTemplate before(tmpl.id() + ":before", text.substr(0, at));
  PromptTemplate after(tmpl.id() + ":after", text.substr(at + kImageMarker.size()));
  std::map<std::string, std::string> b1, b2;
  for (const auto& p : before.placeholders()) {
    auto it = bindings.find(p);
    if (it != bindings.end()) b1.insert(*it);
  }
  for (const auto& p : after.placeholders()) {
    auto it = bindings.find(p);
    if (it != bindings.end()) b2.insert(*it);
  }
  auto head = before.render(b1);
  while (!head.empty() && head.back() == '\n') head.pop_back();
  auto tail = after.render(b2);
  while (!tail.empty() && tail.front() == '\n') tail.erase(tail.begin());
  if (!head.empty()) request.add_text(std::move(head));
  request.add_image(image_data_url);
  if (!tail.empty()) request.add_text(std::move(tail));
}

ChatRequest build_description_prompt(const fs::path& assembly_image,
                                     const fs::path& part_image,
                                     const ModelSettings& settings) {
  ChatRequest req;
  req.model_name = settings.model_name;
  req.temperature = settings.temperature;
  req.max_output = settings.describe_max_output;
  req.add_text(settings.prompts().describe.render({}));
  req.add_image(encode_image_attachment(assembly_image));
  req.add_image(encode_image_attachment(part_image));
  return req;
}

std::optional<std::string> normalize_description(std::string_view raw) {
  auto s = trim_view(raw);
  // Some models echo the example list format.
  if (s.size() >= 2 && (s[0] == '-' || s[0] == '*') && s[1] == ' ') s.remove_prefix(2);
  s = trim_view(s);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = trim_view(s.substr(1, s.size() - 2));
  while (!s.empty() && (s.back() == '.' || s.back() == ';')) {
    s.remove_suffix(1);
    s = trim_view(s);
  }
  if (s.empty() || s.find(';') != std::string_view::npos ||
      s.find('\n') != std::string_view::npos)
    return std::nullopt;
  return std::string(s);
}

DescribeOutcome describe_parts(const AssemblyRecord& assembly, ChatBackend& backend,
                               const ModelSettings& settings) {
  auto results = parallel_map(assembly.parts, settings.workers, [&](const PartRef& part) {
    auto req = build_description_prompt(assembly.assembly_image, part.image, settings);
    auto resp = send_chat(req, backend, settings.retry, settings.clock_ref());
    return resp.text;
  });
  DescribeOutcome out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& filename = assembly.parts[i].filename;
    if (!results[i].ok()) {
      out.failures.push_back({filename, results[i].error});
      continue;
    }
    auto desc = normalize_description(*results[i].value);
    if (!desc) {
      out.failures.push_back(
          {filename, trim_view(*results[i].value).empty()
                         ? "empty description"
                         : "unusable description: " + trim(*results[i].value)});
      continue;
    }
    out.descriptions.set(filename, *desc);
  }
  return out;
}

ChatRequest build_retrieval_prompt(const fs::path& assembly_image,
                                   const DescriptionMap& descriptions,
                                   std::string_view specification,
                                   const std::optional<std::string>& fewshot_block,
                                   const ModelSettings& settings) {
  if (descriptions.empty())
    throw PreconditionError("retrieval needs at least one part description");
  if (trim_view(specification).empty())
    throw PreconditionError("retrieval needs a non-empty specification");
  const auto& prompts = settings.prompts();
  ChatRequest req;
  req.model_name = settings.model_name;
  req.temperature = settings.temperature;
  req.max_output = settings.answer_max_output;
  std::string lead;
  if (fewshot_block && !fewshot_block->empty()) {
    req.add_text(*fewshot_block);
    lead = prompts.retrieval_fewshot_lead.render({});
  } else {
    lead = prompts.retrieval_zero_shot_lead.render({});
  }
  PromptTemplate full(prompts.retrieval.id(), lead + "\n\n" + prompts.retrieval.text());
  append_template_with_image(
      req, full,
      {{"desc_lines", render_description_lines(descriptions)},
       {"spec", std::string(trim_view(specification))}},
      encode_image_attachment(assembly_image));
  return req;
}

ChatRequest build_image_only_prompt(const AssemblyRecord& assembly,
                                    std::string_view specification,
                                    const ModelSettings& settings) {
  if (assembly.parts.empty()) throw PreconditionError("assembly has no parts");
  if (trim_view(specification).empty())
    throw PreconditionError("image-only retrieval needs a non-empty specification");
  const auto& prompts = settings.prompts();
  ChatRequest req;
  req.model_name = settings.model_name;
  req.temperature = settings.temperature;
  req.max_output = settings.answer_max_output;
  req.add_text(prompts.retrieval_zero_shot_lead.render({}) + "\n\nAssembly image:");
  req.add_image(encode_image_attachment(assembly.assembly_image));
  req.add_text("Part images (each labelled with its filename):");
  for (const auto& part : assembly.parts) {
    req.add_text(part.filename + ":");
    req.add_image(encode_image_attachment(part.image));
  }
  // Reuse the task and output-format section of the retrieval template.
  auto rendered = prompts.retrieval.render(
      {{"desc_lines", "(see the labelled part images above)"},
       {"spec", std::string(trim_view(specification))}});
  auto spec_at = rendered.find("Specification:");
  req.add_text(spec_at == std::string::npos ? rendered : rendered.substr(spec_at));
  return req;
}

std::string_view to_string(ParseStatus s) {
  switch (s) {
    case ParseStatus::ok: return "ok";
    case ParseStatus::recovered: return "recovered";
    case ParseStatus::failed: return "failed";
  }
  return "failed";
}

ParseStatus parse_status_from_string(std::string_view s) {
  if (s == "ok") return ParseStatus::ok;
  if (s == "recovered") return ParseStatus::recovered;
  if (s == "failed") return ParseStatus::failed;
  throw SchemaError("unknown parse status '" + std::string(s) + "'");
}

bool is_filename_token(std::string_view t) {
  if (t.empty() || t != trim_view(t)) return false;
  for (char c : t) {
    auto u = static_cast<unsigned char>(c);
    if (u < 0x20 || c == ';' || c == '/' || c == '\\' || c == '"' || c == '\'' ||
        c == '`' || c == '*')
      return false;
  }
  auto dot = t.rfind('.');
  if (dot == std::string_view::npos || dot == 0) return false;
  auto ext = t.substr(dot + 1);
  if (ext.empty() || ext.size() > 5) return false;
  return std::all_of(ext.begin(), ext.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
}

ParsedAnswer parse_final_answer(std::string_view text) {
  ParsedAnswer out;
  auto lines = split_lines(text);
  std::optional<AnswerLine> found;
  std::size_t at = 0;
  for (std::size_t i = lines.size(); i-- > 0;) {
    if (auto m = match_answer_line(lines[i])) {
      found = std::move(m);
      at = i;
      break;
    }
  }
  if (!found) return out;

  bool recovered = found->decorated;
  std::string payload = strip_trailing_emphasis(found->rest, recovered);
  if (payload.empty()) {
    for (std::size_t j = at + 1; j < lines.size(); ++j) {
      if (is_fence_or_blank(lines[j])) continue;
      payload = trim(lines[j]);
      break;
    }
    bool unused = false;
    payload = strip_trailing_emphasis(payload, unused);
    if (unused) recovered = true;
  }
  if (payload.empty()) return out;

  auto raw_tokens = split(payload, ';');
  if (raw_tokens.size() == 1 && payload.find(',') != std::string::npos) {
    auto comma_tokens = split(payload, ',');
    bool all_names = std::all_of(comma_tokens.begin(), comma_tokens.end(), [](const auto& t) {
      bool c = false;
      return is_filename_token(clean_token(t, c));
    });
    if (all_names) {
      raw_tokens = std::move(comma_tokens);
      recovered = true;
    }
  }
  for (const auto& raw : raw_tokens) {
    auto token = clean_token(raw, recovered);
    if (token.empty()) continue;
    if (std::find(out.filenames.begin(), out.filenames.end(), token) != out.filenames.end())
      continue;
    if (!is_filename_token(token)) recovered = true;
    out.filenames.push_back(std::move(token));
  }
  if (out.filenames.empty()) return out;
  out.status = recovered ? ParseStatus::recovered : ParseStatus::ok;
  return out;
}

std::string format_answer(const std::vector<std::string>& filenames) {
  return "Final Answer:\n" + join(filenames, ";");
}

nlohmann::ordered_json RetrievalResult::to_json() const {
  nlohmann::ordered_json j;
  j["spec_id"] = spec_id;
  j["assembly_id"] = assembly_id;
  j["predicted"] = predicted;
  j["parse_status"] = std::string(to_string(parse_status));
  j["cot_text"] = cot_text;
  j["warnings"] = warnings;
  if (error) j["error"] = *error;
  if (exemplar_ids) j["exemplar_ids"] = *exemplar_ids;
  return j;
}

RetrievalResult RetrievalResult::from_json(const nlohmann::ordered_json& j) {
  RetrievalResult r;
  try {
    r.spec_id = j.at("spec_id").get<std::string>();
    r.assembly_id = j.value("assembly_id", "");
    r.predicted = j.at("predicted").get<std::vector<std::string>>();
    r.parse_status = parse_status_from_string(j.at("parse_status").get<std::string>());
    r.cot_text = j.value("cot_text", "");
    if (j.contains("warnings")) r.warnings = j["warnings"].get<std::vector<std::string>>();
    if (j.contains("error")) r.error = j["error"].get<std::string>();
    if (j.contains("exemplar_ids"))
      r.exemplar_ids = j["exemplar_ids"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed retrieval result: ") + e.what());
  }
  return r;
}

std::vector<RetrievalResult> load_results(const fs::path& path) {
  std::vector<RetrievalResult> out;
  for (const auto& row : read_jsonl(path)) out.push_back(RetrievalResult::from_json(row));
  return out;
}

void save_results(const std::vector<RetrievalResult>& results, const fs::path& path) {
  std::vector<nlohmann::ordered_json> rows;
  rows.reserve(results.size());
  for (const auto& r : results) rows.push_back(r.to_json());
  write_file_atomic(path, to_jsonl(rows));
}

RetrievalResult run_retrieval_request(const SpecItem& spec, const ChatRequest& request,
                                      const std::vector<std::string>& known,
                                      ChatBackend& backend, const ModelSettings& settings) {
  RetrievalResult result;
  result.spec_id = spec.spec_id;
  result.assembly_id = spec.assembly_id;
  ModelResponse resp;
  try {
    resp = send_chat(request, backend, settings.retry, settings.clock_ref());
  } catch (const Error& e) {
    result.parse_status = ParseStatus::failed;
    result.error = e.what();
    return result;
  }
  result.cot_text = resp.text;
  auto parsed = parse_final_answer(resp.text);
  result.parse_status = parsed.status;
  for (auto& name : parsed.filenames) {
    if (std::find(known.begin(), known.end(), name) == known.end()) {
      result.warnings.push_back("hallucinated filename '" + name + "' dropped");
      continue;
    }
    result.predicted.push_back(std::move(name));
  }
  if (parsed.status == ParseStatus::failed)
    result.warnings.push_back("no 'Final Answer:' line found");
  return result;
}

RetrievalResult retrieve_parts(const SpecItem& spec, const AssemblyRecord& assembly,
                               const DescriptionMap& descriptions, ChatBackend& backend,
                               const ModelSettings& settings,
                               const std::optional<std::string>& fewshot_block) {
  auto request = build_retrieval_prompt(assembly.assembly_image, descriptions,
                                        spec.specification, fewshot_block, settings);
  return run_retrieval_request(spec, request, descriptions.filenames(), backend, settings);
}

RetrievalResult retrieve_parts_image_only(const SpecItem& spec,
                                          const AssemblyRecord& assembly,
                                          ChatBackend& backend,
                                          const ModelSettings& settings) {
  auto request = build_image_only_prompt(assembly, spec.specification, settings);
  std::vector<std::string> known;
  for (const auto& p : assembly.parts) known.push_back(p.filename);
  return run_retrieval_request(spec, request, known, backend, settings);
}

std::vector<RetrievalResult> retrieve_all(const CorpusIndex& corpus,
                                          const std::vector<SpecItem>& specs,
                                          ChatBackend& backend,
                                          const ModelSettings& settings,
                                          bool image_only) {
  auto results = parallel_map(specs, settings.workers, [&](const SpecItem& spec) {
    const auto& assembly = corpus.at(spec.assembly_id);
    if (image_only) return retrieve_parts_image_only(spec, assembly, backend, settings);
    auto descriptions = corpus.require_descriptions(assembly);
    return retrieve_parts(spec, assembly, descriptions, backend, settings);
  });
  std::vector<RetrievalResult> out;
  out.reserve(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].ok()) {
      out.push_back(std::move(*results[i].value));
      continue;
    }
    RetrievalResult failed;
    failed.spec_id = specs[i].spec_id;
    failed.assembly_id = specs[i].assembly_id;
    failed.error = results[i].error;
    out.push_back(std::move(failed));
  }
  return out;
}

}  // namespace cadrag
