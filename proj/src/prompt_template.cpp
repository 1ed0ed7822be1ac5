#include "cadrag/prompt_template.hpp"

#include <algorithm>
#include <cctype>

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

// Length of a `{identifier}` marker starting at text[i], or 0.
std::size_t marker_length(std::string_view text, std::size_t i) {
  if (text[i] != '{') return 0;
  std::size_t j = i + 1;
  if (j >= text.size() || !(std::isalpha(static_cast<unsigned char>(text[j])) || text[j] == '_'))
    return 0;
  while (j < text.size() && is_ident_char(text[j])) ++j;
  if (j >= text.size() || text[j] != '}') return 0;
  return j - i + 1;
}

constexpr const char* kDescribe =
    R"(You are an expert mechanical engineer. Given Image 1 (the assembly) and Image 2 (an individual part from the assembly), please generate a concise and descriptive noun phrase (not a full sentence). The phrase should briefly describe the part's main shape and any key features, in a way that clearly distinguishes it from the other parts in the assembly. Avoid generic names like 'part' or 'component'. Be specific about the shape and any holes, slots, or functional features. Your output should be a single noun phrase.

..........

For example:
- A conical mount with a forked top;
- A cylindrical pin;
- Two plates with each having holes;
- A flat round disk with three small holes;
- A rectangular bracket with two mounting slots.)";

constexpr const char* kSpecgen =
    R"(You are an expert mechanical engineer.
Given an image of an assembled product (assembly) and a list of its part descriptions below:

Part descriptions:
{desc_list_str}

..........

Your task:
1. Review the assembly image and the list of part descriptions.
2. Choose any two part descriptions that are most likely to have a direct physical, spatial, or functional relationship in the assembly (such as fit, mounting, alignment, or coupling).
3. Generate one specification sentence (inspection/check item) that describes the required relationship, fit, or assembly condition between these two parts, as would appear in a manufacturing or assembly checklist.
4. Your specification should be clear, specific, and professional, mentioning both selected part descriptions explicitly.
5. Output only one specification sentence. Do not explain your reasoning.
6. Output format: The selected two part descriptions (exactly as shown above, separated by a semicolon), then a line break, then the specification sentence.

..........

For example, given descriptions like:
1. A cylindrical pin
2. A flat plate with holes

Output:
A cylindrical pin;A flat plate with holes
The cylindrical pin must be fully inserted into one of the holes on the flat plate.)";

constexpr const char* kCorrection =
    R"(You are an expert mechanical engineer with a sharp analytical mind. You are given the assembly image, the descriptions of all parts (each as 'filename: description'), the inspection specification, and a previous reasoning process (including its step-by-step thoughts and its Final Answer).

..........

Your job:
1. Carefully read the previous reasoning step-by-step. Follow along and reproduce the steps until you encounter the first error or mistake.
2. Once you spot the first mistake, stop following the previous reasoning and use a natural transition phrase (such as: "But, wait, let's pause and examine this more carefully." or "Wait, something seems off. Let's pause and consider what we know so far.") to point out the error and correct it.
3. From that point on, continue the reasoning process in your own words, step-by-step, until you reach the correct answer (i.e., the filenames consistent with the correct ground-truth solution).
4. Do not mention "previous attempt" or "ground-truth solution" explicitly. Make your reasoning sound like a student discovering and correcting their own mistake in real time.
5. If the previous reasoning is already correct, simply reproduce the previous reasoning and the final answer as is.
6. End your output with a "Final Answer:" line followed by the filenames (from the keys above), separated by semicolons (;), with no extra words or punctuation.

..........

Assembly image:
[image attached]

Part descriptions:
{desc_lines}

Specification: {spec}

Previous reasoning:
<<<BEGIN PREVIOUS REASONING>>>
{prev_cot}
<<<END PREVIOUS REASONING>>>

Correct filenames: {gt_answer})";

constexpr const char* kRetrieval =
    R"(Assembly image:
[image attached]

Part descriptions:
{desc_lines}

Specification: {spec}

..........

Your task:
1. Think step by step (Chain-of-Thought) and explain how you identify the required part(s).
2. In the last line, write 'Final Answer:' followed by only the selected part filenames (from the keys above), separated by semicolons (;), with no extra words or punctuation.

Example output:
Chain-of-Thought:
First, I check the descriptions of all parts. Only part1.png and part2.png are described as cylindrical pins. Therefore, the required parts are part1.png and part2.png.

Final Answer:
part1.png;part2.png)";

constexpr const char* kFewshotLead =
    "Now, for the following question, use the above reasoning as reference "
    "and answer step-by-step:";
constexpr const char* kZeroShotLead =
    "For the following question, answer step-by-step:";

}  // namespace

std::vector<std::string> find_placeholders(std::string_view text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    auto len = marker_length(text, i);
    if (!len) continue;
    std::string name(text.substr(i + 1, len - 2));
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
    i += len - 1;
  }
  return out;
}

PromptTemplate::PromptTemplate(std::string id, std::string text)
    : id_(std::move(id)), text_(std::move(text)), placeholders_(find_placeholders(text_)) {}

std::string PromptTemplate::render(
    const std::map<std::string, std::string>& bindings) const {
  std::vector<std::string> missing;
  for (const auto& p : placeholders_)
    if (!bindings.count(p)) missing.push_back(p);
  if (!missing.empty())
    throw RenderError("template '" + id_ + "' has unbound placeholders: " +
                      join(missing, ", "));
  std::string out;
  out.reserve(text_.size());
  for (std::size_t i = 0; i < text_.size(); ++i) {
    auto len = marker_length(text_, i);
    if (len) {
      out += bindings.at(std::string(text_.substr(i + 1, len - 2)));
      i += len - 1;
    } else {
      out += text_[i];
    }
  }
  return out;
}

const TemplateSet& TemplateSet::defaults() {
  static const TemplateSet set{
      PromptTemplate("describe", kDescribe),
      PromptTemplate("specgen", kSpecgen),
      PromptTemplate("correction", kCorrection),
      PromptTemplate("retrieval", kRetrieval),
      PromptTemplate("retrieval_fewshot_lead", kFewshotLead),
      PromptTemplate("retrieval_zero_shot_lead", kZeroShotLead),
  };
  return set;
}

TemplateSet TemplateSet::with_overrides(const std::filesystem::path& dir) {
  TemplateSet set = defaults();
  auto load = [&](const char* file, PromptTemplate& slot) {
    auto path = dir / file;
    if (std::filesystem::is_regular_file(path))
      slot = PromptTemplate(slot.id(), read_file(path));
  };
  load("describe.txt", set.describe);
  load("specgen.txt", set.specgen);
  load("correction.txt", set.correction);
  load("retrieval.txt", set.retrieval);
  load("retrieval_fewshot_lead.txt", set.retrieval_fewshot_lead);
  load("retrieval_zero_shot_lead.txt", set.retrieval_zero_shot_lead);
  return set;
}

}  // namespace cadrag
