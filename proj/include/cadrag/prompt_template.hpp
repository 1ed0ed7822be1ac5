#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cadrag/error.hpp"

namespace cadrag {

/// Text with `{name}` placeholders. Every placeholder in the text is
/// required; rendering fails if one is left unbound.
class PromptTemplate {
 public:
  PromptTemplate() = default;
  PromptTemplate(std::string id, std::string text);

  const std::string& id() const noexcept { return id_; }
  const std::string& text() const noexcept { return text_; }
  const std::vector<std::string>& placeholders() const noexcept {
    return placeholders_;
  }

  /// Throws RenderError naming the missing bindings.
  std::string render(const std::map<std::string, std::string>& bindings) const;

 private:
  std::string id_;
  std::string text_;
  std::vector<std::string> placeholders_;
};

/// Names of `{identifier}` markers occurring in `text`, in order, unique.
std::vector<std::string> find_placeholders(std::string_view text);

/// Marker separating the text before and after the attached assembly image
/// in the retrieval and correction templates.
inline constexpr std::string_view kImageMarker = "[image attached]";

struct TemplateSet {
  PromptTemplate describe;
  PromptTemplate specgen;
  PromptTemplate correction;
  PromptTemplate retrieval;
  /// Opening line used when few-shot exemplars precede the query.
  PromptTemplate retrieval_fewshot_lead;
  /// Opening line used without exemplars.
  PromptTemplate retrieval_zero_shot_lead;

  static const TemplateSet& defaults();
  /// Defaults, with any of describe.txt, specgen.txt, correction.txt,
  /// retrieval.txt found in `dir` replacing the matching template.
  static TemplateSet with_overrides(const std::filesystem::path& dir);
};

}  // namespace cadrag
