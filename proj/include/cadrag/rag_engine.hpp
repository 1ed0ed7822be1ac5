#pragma once

// Retrieval-augmented inference: rank notebook entries by specification
// similarity and prepend the best ones as few-shot exemplars.

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cadrag/corpus.hpp"
#include "cadrag/error_notebook.hpp"
#include "cadrag/pipeline.hpp"

namespace cadrag {

/// ASCII case-fold, split on runs of non-alphanumeric bytes (bytes >= 0x80
/// are kept as token bytes), drop tokens shorter than 2.
std::vector<std::string> analyze(std::string_view text);

/// Sorted by dimension.
using SparseVector = std::vector<std::pair<std::size_t, double>>;
double dot(const SparseVector& a, const SparseVector& b);

struct RankedEntry {
  std::string entry_id;
  double score = 0.0;
};

/// Anything that can rank notebook entries for a query specification.
class ExemplarRetriever {
 public:
  virtual ~ExemplarRetriever() = default;
  /// Entries ranked by descending similarity, ties by ascending entry_id,
  /// entries of `exclude_spec_id` removed. At most k results.
  virtual std::vector<RankedEntry> top_k(std::string_view query, std::size_t k,
                                         std::string_view exclude_spec_id) const = 0;
};

struct IndexedDoc {
  std::string entry_id;
  std::string spec_id;
  std::string text;
};

/// Smoothed tf-idf over specification text, L2-normalized, cosine scored.
/// Immutable after construction.
class SpecIndex : public ExemplarRetriever {
 public:
  /// Throws PreconditionError when empty.
  explicit SpecIndex(std::vector<IndexedDoc> docs);
  explicit SpecIndex(const ErrorNotebook& notebook);

  std::size_t size() const noexcept { return docs_.size(); }
  const std::map<std::string, std::size_t>& vocabulary() const noexcept { return vocab_; }
  const std::vector<double>& idf() const noexcept { return idf_; }
  const SparseVector& vector_of(std::size_t doc) const { return vectors_.at(doc); }
  const IndexedDoc& doc(std::size_t i) const { return docs_.at(i); }

  /// Unit vector for arbitrary text; tokens outside the vocabulary are
  /// ignored. Empty when nothing is left.
  SparseVector vectorize(std::string_view text) const;
  double similarity(std::string_view a, std::string_view b) const;

  std::vector<RankedEntry> top_k(std::string_view query, std::size_t k,
                                 std::string_view exclude_spec_id) const override;

 private:
  std::vector<IndexedDoc> docs_;
  std::map<std::string, std::size_t> vocab_;
  std::vector<double> idf_;
  std::vector<SparseVector> vectors_;
};

/// Dense-embedding ranking, for live runs against an embedding service.
class EmbeddingIndex : public ExemplarRetriever {
 public:
  using Embedder = std::function<std::vector<double>(const std::string&)>;
  EmbeddingIndex(std::vector<IndexedDoc> docs, Embedder embedder);
  EmbeddingIndex(const ErrorNotebook& notebook, Embedder embedder);

  std::vector<RankedEntry> top_k(std::string_view query, std::size_t k,
                                 std::string_view exclude_spec_id) const override;

 private:
  std::vector<IndexedDoc> docs_;
  std::vector<std::vector<double>> vectors_;
  Embedder embedder_;
};

/// Ranks candidate (entry_id, score) pairs: score descending, entry_id
/// ascending, then truncates to k.
void rank_and_truncate(std::vector<RankedEntry>& entries, std::size_t k);

enum class ExemplarMode { cot, answer_only };
std::string_view to_string(ExemplarMode m);
/// Accepts "cot", "answer_only" and "answer-only".
ExemplarMode exemplar_mode_from_string(std::string_view s);

inline constexpr std::string_view kExemplarDelimiter = "\n\n==========\n\n";

struct FewShotBlock {
  ExemplarMode mode = ExemplarMode::cot;
  std::string text;
  std::vector<std::string> entry_ids;
};

/// Throws PreconditionError when `entries` is empty.
FewShotBlock build_fewshot_block(const std::vector<const NotebookEntry*>& entries,
                                 ExemplarMode mode);

inline constexpr std::size_t kDefaultExemplars = 2;

/// Few-shot retrieval for one spec. Falls back to zero-shot (with a warning
/// and empty exemplar_ids) when no entry is eligible.
RetrievalResult rag_infer(const SpecItem& spec, const AssemblyRecord& assembly,
                          const DescriptionMap& descriptions, const ErrorNotebook& notebook,
                          const ExemplarRetriever& retriever, ChatBackend& backend,
                          const ModelSettings& settings = {},
                          std::size_t k = kDefaultExemplars,
                          ExemplarMode mode = ExemplarMode::cot);

/// rag_infer over many specs with settings.workers in flight. Items whose
/// assembly or descriptions are missing come back failed with an error.
std::vector<RetrievalResult> rag_infer_all(const CorpusIndex& corpus,
                                           const std::vector<SpecItem>& specs,
                                           const ErrorNotebook& notebook,
                                           const ExemplarRetriever& retriever,
                                           ChatBackend& backend,
                                           const ModelSettings& settings = {},
                                           std::size_t k = kDefaultExemplars,
                                           ExemplarMode mode = ExemplarMode::cot);

}  // namespace cadrag
