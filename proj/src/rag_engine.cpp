#include "cadrag/rag_engine.hpp"

#include <algorithm>
#include <cmath>

#include "cadrag/text_util.hpp"

namespace cadrag {

namespace {

bool is_token_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         c >= 0x80;
}

void normalize(SparseVector& v) {
  double norm = 0.0;
  for (const auto& [d, w] : v) norm += w * w;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    v.clear();
    return;
  }
  for (auto& [d, w] : v) w /= norm;
}

std::vector<IndexedDoc> docs_of(const ErrorNotebook& notebook) {
  std::vector<IndexedDoc> docs;
  docs.reserve(notebook.entries.size());
  for (const auto& e : notebook.entries)
    docs.push_back({e.entry_id, e.spec_id, e.specification});
  return docs;
}

std::vector<double> unit(std::vector<double> v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& x : v) x /= norm;
  return v;
}

}  // namespace

std::vector<std::string> analyze(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (cur.size() >= 2) tokens.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (!is_token_byte(c)) {
      flush();
      continue;
    }
    cur += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch;
  }
  flush();
  return tokens;
}

double dot(const SparseVector& a, const SparseVector& b) {
  double sum = 0.0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (i->first < j->first) ++i;
    else if (j->first < i->first) ++j;
    else sum += (i++)->second * (j++)->second;
  }
  return sum;
}

void rank_and_truncate(std::vector<RankedEntry>& entries, std::size_t k) {
  std::sort(entries.begin(), entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entry_id < b.entry_id;
  });
  if (entries.size() > k) entries.resize(k);
}

SpecIndex::SpecIndex(std::vector<IndexedDoc> docs) : docs_(std::move(docs)) {
  if (docs_.empty()) throw PreconditionError("cannot index an empty notebook");
  std::vector<std::map<std::string, int>> counts(docs_.size());
  for (std::size_t i = 0; i < docs_.size(); ++i)
    for (auto& t : analyze(docs_[i].text)) ++counts[i][t];
  std::map<std::string, int> df;
  for (const auto& c : counts)
    for (const auto& [t, n] : c) ++df[t];
  std::size_t dim = 0;
  for (const auto& [t, n] : df) vocab_.emplace(t, dim++);
  const double N = static_cast<double>(docs_.size());
  idf_.reserve(dim);
  for (const auto& [t, n] : df) idf_.push_back(std::log((1.0 + N) / (1.0 + n)) + 1.0);
  vectors_.reserve(docs_.size());
  for (const auto& c : counts) {
    SparseVector v;
    for (const auto& [t, n] : c) {
      auto d = vocab_.at(t);
      v.emplace_back(d, n * idf_[d]);
    }
    normalize(v);
    vectors_.push_back(std::move(v));
  }
}

SpecIndex::SpecIndex(const ErrorNotebook& notebook) : SpecIndex(docs_of(notebook)) {}

SparseVector SpecIndex::vectorize(std::string_view text) const {
  std::map<std::size_t, int> tf;
  for (const auto& t : analyze(text)) {
    auto it = vocab_.find(t);
    if (it != vocab_.end()) ++tf[it->second];
  }
  SparseVector v;
  for (const auto& [d, n] : tf) v.emplace_back(d, n * idf_[d]);
  normalize(v);
  return v;
}

double SpecIndex::similarity(std::string_view a, std::string_view b) const {
  return dot(vectorize(a), vectorize(b));
}

std::vector<RankedEntry> SpecIndex::top_k(std::string_view query, std::size_t k,
                                          std::string_view exclude_spec_id) const {
  if (k < 1) throw PreconditionError("k must be >= 1");
  auto q = vectorize(query);
  std::vector<RankedEntry> out;
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    if (docs_[i].spec_id == exclude_spec_id) continue;
    out.push_back({docs_[i].entry_id, dot(q, vectors_[i])});
  }
  rank_and_truncate(out, k);
  return out;
}

EmbeddingIndex::EmbeddingIndex(std::vector<IndexedDoc> docs, Embedder embedder)
    : docs_(std::move(docs)), embedder_(std::move(embedder)) {
  if (docs_.empty()) throw PreconditionError("cannot index an empty notebook");
  for (const auto& d : docs_) vectors_.push_back(unit(embedder_(d.text)));
}

EmbeddingIndex::EmbeddingIndex(const ErrorNotebook& notebook, Embedder embedder)
    : EmbeddingIndex(docs_of(notebook), std::move(embedder)) {}

std::vector<RankedEntry> EmbeddingIndex::top_k(std::string_view query, std::size_t k,
                                               std::string_view exclude_spec_id) const {
  if (k < 1) throw PreconditionError("k must be >= 1");
  auto q = unit(embedder_(std::string(query)));
  std::vector<RankedEntry> out;
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    if (docs_[i].spec_id == exclude_spec_id) continue;
    const auto& v = vectors_[i];
    if (v.size() != q.size())
      throw ConsistencyError("embedding dimension mismatch for '" + docs_[i].entry_id + "'");
    double s = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) s += v[j] * q[j];
    out.push_back({docs_[i].entry_id, s});
  }
  rank_and_truncate(out, k);
  return out;
}

std::string_view to_string(ExemplarMode m) {
  return m == ExemplarMode::cot ? "cot" : "answer_only";
}

ExemplarMode exemplar_mode_from_string(std::string_view s) {
  if (s == "cot") return ExemplarMode::cot;
  if (s == "answer_only" || s == "answer-only") return ExemplarMode::answer_only;
  throw PreconditionError("unknown exemplar mode '" + std::string(s) + "'");
}

FewShotBlock build_fewshot_block(const std::vector<const NotebookEntry*>& entries,
                                 ExemplarMode mode) {
  if (entries.empty()) throw PreconditionError("few-shot block needs at least one entry");
  FewShotBlock block;
  block.mode = mode;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = *entries[i];
    if (i) block.text += kExemplarDelimiter;
    block.text += "Example " + std::to_string(i + 1) + ":\nPart descriptions:\n" +
                  render_description_lines(e.desc_map) +
                  "\n\nSpecification: " + e.specification + "\n\n";
    if (mode == ExemplarMode::cot) block.text += trim(e.corrected_cot);
    else block.text += format_answer(e.final_answer);
    block.entry_ids.push_back(e.entry_id);
  }
  return block;
}

RetrievalResult rag_infer(const SpecItem& spec, const AssemblyRecord& assembly,
                          const DescriptionMap& descriptions, const ErrorNotebook& notebook,
                          const ExemplarRetriever& retriever, ChatBackend& backend,
                          const ModelSettings& settings, std::size_t k, ExemplarMode mode) {
  if (k < 1) throw PreconditionError("k must be >= 1");
  auto ranked = retriever.top_k(spec.specification, k, spec.spec_id);
  std::vector<const NotebookEntry*> chosen;
  for (const auto& r : ranked) {
    auto it = std::find_if(notebook.entries.begin(), notebook.entries.end(),
                           [&](const NotebookEntry& e) { return e.entry_id == r.entry_id; });
    if (it == notebook.entries.end())
      throw ConsistencyError("retriever returned unknown entry '" + r.entry_id + "'");
    if (it->spec_id == spec.spec_id)
      throw ConsistencyError("retriever returned the query's own entry '" + r.entry_id + "'");
    chosen.push_back(&*it);
  }
  if (chosen.empty()) {
    auto result = retrieve_parts(spec, assembly, descriptions, backend, settings);
    result.warnings.insert(result.warnings.begin(),
                           "no eligible exemplars; answered zero-shot");
    result.exemplar_ids = std::vector<std::string>{};
    return result;
  }
  auto block = build_fewshot_block(chosen, mode);
  auto result = retrieve_parts(spec, assembly, descriptions, backend, settings, block.text);
  result.exemplar_ids = block.entry_ids;
  return result;
}

std::vector<RetrievalResult> rag_infer_all(const CorpusIndex& corpus,
                                           const std::vector<SpecItem>& specs,
                                           const ErrorNotebook& notebook,
                                           const ExemplarRetriever& retriever,
                                           ChatBackend& backend, const ModelSettings& settings,
                                           std::size_t k, ExemplarMode mode) {
  auto results = parallel_map(specs, settings.workers, [&](const SpecItem& spec) {
    const auto& assembly = corpus.at(spec.assembly_id);
    auto descriptions = corpus.require_descriptions(assembly);
    return rag_infer(spec, assembly, descriptions, notebook, retriever, backend, settings, k,
                     mode);
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
    failed.exemplar_ids = std::vector<std::string>{};
    out.push_back(std::move(failed));
  }
  return out;
}

}  // namespace cadrag
