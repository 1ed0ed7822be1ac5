// cadrag: command-line front end for the retrieval pipeline, notebook,
// evaluation and annotation tooling.

#include <cstdlib>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cadrag/annotate_service.hpp"
#include "cadrag/corpus.hpp"
#include "cadrag/datasetgen.hpp"
#include "cadrag/error_notebook.hpp"
#include "cadrag/eval_harness.hpp"
#include "cadrag/http_backend.hpp"
#include "cadrag/pipeline.hpp"
#include "cadrag/rag_engine.hpp"
#include "cadrag/step_parser.hpp"
#include "cadrag/text_util.hpp"

namespace {

using namespace cadrag;

struct GlobalOptions {
  std::string replay;
  std::string record;
  std::string model;
  std::string dialect;
  std::string base_url;
  std::string templates;
  std::size_t workers = 4;
};

/// Owns whichever backend the options select.
class BackendHolder {
 public:
  explicit BackendHolder(const GlobalOptions& g) : g_(g) {}

  ChatBackend& get() {
    if (active_) return *active_;
    if (!g_.replay.empty()) {
      active_ = replay_backend(ReplayFixture::load(g_.replay));
      return *active_;
    }
    auto env = model_config_from_env();
    if (!env)
      throw PreconditionError(
          "no model backend: set MODEL_API_KEY (and optionally MODEL_BASE_URL, MODEL_NAME, "
          "MODEL_DIALECT) or pass --replay <fixture>");
    if (!g_.dialect.empty()) env->backend.dialect = wire_dialect_from_string(g_.dialect);
    if (!g_.base_url.empty()) env->backend.base_url = g_.base_url;
    live_ = std::make_unique<HttpChatBackend>(env->backend);
    if (g_.record.empty()) {
      active_ = std::move(live_);
      return *active_;
    }
    active_ = std::make_unique<RecordingBackend>(*live_);
    return *active_;
  }

  /// Model name for fingerprints and reports.
  std::string model_name() const {
    if (!g_.model.empty()) return g_.model;
    if (g_.replay.empty())
      if (auto env = model_config_from_env()) return env->model_name;
    return ModelSettings{}.model_name;
  }

  /// Merges newly recorded exchanges into the --record fixture.
  void flush() {
    auto* rec = dynamic_cast<RecordingBackend*>(active_.get());
    if (!rec) return;
    std::map<std::string, std::string> merged;
    if (fs::is_regular_file(g_.record))
      for (const auto& r : ReplayFixture::load(g_.record).records())
        merged[r.fingerprint] = r.response_text;
    for (const auto& r : rec->fixture().records()) merged[r.fingerprint] = r.response_text;
    std::vector<ReplayRecord> records;
    for (auto& [fp, text] : merged) records.push_back({fp, text});
    ReplayFixture(std::move(records)).save(g_.record);
  }

  const ReplayBackend* replay() const { return dynamic_cast<const ReplayBackend*>(active_.get()); }

  /// Exit code 4 when any request missed the replay fixture.
  int finish(int code) const {
    const auto* r = replay();
    if (!r || r->misses() == 0) return code;
    std::cerr << "error: " << r->misses() << " request(s) missing from replay fixture "
              << g_.replay << "\n";
    return 4;
  }

 private:
  const GlobalOptions& g_;
  std::unique_ptr<ChatBackend> live_;
  std::unique_ptr<ChatBackend> active_;
};

struct Context {
  GlobalOptions g;
  BackendHolder backends{g};
  std::optional<TemplateSet> templates;

  ModelSettings settings() {
    ModelSettings s;
    s.model_name = backends.model_name();
    s.workers = g.workers;
    if (!g.templates.empty()) {
      if (!templates) templates = TemplateSet::with_overrides(g.templates);
      s.templates = &*templates;
    }
    return s;
  }
};

std::vector<SpecItem> specs_or_corpus(const std::string& path, const CorpusIndex& corpus) {
  return path.empty() ? corpus.collect_spec_items() : load_spec_items(path);
}

void report_issues(const CorpusIndex& corpus) {
  for (const auto& issue : corpus.issues())
    std::cerr << "warning: " << issue.assembly_id << ": " << issue.message << "\n";
}

void write_or_print(const std::string& out, const std::string& text) {
  if (out.empty()) std::cout << text;
  else write_file_atomic(out, text);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& piece : split(s, ','))
    if (auto t = trim(piece); !t.empty()) out.push_back(t);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Specification-driven CAD part retrieval toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  Context ctx;
  auto& g = ctx.g;
  app.add_option("--replay", g.replay, "Serve model calls from a replay fixture (no network)");
  app.add_option("--record", g.record, "Record live model calls into a replay fixture");
  app.add_option("--model", g.model, "Model name (default: MODEL_NAME or gpt-4o)");
  app.add_option("--dialect", g.dialect, "Wire dialect: openai or gemini");
  app.add_option("--base-url", g.base_url, "Override MODEL_BASE_URL");
  app.add_option("--templates", g.templates, "Directory of prompt template overrides");
  app.add_option("--workers", g.workers, "Concurrent model calls")->check(CLI::PositiveNumber);

  std::string corpus_dir, specs_path, out_path, results_path, notebook_path;
  std::vector<std::string> only_assemblies;
  bool force = false;

  auto* describe = app.add_subcommand("describe", "Generate part descriptions");
  describe->add_option("--corpus", corpus_dir, "Dataset root")->required();
  describe->add_option("--assembly", only_assemblies, "Restrict to these assembly ids");
  describe->add_flag("--force", force, "Regenerate existing descriptions.json files");

  std::size_t per_assembly = 1;
  std::string unresolved_path;
  auto* specgen = app.add_subcommand("specgen", "Generate specifications and ground truth");
  specgen->add_option("--corpus", corpus_dir, "Dataset root")->required();
  specgen->add_option("--per-assembly", per_assembly, "Specs per assembly")
      ->check(CLI::PositiveNumber);
  specgen->add_option("--out", out_path, "Output specs.jsonl")->required();
  specgen->add_option("--unresolved", unresolved_path, "Where to write unresolved drafts");

  std::string renderer;
  auto* bundles = app.add_subcommand("bundles", "Render annotation bundles for human review");
  bundles->add_option("--corpus", corpus_dir, "Dataset root")->required();
  bundles->add_option("--specs", specs_path, "Spec items (default: corpus specs)");
  bundles->add_option("--out", out_path, "Bundles directory")->required();
  bundles->add_option("--renderer", renderer, "Renderer command")->required();

  bool image_only = false;
  auto* retrieve = app.add_subcommand("retrieve", "Zero-shot part retrieval");
  retrieve->add_option("--corpus", corpus_dir, "Dataset root")->required();
  retrieve->add_option("--specs", specs_path, "Spec items (default: corpus specs)");
  retrieve->add_option("--out", out_path, "Output results.jsonl")->required();
  retrieve->add_flag("--image-only", image_only, "Single-step image-only baseline");

  auto* notebook = app.add_subcommand("notebook", "Error Notebook tools");
  notebook->require_subcommand(1);
  auto* nb_build = notebook->add_subcommand("build", "Build a notebook from a baseline run");
  nb_build->add_option("--results", results_path, "Baseline results.jsonl")->required();
  nb_build->add_option("--corpus", corpus_dir, "Dataset root")->required();
  nb_build->add_option("--specs", specs_path, "Spec items (default: corpus specs)");
  nb_build->add_option("--out", out_path, "Output notebook.jsonl")->required();

  std::size_t k = kDefaultExemplars;
  std::string mode_name = "cot";
  std::string embedding_model;
  auto* infer = app.add_subcommand("infer-rag", "Retrieval-augmented part retrieval");
  infer->add_option("--corpus", corpus_dir, "Dataset root")->required();
  infer->add_option("--specs", specs_path, "Spec items (default: corpus specs)");
  infer->add_option("--notebook", notebook_path, "notebook.jsonl")->required();
  infer->add_option("--k", k, "Exemplars per query")->check(CLI::PositiveNumber);
  infer->add_option("--mode", mode_name, "cot or answer-only");
  infer->add_option("--embedding-model", embedding_model,
                    "Rank exemplars with this embedding model instead of tf-idf");
  infer->add_option("--out", out_path, "Output results.jsonl")->required();

  std::string format_name = "markdown";
  std::string run_id;
  std::optional<std::size_t> eval_k;
  std::string eval_mode;
  auto* eval = app.add_subcommand("eval", "Score a run");
  eval->add_option("--results", results_path, "results.jsonl")->required();
  eval->add_option("--corpus", corpus_dir, "Dataset root")->required();
  eval->add_option("--specs", specs_path, "Spec items (default: corpus specs)");
  eval->add_option("--format", format_name, "markdown or csv");
  eval->add_option("--run-id", run_id, "Run id (default: derived from the results file)");
  eval->add_option("--k", eval_k, "Exemplar count to echo in the report");
  eval->add_option("--mode", eval_mode, "Exemplar mode to echo in the report");
  eval->add_option("--out", out_path, "Output file (default: stdout)");

  std::string counts_list = "1,5,10,20,50";
  std::string modes_list = "cot,answer-only";
  std::string cache_dir;
  auto* ablate = app.add_subcommand("ablate", "Exemplar count and mode sweep");
  ablate->add_option("--corpus", corpus_dir, "Dataset root")->required();
  ablate->add_option("--specs", specs_path, "Spec items (default: corpus specs)");
  ablate->add_option("--notebook", notebook_path, "notebook.jsonl")->required();
  ablate->add_option("--counts", counts_list, "Comma-separated exemplar counts");
  ablate->add_option("--modes", modes_list, "Comma-separated modes");
  ablate->add_option("--cache", cache_dir, "Per-cell results cache directory");
  ablate->add_option("--format", format_name, "markdown or csv");
  ablate->add_option("--out", out_path, "Output file (default: stdout)");

  std::string bundles_dir;
  ServeOptions serve_opts;
  std::string ui_dir;
  auto* annotate = app.add_subcommand("annotate", "Human annotation service");
  annotate->require_subcommand(1);
  auto* serve = annotate->add_subcommand("serve", "Serve the review API");
  serve->add_option("--bundles", bundles_dir, "Bundles directory")->required();
  serve->add_option("--port", serve_opts.port, "Port (0 picks one)");
  serve->add_option("--host", serve_opts.host, "Bind address");
  serve->add_option("--ui", ui_dir, "Static UI directory mounted at /");
  auto* export_cmd = annotate->add_subcommand("export", "Export kept bundles as specs");
  export_cmd->add_option("--bundles", bundles_dir, "Bundles directory")->required();
  export_cmd->add_option("--out", out_path, "Output specs.jsonl")->required();

  std::string step_file;
  auto* step_cmd = app.add_subcommand("step", "STEP file inspection");
  step_cmd->require_subcommand(1);
  auto* parts = step_cmd->add_subcommand("parts", "List PRODUCT names");
  parts->add_option("file", step_file, "STEP file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*describe) {
      auto corpus = scan_dataset(corpus_dir);
      report_issues(corpus);
      auto settings = ctx.settings();
      int failed = 0;
      for (const auto& a : corpus.assemblies()) {
        if (!only_assemblies.empty() &&
            std::find(only_assemblies.begin(), only_assemblies.end(), a.assembly_id) ==
                only_assemblies.end())
          continue;
        auto path = a.directory / std::string(kDescriptionsFile);
        if (!force && fs::is_regular_file(path)) continue;
        auto outcome = describe_parts(a, ctx.backends.get(), settings);
        for (const auto& f : outcome.failures)
          std::cerr << "warning: " << a.assembly_id << "/" << f.filename << ": " << f.reason
                    << "\n";
        if (outcome.descriptions.empty()) {
          ++failed;
          continue;
        }
        save_description_map(outcome.descriptions, path);
      }
      ctx.backends.flush();
      return ctx.backends.finish(failed ? 1 : 0);
    }

    if (*specgen) {
      auto corpus = scan_dataset(corpus_dir);
      report_issues(corpus);
      auto outcome = generate_specs(corpus, ctx.backends.get(), ctx.settings(), per_assembly);
      ctx.backends.flush();
      save_spec_items(outcome.items, out_path);
      for (const auto& [id, why] : outcome.failures)
        std::cerr << "warning: " << id << ": " << why << "\n";
      if (!unresolved_path.empty()) {
        std::vector<nlohmann::ordered_json> rows;
        for (const auto& u : outcome.unresolved) rows.push_back(u.to_json());
        write_file_atomic(unresolved_path, to_jsonl(rows));
      }
      std::cerr << outcome.items.size() << " specs, " << outcome.unresolved.size()
                << " unresolved\n";
      return ctx.backends.finish(0);
    }

    if (*bundles) {
      auto corpus = scan_dataset(corpus_dir);
      auto specs = specs_or_corpus(specs_path, corpus);
      SubprocessInvoker invoker(renderer);
      auto made = make_annotation_bundles(specs, corpus, invoker, out_path);
      for (const auto& b : made)
        if (!b.flags.empty())
          std::cerr << "warning: " << b.bundle_id << ": " << join(b.flags, ",") << "\n";
      return 0;
    }

    if (*retrieve) {
      auto corpus = scan_dataset(corpus_dir);
      report_issues(corpus);
      auto specs = specs_or_corpus(specs_path, corpus);
      auto results = retrieve_all(corpus, specs, ctx.backends.get(), ctx.settings(), image_only);
      ctx.backends.flush();
      save_results(results, out_path);
      return ctx.backends.finish(0);
    }

    if (*nb_build) {
      auto corpus = scan_dataset(corpus_dir);
      auto specs = specs_or_corpus(specs_path, corpus);
      auto results = load_results(results_path);
      auto nb = build_notebook(results, specs, corpus, ctx.backends.get(), ctx.settings(),
                               run_id_for(read_file(results_path)));
      ctx.backends.flush();
      save_notebook(nb, out_path);
      for (const auto& x : nb.exclusions)
        std::cerr << "excluded " << x.spec_id << ": " << x.reason << "\n";
      std::cerr << nb.entries.size() << " entries, " << nb.exclusions.size() << " excluded\n";
      return ctx.backends.finish(0);
    }

    if (*infer) {
      auto corpus = scan_dataset(corpus_dir);
      auto specs = specs_or_corpus(specs_path, corpus);
      auto nb = load_notebook(notebook_path);
      auto mode = exemplar_mode_from_string(mode_name);
      std::unique_ptr<ExemplarRetriever> retriever;
      std::unique_ptr<HttpEmbedder> embedder;
      if (embedding_model.empty()) {
        retriever = std::make_unique<SpecIndex>(nb);
      } else {
        auto env = model_config_from_env();
        if (!env) throw PreconditionError("--embedding-model needs MODEL_API_KEY");
        embedder = std::make_unique<HttpEmbedder>(env->backend, embedding_model);
        retriever = std::make_unique<EmbeddingIndex>(
            nb, [&](const std::string& text) { return embedder->embed(text); });
      }
      auto results =
          rag_infer_all(corpus, specs, nb, *retriever, ctx.backends.get(), ctx.settings(), k, mode);
      ctx.backends.flush();
      save_results(results, out_path);
      return ctx.backends.finish(0);
    }

    if (*eval) {
      auto corpus = scan_dataset(corpus_dir);
      auto specs = specs_or_corpus(specs_path, corpus);
      auto results = load_results(results_path);
      for (const auto& c : cross_check_part_counts(corpus))
        if (!c.note.empty()) std::cerr << "warning: " << c.assembly_id << ": " << c.note << "\n";
      EvalConfig config;
      config.run_id = run_id.empty() ? run_id_for(read_file(results_path)) : run_id;
      config.model_name = ctx.backends.model_name();
      config.k = eval_k;
      if (!eval_mode.empty())
        config.mode = std::string(to_string(exemplar_mode_from_string(eval_mode)));
      auto report = score_run(results, specs, corpus, config);
      write_or_print(out_path, emit_report(report, report_format_from_string(format_name)));
      return 0;
    }

    if (*ablate) {
      auto corpus = scan_dataset(corpus_dir);
      auto specs = specs_or_corpus(specs_path, corpus);
      auto nb = load_notebook(notebook_path);
      std::vector<std::size_t> counts;
      for (const auto& c : split_list(counts_list)) {
        auto n = std::stoul(c);
        if (n < 1) throw PreconditionError("exemplar counts must be >= 1");
        counts.push_back(n);
      }
      std::vector<ExemplarMode> modes;
      for (const auto& m : split_list(modes_list)) modes.push_back(exemplar_mode_from_string(m));
      std::optional<fs::path> cache;
      if (!cache_dir.empty()) cache = fs::path(cache_dir);
      auto table = run_ablation(specs, corpus, nb, ctx.backends.get(), ctx.settings(), counts,
                                modes, cache);
      ctx.backends.flush();
      write_or_print(out_path, emit_report(table, report_format_from_string(format_name)));
      return ctx.backends.finish(0);
    }

    if (*serve) {
      if (!ui_dir.empty()) serve_opts.ui_dir = fs::path(ui_dir);
      AnnotationStore store(bundles_dir);
      AnnotateServer server(store, serve_opts);
      std::cerr << "serving " << bundles_dir << " on " << serve_opts.host << ":"
                << serve_opts.port << "\n";
      server.run();
      return 0;
    }

    if (*export_cmd) {
      AnnotationStore store(bundles_dir);
      save_spec_items(store.export_items(), out_path);
      write_file_atomic(fs::path(out_path + ".summary.json"), store.summary().dump(2) + "\n");
      return 0;
    }

    if (*parts) {
      for (const auto& name : step::list_parts(step::parse_p21_file(step_file)))
        std::cout << name << "\n";
      return 0;
    }
  } catch (const ReplayMissError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
