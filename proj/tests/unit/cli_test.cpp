#include <gtest/gtest.h>

#include "cadrag/datasetgen.hpp"
#include "cadrag/error_notebook.hpp"
#include "cadrag/text_util.hpp"
#include "test_support.hpp"

using namespace cadrag;
using cadrag::testing::run_command;
using cadrag::testing::shell_quote;
using cadrag::testing::TempDir;

namespace {

std::string cli(const std::string& args) {
  return "env -u MODEL_API_KEY -u MODEL_NAME " + shell_quote(CADRAG_CLI_PATH) + " " + args;
}

std::string q(const fs::path& p) { return shell_quote(p.string()); }

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run_command(cli("--help")).exit_code, 0);
  EXPECT_NE(run_command(cli("")).exit_code, 0);
  EXPECT_NE(run_command(cli("retrieve")).exit_code, 0);
}

TEST(Cli, StepParts) {
  auto r = run_command(cli("step parts " + q(cadrag::testing::fixtures_dir() / "step/gearbox_commented.step")));
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.out, "input_shaft\nspur_gear_z24\nhousing_o'ring\ncover\n");
  EXPECT_EQ(run_command(cli("step parts " + q(cadrag::testing::fixtures_dir() /
                                              "step_malformed/truncated.step")))
                .exit_code,
            1);
}

TEST(Cli, NoBackendConfiguredFails) {
  TempDir tmp;
  cadrag::testing::write_e2e_corpus(tmp / "corpus");
  TempDir err;
  auto r = run_command(cli("describe --corpus " + q(tmp / "corpus")), err / "stderr");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(read_file(err / "stderr").find("MODEL_API_KEY"), std::string::npos);
}

TEST(Cli, ReplayPipelineMatchesInProcessRun) {
  TempDir tmp;
  auto corpus = tmp / "corpus";
  cadrag::testing::write_e2e_corpus(corpus);
  auto fixture = tmp / "fixture.jsonl";
  cadrag::testing::record_e2e_fixture(corpus, fixture);
  auto replay = "--replay " + q(fixture) + " ";

  ASSERT_EQ(run_command(cli(replay + "describe --corpus " + q(corpus))).exit_code, 0);
  auto corpus_index = scan_dataset(corpus);
  for (const auto& a : corpus_index.assemblies()) ASSERT_TRUE(corpus_index.descriptions(a));

  ASSERT_EQ(run_command(cli(replay + "retrieve --corpus " + q(corpus) + " --out " +
                            q(tmp / "baseline.jsonl")))
                .exit_code,
            0);
  auto baseline = load_results(tmp / "baseline.jsonl");
  ASSERT_EQ(baseline.size(), 5u);
  EXPECT_FALSE(grade_prediction(baseline[0].predicted,
                                cadrag::testing::standard_specs()[0].gt_filenames));

  ASSERT_EQ(run_command(cli(replay + "notebook build --results " + q(tmp / "baseline.jsonl") +
                            " --corpus " + q(corpus) + " --out " + q(tmp / "nb.jsonl")))
                .exit_code,
            0);
  auto nb = load_notebook(tmp / "nb.jsonl");
  EXPECT_EQ(nb.size(), 5u);
  EXPECT_EQ(nb.source_run_id, run_id_for(read_file(tmp / "baseline.jsonl")));

  ASSERT_EQ(run_command(cli(replay + "infer-rag --corpus " + q(corpus) + " --notebook " +
                            q(tmp / "nb.jsonl") + " --out " + q(tmp / "rag.jsonl")))
                .exit_code,
            0);
  auto rag = load_results(tmp / "rag.jsonl");
  for (const auto& r : rag) {
    ASSERT_TRUE(r.exemplar_ids);
    EXPECT_EQ(r.exemplar_ids->size(), 2u);
  }

  auto md = run_command(cli("eval --results " + q(tmp / "rag.jsonl") + " --corpus " + q(corpus) +
                            " --k 2 --mode cot"));
  ASSERT_EQ(md.exit_code, 0);
  EXPECT_NE(md.out.find("| 100.0 | 100.0 | 100.0 | — | — |"), std::string::npos) << md.out;
  EXPECT_NE(md.out.find("Exemplars: 2"), std::string::npos);
  auto csv = run_command(cli("eval --format csv --run-id r1 --results " + q(tmp / "baseline.jsonl") +
                             " --corpus " + q(corpus)));
  ASSERT_EQ(csv.exit_code, 0);
  EXPECT_NE(csv.out.find("r1,overall,3,5,60.0\n"), std::string::npos) << csv.out;

  // A prompt that was never recorded exits with the replay-miss code.
  ASSERT_EQ(run_command(cli(replay + "--model other-model retrieve --corpus " + q(corpus) +
                            " --out " + q(tmp / "miss.jsonl")))
                .exit_code,
            4);
}

TEST(Cli, BundlesAndAnnotationExport) {
  TempDir tmp;
  auto corpus = tmp / "corpus";
  cadrag::testing::write_e2e_corpus(corpus);
  auto r = run_command(cli("bundles --corpus " + q(corpus) + " --out " + q(tmp / "bundles") +
                           " --renderer " + q(FAKE_RENDERER_PATH)));
  ASSERT_EQ(r.exit_code, 0);
  auto bundles = load_bundles(tmp / "bundles");
  ASSERT_EQ(bundles.size(), 5u);
  EXPECT_TRUE(bundles[3].merged_image);
  EXPECT_TRUE(bundles[0].has_flag("missing_step"));

  write_file(tmp / "bundles/decisions.jsonl",
             R"({"bundle_id":"asm-04-s0","verdict":"keep","annotator_id":"a","timestamp":"t"})"
             "\n");
  ASSERT_EQ(run_command(cli("annotate export --bundles " + q(tmp / "bundles") + " --out " +
                            q(tmp / "human.jsonl")))
                .exit_code,
            0);
  auto items = load_spec_items(tmp / "human.jsonl");
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(items[0].spec_id, "asm-04-s0");
  EXPECT_EQ(items[0].source, SpecSource::human_preference);
  auto summary = nlohmann::json::parse(read_file(tmp / "human.jsonl.summary.json"));
  EXPECT_EQ(summary["kept"], 1);
  EXPECT_EQ(summary["pending"], 4);
}
