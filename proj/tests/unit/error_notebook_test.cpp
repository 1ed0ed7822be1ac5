#include <gtest/gtest.h>

#include <random>

#include "cadrag/error_notebook.hpp"
#include "cadrag/text_util.hpp"
#include "test_support.hpp"

using namespace cadrag;
using cadrag::testing::canned_cot;
using cadrag::testing::TempDir;

namespace {

struct Fixture {
  TempDir tmp;
  CorpusIndex corpus;
  std::vector<SpecItem> specs = cadrag::testing::standard_specs();
  Fixture() {
    cadrag::testing::write_corpus(tmp / "corpus", cadrag::testing::standard_assemblies(), true);
    corpus = scan_dataset(tmp / "corpus");
  }
};

}  // namespace

TEST(Grade, SetEquality) {
  EXPECT_TRUE(grade_prediction({"a.png", "b.png"}, {"b.png", "a.png"}));
  EXPECT_TRUE(grade_prediction({"a.png", "a.png"}, {"a.png"}));
  EXPECT_FALSE(grade_prediction({"a.png"}, {"a.png", "b.png"}));
  EXPECT_FALSE(grade_prediction({"a.png", "b.png", "c.png"}, {"a.png", "b.png"}));
  EXPECT_FALSE(grade_prediction({}, {"a.png"}));
}

TEST(Grade, PermutationInvariantAndSymmetric) {
  std::mt19937 rng(4);
  for (int i = 0; i < 300; ++i) {
    std::vector<std::string> a, b;
    for (int j = rng() % 5; j > 0; --j) a.push_back("p" + std::to_string(rng() % 6) + ".png");
    for (int j = rng() % 5; j > 0; --j) b.push_back("p" + std::to_string(rng() % 6) + ".png");
    auto shuffled = a;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_EQ(grade_prediction(a, b), grade_prediction(shuffled, b));
    EXPECT_EQ(grade_prediction(a, b), grade_prediction(b, a));
    std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    EXPECT_EQ(grade_prediction(a, b), sa == sb);
  }
}

TEST(CorrectionPrompt, Contents) {
  Fixture f;
  const auto& a = f.corpus.at("asm-01");
  auto descs = *f.corpus.descriptions(a);
  auto prev = canned_cot({"pin.png"}, "I only looked at the pin.");
  auto req = build_correction_prompt(a.assembly_image, descs, f.specs[0].specification, prev,
                                     {"base_plate.png", "pin.png"});
  EXPECT_EQ(req.image_count(), 1u);
  auto text = req.joined_text();
  EXPECT_NE(text.find("But, wait, let's pause and examine this more carefully."),
            std::string::npos);
  auto begin = text.find("<<<BEGIN PREVIOUS REASONING>>>\n");
  auto end = text.find("<<<END PREVIOUS REASONING>>>");
  ASSERT_NE(begin, std::string::npos);
  ASSERT_NE(end, std::string::npos);
  auto inner = text.substr(begin + 31, end - begin - 31);
  EXPECT_EQ(trim(inner), trim(prev));
  EXPECT_NE(text.find("Correct filenames: base_plate.png;pin.png"), std::string::npos);
  EXPECT_NE(text.find("pin.png: A cylindrical pin"), std::string::npos);

  auto retry = build_correction_prompt(a.assembly_image, descs, f.specs[0].specification, prev,
                                       {"base_plate.png", "pin.png"}, {}, 2);
  EXPECT_NE(request_fingerprint(req), request_fingerprint(retry));
  EXPECT_THROW(build_correction_prompt(a.assembly_image, descs, "s", "", {"a.png"}),
               PreconditionError);
  EXPECT_THROW(build_correction_prompt(a.assembly_image, descs, "s", "x", {}), PreconditionError);
}

TEST(Trajectory, Validation) {
  auto ok = validate_corrected_trajectory(canned_cot({"b.png", "a.png"}), {"a.png", "b.png"});
  EXPECT_EQ(ok.answer, (std::vector<std::string>{"b.png", "a.png"}));
  EXPECT_THROW(validate_corrected_trajectory("", {"a.png"}), ValidationError);
  EXPECT_THROW(validate_corrected_trajectory("The answer is a.png", {"a.png"}), ValidationError);
  EXPECT_THROW(validate_corrected_trajectory(canned_cot({"a.png"}), {"a.png", "b.png"}),
               ValidationError);
  EXPECT_THROW(validate_corrected_trajectory("**Final Answer:** a.png", {"a.png"}),
               ValidationError);
}

TEST(RunId, StableAndContentAddressed) {
  EXPECT_EQ(run_id_for("abc"), run_id_for("abc"));
  EXPECT_NE(run_id_for("abc"), run_id_for("abd"));
  EXPECT_EQ(run_id_for("abc"), "run-" + sha256_hex("abc").substr(0, 12));
}

TEST(BuildNotebook, TwoCorrectedOnePassthrough) {
  Fixture f;
  std::vector<SpecItem> specs(f.specs.begin(), f.specs.begin() + 3);
  cadrag::testing::ScriptedModel model({}, specs);
  model.wrong_zero_shot = {specs[0].specification, specs[2].specification};
  auto baseline = retrieve_all(f.corpus, specs, model);
  EXPECT_FALSE(grade_prediction(baseline[0].predicted, specs[0].gt_filenames));
  EXPECT_TRUE(grade_prediction(baseline[1].predicted, specs[1].gt_filenames));

  auto nb = build_notebook(baseline, specs, f.corpus, model, {}, "run-x");
  EXPECT_NO_THROW(nb.validate());
  ASSERT_EQ(nb.size(), 3u);
  EXPECT_TRUE(nb.exclusions.empty());
  EXPECT_EQ(nb.source_run_id, "run-x");
  EXPECT_EQ(nb.model_name, "gpt-4o");
  EXPECT_EQ(nb.entries[0].origin, EntryOrigin::corrected);
  EXPECT_EQ(nb.entries[1].origin, EntryOrigin::passthrough);
  EXPECT_EQ(nb.entries[2].origin, EntryOrigin::corrected);
  EXPECT_EQ(nb.entries[0].correction_attempts, 1);
  EXPECT_EQ(nb.entries[1].correction_attempts, 0);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& e = nb.entries[i];
    EXPECT_EQ(e.entry_id, "nb-" + specs[i].spec_id);
    EXPECT_TRUE(grade_prediction(e.final_answer, specs[i].gt_filenames));
    EXPECT_TRUE(grade_prediction(parse_final_answer(e.corrected_cot).filenames, e.final_answer));
    EXPECT_EQ(e.desc_map, *f.corpus.descriptions(f.corpus.at(e.assembly_id)));
  }
  EXPECT_NE(nb.entries[0].corrected_cot.find("But, wait"), std::string::npos);
}

TEST(BuildNotebook, IncorrigibleItemExcludedAfterThreeAttempts) {
  Fixture f;
  std::vector<SpecItem> specs(f.specs.begin(), f.specs.begin() + 3);
  cadrag::testing::ScriptedModel model({}, specs);
  model.wrong_zero_shot = {specs[0].specification, specs[1].specification};
  model.incorrigible = {specs[1].specification};
  auto baseline = retrieve_all(f.corpus, specs, model);
  auto before = model.calls();
  auto nb = build_notebook(baseline, specs, f.corpus, model);
  EXPECT_EQ(model.calls() - before, 1u + 3u);
  ASSERT_EQ(nb.exclusions.size(), 1u);
  EXPECT_EQ(nb.exclusions[0].spec_id, specs[1].spec_id);
  EXPECT_EQ(nb.exclusions[0].attempts, 1 + kCorrectionRetries);
  EXPECT_EQ(nb.size(), 2u);
  EXPECT_EQ(nb.find_spec(specs[1].spec_id), nullptr);
  EXPECT_NO_THROW(nb.validate());
}

TEST(BuildNotebook, FailedBaselineItemsAndConsistency) {
  Fixture f;
  std::vector<SpecItem> specs(f.specs.begin(), f.specs.begin() + 2);
  cadrag::testing::ScriptedModel model({}, specs);
  auto baseline = retrieve_all(f.corpus, specs, model);
  baseline[0].predicted.clear();
  baseline[0].cot_text.clear();
  baseline[0].error = "timeout";
  auto nb = build_notebook(baseline, specs, f.corpus, model);
  ASSERT_EQ(nb.exclusions.size(), 1u);
  EXPECT_EQ(nb.exclusions[0].spec_id, specs[0].spec_id);

  auto extra = baseline;
  extra[0].spec_id = "unknown";
  EXPECT_THROW(build_notebook(extra, specs, f.corpus, model), ConsistencyError);
  extra = baseline;
  extra[1] = extra[0];
  EXPECT_THROW(build_notebook(extra, specs, f.corpus, model), ConsistencyError);
}

TEST(BuildNotebook, ByteIdenticalUnderReplay) {
  Fixture f;
  cadrag::testing::ScriptedModel model({}, f.specs);
  model.wrong_zero_shot = {f.specs[0].specification, f.specs[3].specification};
  auto baseline = retrieve_all(f.corpus, f.specs, model);
  RecordingBackend rec(model);
  auto nb = build_notebook(baseline, f.specs, f.corpus, rec, {}, "run-1");
  save_notebook(nb, f.tmp / "a/nb.jsonl");

  ReplayBackend replay(rec.fixture());
  auto again = build_notebook(baseline, f.specs, f.corpus, replay, {}, "run-1");
  save_notebook(again, f.tmp / "b/nb.jsonl");
  EXPECT_EQ(read_file(f.tmp / "a/nb.jsonl"), read_file(f.tmp / "b/nb.jsonl"));
  EXPECT_EQ(read_file(notebook_meta_path(f.tmp / "a/nb.jsonl")),
            read_file(notebook_meta_path(f.tmp / "b/nb.jsonl")));
  EXPECT_EQ(replay.misses(), 0u);
  EXPECT_EQ(load_notebook(f.tmp / "a/nb.jsonl"), nb);
}

TEST(NotebookFile, LoadValidates) {
  Fixture f;
  NotebookEntry e;
  e.entry_id = "nb-x";
  e.spec_id = "x";
  e.assembly_id = "asm-01";
  e.specification = "s";
  e.desc_map = DescriptionMap{{"a.png", "A pin"}};
  e.corrected_cot = canned_cot({"a.png"});
  e.final_answer = {"a.png"};
  EXPECT_EQ(NotebookEntry::from_json(e.to_json()), e);

  ErrorNotebook nb;
  nb.entries = {e};
  save_notebook(nb, f.tmp / "ok.jsonl");
  EXPECT_EQ(load_notebook(f.tmp / "ok.jsonl").size(), 1u);

  auto bad = e;
  bad.corrected_cot = canned_cot({"b.png"});
  write_file(f.tmp / "bad.jsonl", bad.to_json().dump() + "\n");
  EXPECT_THROW(load_notebook(f.tmp / "bad.jsonl"), ValidationError);

  auto second = e;
  second.entry_id = "nb-y";
  write_file(f.tmp / "dup.jsonl", e.to_json().dump() + "\n" + second.to_json().dump() + "\n");
  EXPECT_THROW(load_notebook(f.tmp / "dup.jsonl"), ValidationError);
}
