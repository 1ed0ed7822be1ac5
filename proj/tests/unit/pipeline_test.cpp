#include <gtest/gtest.h>

#include <random>

#include "cadrag/pipeline.hpp"
#include "cadrag/text_util.hpp"
#include "test_support.hpp"

using namespace cadrag;
using cadrag::testing::TempDir;

namespace {

std::string text_of(const ContentBlock& b) {
  auto* t = std::get_if<TextBlock>(&b);
  return t ? t->text : std::string();
}

bool is_image(const ContentBlock& b) { return std::holds_alternative<ImageBlock>(b); }

struct Fixture {
  TempDir tmp;
  CorpusIndex corpus;
  Fixture() {
    cadrag::testing::write_corpus(tmp.path(), cadrag::testing::standard_assemblies(), true);
    corpus = scan_dataset(tmp.path());
  }
};

}  // namespace

TEST(DescriptionPrompt, AssemblyImageThenPartImage) {
  Fixture f;
  const auto& a = f.corpus.at("asm-01");
  auto req = build_description_prompt(a.assembly_image, a.parts[0].image);
  ASSERT_EQ(req.user_blocks.size(), 3u);
  EXPECT_NE(text_of(req.user_blocks[0]).find("A conical mount with a forked top"),
            std::string::npos);
  EXPECT_EQ(std::get<ImageBlock>(req.user_blocks[1]).data_url,
            encode_image_attachment(a.assembly_image));
  EXPECT_EQ(std::get<ImageBlock>(req.user_blocks[2]).data_url,
            encode_image_attachment(a.parts[0].image));
  EXPECT_EQ(req.temperature, 0.0);
  EXPECT_EQ(req.model_name, "gpt-4o");
}

TEST(DescriptionPrompt, Normalization) {
  EXPECT_EQ(normalize_description("  A cylindrical pin.\n"), "A cylindrical pin");
  EXPECT_EQ(normalize_description("- A hex nut;"), "A hex nut");
  EXPECT_EQ(normalize_description("\"A flat washer\""), "A flat washer");
  EXPECT_FALSE(normalize_description(""));
  EXPECT_FALSE(normalize_description("a; b"));
  EXPECT_FALSE(normalize_description("line one\nline two"));
}

TEST(DescribeParts, ScriptedModelFillsMapAndEmptyReplyFails) {
  Fixture f;
  auto assemblies = cadrag::testing::standard_assemblies();
  cadrag::testing::ScriptedModel model(
      cadrag::testing::image_description_table(f.tmp.path(), assemblies), {});
  const auto& a = f.corpus.at("asm-02");
  auto out = describe_parts(a, model);
  EXPECT_TRUE(out.failures.empty());
  auto expected = *f.corpus.descriptions(a);
  ASSERT_EQ(out.descriptions.size(), expected.size());
  for (const auto& [name, desc] : expected.entries()) {
    ASSERT_TRUE(out.descriptions.find(name));
    EXPECT_EQ(*out.descriptions.find(name), desc);
  }
  // Map order follows the part scan order.
  for (std::size_t i = 0; i < a.parts.size(); ++i)
    EXPECT_EQ(out.descriptions.entries()[i].first, a.parts[i].filename);

  FunctionBackend empty([](const ChatRequest&) { return BackendReply{"  ", std::nullopt}; });
  auto bad = describe_parts(a, empty);
  EXPECT_TRUE(bad.descriptions.empty());
  ASSERT_EQ(bad.failures.size(), 4u);
  EXPECT_EQ(bad.failures[0].reason, "empty description");
}

TEST(RetrievalPrompt, LayoutAndContent) {
  Fixture f;
  const auto& a = f.corpus.at("asm-01");
  DescriptionMap d{{"a.png", "A pin"}, {"b.png", "A plate"}};
  auto req = build_retrieval_prompt(a.assembly_image, d, "  Spec here. ", std::nullopt);
  ASSERT_EQ(req.image_count(), 1u);
  ASSERT_EQ(req.user_blocks.size(), 3u);
  EXPECT_TRUE(is_image(req.user_blocks[1]));
  auto head = text_of(req.user_blocks[0]);
  auto tail = text_of(req.user_blocks[2]);
  EXPECT_EQ(head.rfind("For the following question, answer step-by-step:", 0), 0u);
  EXPECT_NE(tail.find("a.png: A pin\nb.png: A plate"), std::string::npos);
  EXPECT_NE(tail.find("Specification: Spec here."), std::string::npos);
  EXPECT_TRUE(tail.size() >= 19 && tail.substr(tail.size() - 19) == "part1.png;part2.png");
  EXPECT_EQ(req.max_output, ModelSettings{}.answer_max_output);
  EXPECT_THROW(build_retrieval_prompt(a.assembly_image, {}, "x", std::nullopt),
               PreconditionError);
  EXPECT_THROW(build_retrieval_prompt(a.assembly_image, d, "   ", std::nullopt),
               PreconditionError);
}

TEST(RetrievalPrompt, FewShotBlockPrecedesQuery) {
  Fixture f;
  const auto& a = f.corpus.at("asm-01");
  DescriptionMap d{{"a.png", "A pin"}};
  auto req = build_retrieval_prompt(a.assembly_image, d, "s", std::string("EXAMPLES"));
  auto text = req.joined_text();
  auto ex = text.find("EXAMPLES");
  auto lead = text.find("Now, for the following question");
  ASSERT_NE(ex, std::string::npos);
  ASSERT_NE(lead, std::string::npos);
  EXPECT_LT(ex, lead);
  EXPECT_EQ(text_of(req.user_blocks[0]), "EXAMPLES");
}

TEST(RetrievalPrompt, Deterministic) {
  Fixture f;
  const auto& a = f.corpus.at("asm-03");
  auto d = *f.corpus.descriptions(a);
  auto r1 = build_retrieval_prompt(a.assembly_image, d, "spec", std::nullopt);
  auto r2 = build_retrieval_prompt(a.assembly_image, d, "spec", std::nullopt);
  EXPECT_EQ(r1, r2);
  EXPECT_EQ(request_fingerprint(r1), request_fingerprint(r2));
}

TEST(ImageOnlyPrompt, AllImagesLabelled) {
  Fixture f;
  const auto& a = f.corpus.at("asm-01");
  auto req = build_image_only_prompt(a, "spec");
  EXPECT_EQ(req.image_count(), 1 + a.parts.size());
  auto text = req.joined_text();
  for (const auto& p : a.parts) EXPECT_NE(text.find(p.filename + ":"), std::string::npos);
  EXPECT_EQ(text.find("Part descriptions:"), std::string::npos);
}

TEST(ParseFinalAnswer, Examples) {
  auto p = parse_final_answer("Chain-of-Thought:\nx\n\nFinal Answer:\npart1.png;part2.png");
  EXPECT_EQ(p.status, ParseStatus::ok);
  EXPECT_EQ(p.filenames, (std::vector<std::string>{"part1.png", "part2.png"}));

  p = parse_final_answer("Final Answer: a.png; b.png");
  EXPECT_EQ(p.status, ParseStatus::ok);
  EXPECT_EQ(p.filenames, (std::vector<std::string>{"a.png", "b.png"}));

  p = parse_final_answer("**Final Answer:** a.png;b.png");
  EXPECT_EQ(p.status, ParseStatus::recovered);
  EXPECT_EQ(p.filenames, (std::vector<std::string>{"a.png", "b.png"}));

  p = parse_final_answer("Final Answer: a.png, b.png");
  EXPECT_EQ(p.status, ParseStatus::recovered);
  EXPECT_EQ(p.filenames.size(), 2u);

  p = parse_final_answer("Final Answer: x.png\nlater\nFinal Answer: y.png");
  EXPECT_EQ(p.filenames, (std::vector<std::string>{"y.png"}));

  p = parse_final_answer("Final Answer: `a.png`;a.png");
  EXPECT_EQ(p.filenames, (std::vector<std::string>{"a.png"}));
  EXPECT_EQ(p.status, ParseStatus::recovered);

  EXPECT_EQ(parse_final_answer("I think part1.png").status, ParseStatus::failed);
  EXPECT_EQ(parse_final_answer("Final Answer:").status, ParseStatus::failed);
  EXPECT_EQ(parse_final_answer("").status, ParseStatus::failed);
}

TEST(ParseFinalAnswer, RoundTripsFormattedAnswers) {
  std::mt19937 rng(17);
  const std::string chars = "abcxyz019_- ";
  for (int i = 0; i < 500; ++i) {
    std::vector<std::string> names;
    int n = 1 + static_cast<int>(rng() % 6);
    while (static_cast<int>(names.size()) < n) {
      std::string stem(1, 'p');
      for (int j = rng() % 8; j > 0; --j) stem += chars[rng() % chars.size()];
      stem = trim(stem);
      auto name = stem + (rng() % 2 ? ".png" : ".jpg");
      if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    }
    auto text = "Chain-of-Thought:\nreasoning " + std::to_string(i) + "\n\n" + format_answer(names);
    auto p = parse_final_answer(text);
    EXPECT_EQ(p.status, ParseStatus::ok) << text;
    EXPECT_EQ(p.filenames, names) << text;
  }
}

TEST(ParseFinalAnswer, NeverThrowsOnMutations) {
  std::mt19937 rng(23);
  const std::string base = format_answer({"a.png", "b.png"});
  for (int i = 0; i < 1000; ++i) {
    auto s = base;
    for (int e = 0; e < 3; ++e) {
      auto pos = rng() % (s.size() + 1);
      if (rng() % 2 && pos < s.size()) s.erase(pos, 1);
      else s.insert(pos, 1, static_cast<char>(rng() % 128));
    }
    EXPECT_NO_THROW(parse_final_answer(s));
  }
}

TEST(RunRetrieval, DropsHallucinatedNames) {
  Fixture f;
  const auto& a = f.corpus.at("asm-01");
  auto spec = cadrag::testing::standard_specs()[0];
  FunctionBackend b([](const ChatRequest&) {
    return BackendReply{"Final Answer:\npin.png;ghost.png", std::nullopt};
  });
  auto r = retrieve_parts(spec, a, *f.corpus.descriptions(a), b);
  EXPECT_EQ(r.predicted, (std::vector<std::string>{"pin.png"}));
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("ghost.png"), std::string::npos);
  EXPECT_EQ(r.parse_status, ParseStatus::ok);
}

TEST(RunRetrieval, BackendFailureRecordedAsError) {
  Fixture f;
  const auto& a = f.corpus.at("asm-01");
  auto spec = cadrag::testing::standard_specs()[0];
  FunctionBackend b([](const ChatRequest&) -> BackendReply {
    throw TransportError::from_status(401, "denied");
  });
  auto r = retrieve_parts(spec, a, *f.corpus.descriptions(a), b);
  ASSERT_TRUE(r.error);
  EXPECT_EQ(r.parse_status, ParseStatus::failed);
  EXPECT_TRUE(r.predicted.empty());
}

TEST(RetrieveAll, ScriptedModelAnswersGroundTruthInOrder) {
  Fixture f;
  auto specs = cadrag::testing::standard_specs();
  cadrag::testing::ScriptedModel model({}, specs);
  auto results = retrieve_all(f.corpus, specs, model);
  ASSERT_EQ(results.size(), specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    EXPECT_EQ(results[i].spec_id, specs[i].spec_id);
    EXPECT_EQ(results[i].predicted, specs[i].gt_filenames);
  }
  TempDir out;
  save_results(results, out / "r.jsonl");
  EXPECT_EQ(load_results(out / "r.jsonl"), results);

  auto missing = specs;
  missing[0].assembly_id = "nope";
  auto r2 = retrieve_all(f.corpus, missing, model);
  EXPECT_TRUE(r2[0].error);
  EXPECT_FALSE(r2[1].error);
}

TEST(RetrieveAll, ImageOnlyMode) {
  Fixture f;
  auto specs = cadrag::testing::standard_specs();
  std::size_t images = 0;
  FunctionBackend b([&](const ChatRequest& r) {
    images = r.image_count();
    return BackendReply{"Final Answer: base_plate.png", std::nullopt};
  });
  auto r = retrieve_all(f.corpus, {specs[0]}, b, {}, true);
  EXPECT_EQ(r[0].predicted, (std::vector<std::string>{"base_plate.png"}));
  EXPECT_EQ(images, 4u);
}
