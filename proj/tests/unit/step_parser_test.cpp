#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "cadrag/step_parser.hpp"
#include "cadrag/text_util.hpp"
#include "test_support.hpp"

using namespace cadrag;
using namespace cadrag::step;
using cadrag::testing::fixtures_dir;
using cadrag::testing::reference_list_parts;

namespace {

std::string wrap_data(const std::string& data) {
  return "ISO-10303-21;\nHEADER;\nFILE_DESCRIPTION((''),'2;1');\n"
         "FILE_NAME('t','',(''),(''),'','','');\nFILE_SCHEMA(('X'));\nENDSEC;\nDATA;\n" +
         data + "ENDSEC;\nEND-ISO-10303-21;\n";
}

StepError::Kind kind_of(const std::string& text) {
  try {
    parse_p21(text);
  } catch (const StepError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no StepError";
  return StepError::Kind::lexical;
}

}  // namespace

TEST(StepParser, EmptyDataSection) {
  auto m = parse_p21(wrap_data(""));
  EXPECT_TRUE(m.entities.empty());
  EXPECT_EQ(m.header.size(), 3u);
  EXPECT_EQ(part_count(m), 0u);
  EXPECT_TRUE(list_parts(m).empty());
}

TEST(StepParser, SingleProduct) {
  auto text = wrap_data("#10=PRODUCT('Bracket','Bracket','',(#5));\n");
  auto m = parse_p21(text);
  ASSERT_EQ(m.entities.size(), 1u);
  const auto& e = m.entities.at(10);
  EXPECT_EQ(e.keyword, "PRODUCT");
  ASSERT_FALSE(e.parsed_strings.empty());
  EXPECT_EQ(e.parsed_strings[0], "Bracket");
  EXPECT_EQ(list_parts(m), reference_list_parts(text));
}

TEST(StepParser, PartsFollowInstanceIdOrder) {
  auto m = parse_p21(wrap_data("#10=PRODUCT('A','','',());\n#30=PRODUCT('B','','',());\n"
                               "#20=PRODUCT('C','','',());\n"));
  EXPECT_EQ(list_parts(m), (std::vector<std::string>{"A", "C", "B"}));
}

TEST(StepParser, DuplicateNamesPreserved) {
  auto m = parse_p21(wrap_data("#1=PRODUCT('bolt','','',());\n#2=PRODUCT('bolt','','',());\n"));
  EXPECT_EQ(list_parts(m), (std::vector<std::string>{"bolt", "bolt"}));
}

TEST(StepParser, EscapesCommentsAndComplexInstances) {
  auto m = parse_p21(wrap_data(
      "/* c ; */#1=PRODUCT('it''s;(x)','n','',());\n"
      "#2=(LENGTH_UNIT()NAMED_UNIT(*)SI_UNIT(.MILLI.,.METRE.));\n"
      "#3=!USER_THING('u');\n"
      "#4=FUTURE_KEYWORD(1,2.5E-3,$,*,.T.,#1,(),\"0FF\");\n"));
  EXPECT_EQ(m.entities.at(1).parsed_strings[0], "it's;(x)");
  EXPECT_TRUE(m.entities.at(2).complex);
  EXPECT_EQ(m.entities.at(2).keyword, "LENGTH_UNIT");
  EXPECT_TRUE(m.entities.at(3).user_defined);
  EXPECT_EQ(m.entities.at(4).keyword, "FUTURE_KEYWORD");
  EXPECT_EQ(list_parts(m), (std::vector<std::string>{"it's;(x)"}));
}

TEST(StepParser, ErrorKinds) {
  auto ok = wrap_data("#1=PRODUCT('a','a','',());\n");
  auto cut = ok.substr(0, ok.find("ENDSEC;\nEND"));
  try {
    parse_p21(cut);
    FAIL();
  } catch (const StepError& e) {
    EXPECT_EQ(e.kind(), StepError::Kind::truncation);
    EXPECT_EQ(e.offset(), cut.size());
  }
  EXPECT_EQ(kind_of(wrap_data("#1=PRODUCT('a','a','',());\n#1=PRODUCT('b','','',());\n")),
            StepError::Kind::structural);
  EXPECT_EQ(kind_of(wrap_data("#1=PRODUCT('open,'',());\n")), StepError::Kind::lexical);
  EXPECT_EQ(kind_of(wrap_data("#1=PRODUCT('a';'',());\n")), StepError::Kind::structural);
  EXPECT_EQ(kind_of("/* never closed"), StepError::Kind::lexical);
  EXPECT_THROW(parse_p21(""), StepError);
  EXPECT_THROW(parse_p21("HEADER;"), StepError);
}

TEST(StepParser, MalformedFixturesFailTyped) {
  for (const auto& entry : fs::directory_iterator(fixtures_dir() / "step_malformed")) {
    SCOPED_TRACE(entry.path().filename().string());
    EXPECT_THROW(parse_p21_file(entry.path()), StepError);
  }
}

TEST(StepParser, WellFormedFixturesMatchReferenceReader) {
  std::map<std::string, std::size_t> expected_counts = {
      {"bracket_assembly.step", 3},
      {"gearbox_commented.step", 4},
      {"edition3_sections.step", 4},
      {"no_products.step", 0},
  };
  for (const auto& [file, count] : expected_counts) {
    SCOPED_TRACE(file);
    auto path = fixtures_dir() / "step" / file;
    auto text = read_file(path);
    auto m = parse_p21_file(path);
    EXPECT_EQ(part_count(m), count);
    EXPECT_EQ(list_parts(m), reference_list_parts(text));
    EXPECT_EQ(part_count(m), list_parts(m).size());
  }
  auto gear = list_parts(parse_p21_file(fixtures_dir() / "step/gearbox_commented.step"));
  EXPECT_EQ(gear, (std::vector<std::string>{"input_shaft", "spur_gear_z24", "housing_o'ring",
                                            "cover"}));
}

TEST(StepParser, GeneratedFilesMatchReferenceReader) {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> names;
    int n = static_cast<int>(rng() % 15);
    for (int i = 0; i < n; ++i) {
      std::string name = "p" + std::to_string(rng() % 1000);
      if (rng() % 4 == 0) name += "'s";
      if (rng() % 5 == 0) name += " ;(v2)";
      names.push_back(name);
    }
    auto text = cadrag::testing::generate_step(names, rng);
    SCOPED_TRACE(text);
    auto m = parse_p21(text);
    EXPECT_EQ(list_parts(m), reference_list_parts(text));
    EXPECT_EQ(part_count(m), static_cast<std::size_t>(n));
  }
}

TEST(StepParser, RandomBytesNeverEscapeAsOtherExceptions) {
  std::mt19937 rng(99);
  auto seed_text = read_file(fixtures_dir() / "step/gearbox_commented.step");
  const std::string alphabet = "#=();,'/*$.ABCDEFGHIJKLMNOPRSTUVWXYZ_0123456789 \n\"!-";
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    if (i % 2 == 0) {
      int len = static_cast<int>(rng() % 200);
      for (int j = 0; j < len; ++j)
        s += (rng() % 3 == 0) ? static_cast<char>(rng() % 256)
                              : alphabet[rng() % alphabet.size()];
    } else {
      s = seed_text;
      int edits = 1 + static_cast<int>(rng() % 4);
      for (int j = 0; j < edits && !s.empty(); ++j) {
        auto pos = rng() % s.size();
        switch (rng() % 3) {
          case 0: s.erase(pos, 1 + rng() % 10); break;
          case 1: s.insert(pos, 1, alphabet[rng() % alphabet.size()]); break;
          default: s[pos] = static_cast<char>(rng() % 256);
        }
      }
    }
    try {
      auto m = parse_p21(s);
      EXPECT_EQ(part_count(m), list_parts(m).size());
    } catch (const StepError&) {
    }
  }
}
