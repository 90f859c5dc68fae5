#include <gtest/gtest.h>

#include <random>

#include "contin/error.hpp"
#include "contin/score.hpp"
#include "test_util.hpp"

namespace contin {
namespace {

// Nearest grid step by exhaustive comparison of exact distances; ties go up.
std::int64_t nearest_step(std::int64_t ticks, Ratio r) {
  std::int64_t best = 0;
  std::int64_t best_dist = -1;
  for (std::int64_t k = 0; k * r.num <= ticks * r.den + r.num; ++k) {
    const std::int64_t dist = std::llabs(ticks * r.den - k * r.num);
    if (best_dist < 0 || dist <= best_dist) {
      best = k;
      best_dist = dist;
    }
  }
  return best;
}

TEST(Note, Validity) {
  EXPECT_TRUE(is_valid_note({0, 0, 1}));
  EXPECT_TRUE(is_valid_note({500, 127, 1000}));
  EXPECT_FALSE(is_valid_note({-1, 60, 1}));
  EXPECT_FALSE(is_valid_note({0, 128, 1}));
  EXPECT_FALSE(is_valid_note({0, -1, 1}));
  EXPECT_FALSE(is_valid_note({0, 60, 0}));
}

TEST(ScoreType, SortsAndMergesDuplicates) {
  const Score s({{16, 72, 6}, {0, 64, 2}, {0, 60, 4}, {16, 72, 9}, {16, 72, 3}});
  const std::vector<Note> expected{{0, 60, 4}, {0, 64, 2}, {16, 72, 9}};
  EXPECT_EQ(s.notes(), expected);
  EXPECT_THROW(Score({{0, 60, 0}}), std::invalid_argument);
}

TEST(Quantize, SubStepNoteStretchesToOneStep) {
  const QuantizeResult q = quantize({{0, 119, 60}}, {120, 1});
  EXPECT_EQ(q.score.notes(), (std::vector<Note>{{0, 60, 1}}));
  EXPECT_TRUE(q.rejected.empty());
}

TEST(Quantize, ExampleTripleOnTheGrid) {
  const QuantizeResult q = quantize({{1920, 2640, 72}}, {120, 1});
  EXPECT_EQ(q.score.notes(), (std::vector<Note>{{16, 72, 6}}));
}

TEST(Quantize, HalfStepRoundsUp) {
  const QuantizeResult q = quantize({{60, 300, 60}}, {120, 1});
  EXPECT_EQ(q.score.notes(), (std::vector<Note>{{1, 60, 2}}));
  EXPECT_EQ(nearest_step(60, {120, 1}), 1);
  EXPECT_EQ(nearest_step(300, {120, 1}), 3);
}

TEST(Quantize, RoundingMatchesExhaustiveOracle) {
  std::mt19937_64 rng(1);
  const std::vector<Ratio> ratios{{120, 1}, {45, 2}, {96, 4}, {7, 3}, {1, 1}, {1000, 7}};
  for (const Ratio& r : ratios) {
    std::uniform_int_distribution<std::int64_t> tick(0, 20 * r.num / r.den + 50);
    for (int i = 0; i < 500; ++i) {
      const std::int64_t t = tick(rng);
      ASSERT_EQ(round_to_step(t, r), nearest_step(t, r)) << t << " " << r.num << "/" << r.den;
    }
  }
}

TEST(Quantize, RejectsBadEventsWithDiagnostics) {
  const QuantizeResult q =
      quantize({{-5, 10, 60}, {0, 100, 128}, {200, 100, 60}, {0, 120, 61}}, {120, 1});
  EXPECT_EQ(q.score.notes(), (std::vector<Note>{{0, 61, 1}}));
  ASSERT_EQ(q.rejected.size(), 3u);
  EXPECT_EQ(q.rejected[0].index, 0u);
  EXPECT_EQ(q.rejected[1].index, 1u);
  EXPECT_EQ(q.rejected[2].index, 2u);
  for (const auto& r : q.rejected) EXPECT_FALSE(r.reason.empty());
}

TEST(Quantize, GridAlignedInputIsUnchanged) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Score s = testing::random_score(rng, 20);
    std::vector<RawNoteEvent> events;
    for (const Note& n : s) events.push_back({n.start * 90LL, (n.start + n.duration) * 90LL, n.pitch});
    EXPECT_EQ(quantize(events, {90, 1}).score, s);
  }
}

TEST(Quantize, ArbitraryInputYieldsValidScore) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int64_t> tick(-100, 5000);
  std::uniform_int_distribution<int> pitch(-5, 135);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<RawNoteEvent> events(40);
    for (auto& e : events) e = {tick(rng), tick(rng), pitch(rng)};
    const QuantizeResult q = quantize(events, {37, 3});
    for (std::size_t i = 0; i < q.score.size(); ++i) {
      ASSERT_TRUE(is_valid_note(q.score.notes()[i]));
      if (i) {
        const Note& a = q.score.notes()[i - 1];
        const Note& b = q.score.notes()[i];
        ASSERT_TRUE(a.start < b.start || (a.start == b.start && a.pitch < b.pitch));
      }
    }
  }
}

TEST(Slice, MembershipByStart) {
  const Score s({{0, 60, 4}, {16, 72, 6}});
  EXPECT_EQ(slice(s, 16, 32).notes(), (std::vector<Note>{{16, 72, 6}}));
  EXPECT_EQ(slice(s, 16, 32, true).notes(), (std::vector<Note>{{0, 72, 6}}));
  EXPECT_TRUE(slice(Score(), 0, 80).empty());
}

TEST(Slice, MatchesFilterOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Score s(testing::random_notes(rng, 0, 300, 100));
    const int a = static_cast<int>(rng() % 200), b = a + 1 + static_cast<int>(rng() % 100);
    std::vector<Note> expected;
    for (const Note& n : s)
      if (n.start >= a && n.start < b) expected.push_back(n);
    EXPECT_EQ(slice(s, a, b).notes(), expected);
  }
}

TEST(Shift, MovesStarts) {
  const Score s({{80, 60, 4}});
  EXPECT_EQ(shift(s, -80).notes(), (std::vector<Note>{{0, 60, 4}}));
  EXPECT_THROW(shift(s, -81), std::invalid_argument);
}

TEST(Task, ParsesExampleDocument) {
  const ContinuationTask t = parse_task(R"({"prompt": [{"start": 16, "pitch": 72, "duration": 6}]})");
  EXPECT_EQ(t.prompt.notes(), (std::vector<Note>{{16, 72, 6}}));
  EXPECT_FALSE(t.generation.has_value());
  EXPECT_TRUE(parse_task(R"({"prompt": []})").prompt.empty());
}

std::string parse_error(const std::string& text) {
  try {
    parse_task(text);
  } catch (const TaskError& e) {
    return e.what();
  }
  return "";
}

TEST(Task, RegionBounds) {
  EXPECT_NO_THROW(parse_task(R"({"prompt": [{"start": 79, "pitch": 1, "duration": 1}]})"));
  EXPECT_NO_THROW(parse_task(
      R"({"prompt": [], "generation": [{"start": 80, "pitch": 1, "duration": 1}, {"start": 271, "pitch": 1, "duration": 500}]})"));
  EXPECT_EQ(parse_error(R"({"prompt": [{"start": 0, "pitch": 1, "duration": 1}, {"start": 80, "pitch": 1, "duration": 1}]})"),
            "prompt[1]: prompt start out of range [0,79]");
  EXPECT_EQ(parse_error(R"({"prompt": [], "generation": [{"start": 272, "pitch": 1, "duration": 1}]})"),
            "generation[0]: generation start out of range [80,271]");
  EXPECT_NE(parse_error(R"({"prompt": [], "generation": [{"start": 79, "pitch": 1, "duration": 1}]})"), "");
}

TEST(Task, StrictSchema) {
  EXPECT_NE(parse_error("not json"), "");
  EXPECT_NE(parse_error("[]"), "");
  EXPECT_NE(parse_error(R"({"generation": []})"), "");
  EXPECT_NE(parse_error(R"({"prompt": [], "extra": 1})"), "");
  EXPECT_NE(parse_error(R"({"prompt": [{"start": 0, "pitch": 60}]})"), "");
  EXPECT_NE(parse_error(R"({"prompt": [{"start": 0, "pitch": 60, "duration": 1, "velocity": 3}]})"), "");
  EXPECT_NE(parse_error(R"({"prompt": [{"start": 0.5, "pitch": 60, "duration": 1}]})"), "");
  EXPECT_NE(parse_error(R"({"prompt": [{"start": "0", "pitch": 60, "duration": 1}]})"), "");
  EXPECT_NE(parse_error(R"({"prompt": [{"start": 0, "pitch": 128, "duration": 1}]})"), "");
  EXPECT_NE(parse_error(R"({"prompt": [{"start": 0, "pitch": 60, "duration": 0}]})"), "");
  EXPECT_NE(parse_error(R"({"prompt": {}})"), "");
}

TEST(Task, ErrorCarriesRegionAndIndex) {
  try {
    parse_task(R"({"prompt": [], "generation": [{"start": 90, "pitch": 1, "duration": 1}, {"start": 300, "pitch": 1, "duration": 1}]})");
    FAIL();
  } catch (const TaskError& e) {
    EXPECT_EQ(e.region(), "generation");
    EXPECT_EQ(e.note_index(), 1);
  }
}

TEST(Task, EmitsCanonicalDocument) {
  ContinuationTask t;
  t.prompt = Score({{16, 72, 6}});
  EXPECT_EQ(emit_task(t),
            "{\n  \"prompt\": [\n    {\n      \"start\": 16,\n      \"pitch\": 72,\n      \"duration\": 6\n    }\n  ]\n}\n");
  t.generation = Score({{100, 50, 1}, {80, 60, 2}, {80, 40, 3}});
  const ContinuationTask back = parse_task(emit_task(t));
  EXPECT_EQ(back.generation->notes(),
            (std::vector<Note>{{80, 40, 3}, {80, 60, 2}, {100, 50, 1}}));
  ContinuationTask empty_gen;
  empty_gen.generation = Score();
  EXPECT_EQ(parse_task(emit_task(empty_gen)), empty_gen);
}

TEST(Task, RandomRoundTripIsByteStable) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const ContinuationTask t = testing::random_task(rng);
    const std::string text = emit_task(t);
    const ContinuationTask back = parse_task(text);
    ASSERT_EQ(back, t);
    ASSERT_EQ(emit_task(back), text);
  }
}

TEST(Task, LargeTaskRoundTrip) {
  std::mt19937_64 rng(6);
  ContinuationTask t;
  t.prompt = Score(testing::random_notes(rng, 0, 79, 250));
  t.generation = Score(testing::random_notes(rng, 80, 271, 250));
  EXPECT_EQ(parse_task(emit_task(t)), t);
}

TEST(Task, ValidateRejectsOutOfRegion) {
  ContinuationTask t;
  t.prompt = Score({{85, 60, 1}});
  EXPECT_THROW(validate_task(t), TaskError);
}

}  // namespace
}  // namespace contin
