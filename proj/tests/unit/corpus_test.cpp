#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "contin/corpus.hpp"
#include "contin/error.hpp"
#include "contin/sampler.hpp"

namespace contin {
namespace {

CorpusEntry entry(std::string id, std::optional<double> score, Score notes = {}) {
  return {std::move(id), score, std::move(notes)};
}

// Two notes at distinct positions in every bar: 7 tokens per bar.
Score dense_piece(int bars) {
  std::vector<Note> notes;
  for (int b = 0; b < bars; ++b) {
    notes.push_back({b * 16, 60 + b % 12, 4});
    notes.push_back({b * 16 + 8, 64, 4});
  }
  return Score(std::move(notes));
}

TEST(Filter, ThresholdBoundary) {
  FilterReport r;
  const auto kept = filter_corpus({entry("a", 0.9), entry("b", 0.89), entry("c", std::nullopt),
                                   entry("d", 1.0)},
                                  &r);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].id, "a");
  EXPECT_EQ(kept[1].id, "d");
  EXPECT_EQ(r.kept, 2u);
  EXPECT_EQ(r.below_threshold, 1u);
  EXPECT_EQ(r.missing_score, 1u);
}

TEST(Filter, MatchesOracleAndIsIdempotent) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<CorpusEntry> entries;
  for (int i = 0; i < 100; ++i) {
    std::optional<double> s;
    if (rng() % 5) s = u(rng);
    entries.push_back(entry("id" + std::to_string(i), s));
  }
  std::vector<std::string> expected;
  for (const auto& e : entries)
    if (e.audio_score && !(*e.audio_score < 0.9)) expected.push_back(e.id);
  const auto once = filter_corpus(entries);
  std::vector<std::string> got;
  for (const auto& e : once) got.push_back(e.id);
  EXPECT_EQ(got, expected);
  EXPECT_EQ(filter_corpus(once).size(), once.size());
}

TEST(Split, StableHashMatchesFnv1a) {
  // Reference values from an independent FNV-1a 64 implementation over
  // salt + '\0' + id.
  EXPECT_EQ(stable_hash("contin", "piece-001"), 0xbad23747ec2ce1feull);
  EXPECT_EQ(stable_hash("", ""), 0xaf63bd4c8601b7dfull);
}

TEST(Split, DeterministicPartition) {
  std::vector<CorpusEntry> entries;
  for (int i = 0; i < 500; ++i) entries.push_back(entry("p" + std::to_string(i), 0.95));
  const Split a = split_corpus(entries, 0.1, "s1");
  const Split b = split_corpus(entries, 0.1, "s1");
  std::set<std::string> train, val;
  for (const auto& e : a.train) train.insert(e.id);
  for (const auto& e : a.validation) val.insert(e.id);
  EXPECT_EQ(train.size() + val.size(), entries.size());
  for (const auto& id : val) EXPECT_FALSE(train.count(id));
  ASSERT_EQ(a.validation.size(), b.validation.size());
  for (std::size_t i = 0; i < a.validation.size(); ++i) EXPECT_EQ(a.validation[i].id, b.validation[i].id);
  const Split other = split_corpus(entries, 0.1, "s2");
  bool differs = other.validation.size() != a.validation.size();
  for (std::size_t i = 0; !differs && i < a.validation.size(); ++i)
    differs = a.validation[i].id != other.validation[i].id;
  EXPECT_TRUE(differs);
}

TEST(Split, EmptyAndBadFraction) {
  const Split s = split_corpus({}, 0.1, "x");
  EXPECT_TRUE(s.train.empty());
  EXPECT_TRUE(s.validation.empty());
  EXPECT_THROW(split_corpus({}, 0.0, "x"), std::invalid_argument);
  EXPECT_THROW(split_corpus({}, 1.0, "x"), std::invalid_argument);
}

TEST(Split, ValidationShareNearFraction) {
  std::vector<CorpusEntry> entries;
  for (int i = 0; i < 10000; ++i) entries.push_back(entry("track_" + std::to_string(i), 0.99));
  const double share = static_cast<double>(split_corpus(entries, 0.1, "salt").validation.size()) / 10000;
  EXPECT_GE(share, 0.08);
  EXPECT_LE(share, 0.12);
}

TEST(Manifest, ParsesRecords) {
  const auto recs = parse_manifest("a\t0.95\tmidi/a.mid\n\nb\t-\t/abs/b.mid\n", "/data");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].id, "a");
  EXPECT_EQ(*recs[0].audio_score, 0.95);
  EXPECT_EQ(recs[0].midi_path, std::filesystem::path("/data/midi/a.mid"));
  EXPECT_FALSE(recs[1].audio_score.has_value());
  EXPECT_EQ(recs[1].midi_path, std::filesystem::path("/abs/b.mid"));
  EXPECT_TRUE(parse_manifest("").empty());
}

TEST(Manifest, RejectsMalformed) {
  EXPECT_THROW(parse_manifest("a\t0.9\n"), Error);
  EXPECT_THROW(parse_manifest("a\tx\tf.mid\n"), Error);
  EXPECT_THROW(parse_manifest("a\t1.5\tf.mid\n"), Error);
  EXPECT_THROW(parse_manifest("a\t0.9\tf.mid\na\t0.9\tg.mid\n"), Error);
}

TEST(Window, SingleAdmissibleStart) {
  const CorpusEntry e = entry("d", 1.0, dense_piece(16));
  EXPECT_EQ(total_bars(e.score), 16);
  SampleRng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto w = sample_window(e, rng);
    ASSERT_TRUE(w.has_value());
    EXPECT_EQ(w->start_bar, 0);
    EXPECT_EQ(w->source_id, "d");
  }
}

TEST(Window, TooShortOrEmpty) {
  SampleRng rng(2);
  EXPECT_FALSE(sample_window(entry("e", 1.0), rng).has_value());
  EXPECT_FALSE(sample_window(entry("s", 1.0, dense_piece(15)), rng).has_value());
  // Sixteen bars but far below 100 tokens.
  EXPECT_FALSE(sample_window(entry("sparse", 1.0, Score({{0, 60, 1}, {255, 60, 1}})), rng).has_value());
}

TEST(Window, WindowInvariants) {
  std::mt19937_64 gen(3);
  std::vector<Note> notes;
  for (int i = 0; i < 600; ++i)
    notes.push_back({static_cast<int>(gen() % (40 * 16)), static_cast<int>(gen() % 128), 1 + static_cast<int>(gen() % 20)});
  const CorpusEntry e = entry("r", 1.0, Score(notes));
  SampleRng rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto w = sample_window(e, rng);
    ASSERT_TRUE(w.has_value());
    EXPECT_GE(w->tokens.size(), kMinWindowTokens);
    EXPECT_EQ(std::count(w->tokens.begin(), w->tokens.end(), kBar), 16);
    std::vector<Note> expected =
        slice(e.score, w->start_bar * 16, (w->start_bar + 16) * 16, true).notes();
    for (Note& n : expected) n.duration = std::min(n.duration, kMaxDuration);
    EXPECT_EQ(decode(w->tokens, 0).score, Score(expected));
  }
}

TEST(Window, StartBarsUniform) {
  const CorpusEntry e = entry("d", 1.0, dense_piece(64));
  SampleRng rng(5);
  std::vector<int> hist(49, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++hist[static_cast<std::size_t>(sample_window(e, rng)->start_bar)];
  const double expected = static_cast<double>(draws) / 49;
  double chi2 = 0;
  for (int h : hist) chi2 += (h - expected) * (h - expected) / expected;
  // 0.99 quantile of chi-square with 48 degrees of freedom.
  EXPECT_LT(chi2, 73.6826);
}

TEST(Stats, Summaries) {
  auto windows = [](std::vector<std::size_t> lengths) {
    std::vector<TrainingWindow> out;
    for (std::size_t n : lengths) out.push_back({std::vector<TokenId>(n, kBar), "x", 0});
    return out;
  };
  const WindowStats one = window_stats(windows({100}));
  EXPECT_EQ(one.min, 100u);
  EXPECT_EQ(one.median, 100.0);
  EXPECT_EQ(window_stats({}).count, 0u);
  const WindowStats three = window_stats(windows({300, 100, 200}));
  EXPECT_EQ(three.median, 200.0);
  EXPECT_EQ(three.mean, 200.0);
  EXPECT_EQ(three.max, 300u);
  EXPECT_DOUBLE_EQ(three.p10, 120.0);
  EXPECT_DOUBLE_EQ(three.p90, 280.0);
}

}  // namespace
}  // namespace contin
