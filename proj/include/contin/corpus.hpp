#pragma once

// Corpus filtering, deterministic train/validation split, and random 16-bar
// training windows.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "contin/remi.hpp"
#include "contin/sampler.hpp"
#include "contin/score.hpp"

namespace contin {

inline constexpr double kMinAudioScore = 0.9;
inline constexpr int kWindowBars = 16;
inline constexpr std::size_t kMinWindowTokens = 100;

struct CorpusEntry {
  std::string id;
  std::optional<double> audio_score;
  Score score;
};

struct ManifestRecord {
  std::string id;
  std::optional<double> audio_score;
  std::filesystem::path midi_path;
};

/// One record per non-empty line: id TAB audio_score-or-"-" TAB path. Relative
/// paths resolve against `base_dir`. Throws Error on malformed lines or
/// repeated ids.
std::vector<ManifestRecord> parse_manifest(std::string_view text,
                                           const std::filesystem::path& base_dir = {});

struct FilterReport {
  std::size_t kept = 0;
  std::size_t below_threshold = 0;
  std::size_t missing_score = 0;
};

/// Keeps entries with audio_score >= 0.9.
std::vector<CorpusEntry> filter_corpus(const std::vector<CorpusEntry>& entries,
                                       FilterReport* report = nullptr);

/// FNV-1a over salt, a zero byte, and id.
std::uint64_t stable_hash(std::string_view salt, std::string_view id);

struct Split {
  std::vector<CorpusEntry> train;
  std::vector<CorpusEntry> validation;
};

/// Membership by stable_hash(salt, id) mapped to [0, 1) against the fraction.
Split split_corpus(const std::vector<CorpusEntry>& entries, double holdout_fraction,
                   std::string_view salt);

struct TrainingWindow {
  std::vector<TokenId> tokens;
  std::string source_id;
  int start_bar = 0;
};

/// Bars spanned by the score's note starts.
int total_bars(const Score& score);

/// Draws start bars uniformly from [0, total_bars - 16] until the re-based
/// 16-bar slice encodes to at least 100 tokens, giving up after max_tries.
std::optional<TrainingWindow> sample_window(const CorpusEntry& entry, SampleRng& rng,
                                            int max_tries = 32);

struct WindowStats {
  std::size_t count = 0;
  std::size_t min = 0;
  std::size_t max = 0;
  double mean = 0;
  double p10 = 0;
  double median = 0;
  double p90 = 0;
};

/// Length summary; quantiles interpolate linearly between order statistics.
WindowStats window_stats(const std::vector<TrainingWindow>& windows);

}  // namespace contin
