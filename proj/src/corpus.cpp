#include "contin/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "contin/error.hpp"

namespace contin {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t pos = 0;
  while (true) {
    const std::size_t tab = line.find('\t', pos);
    fields.push_back(line.substr(pos, tab == std::string_view::npos ? tab : tab - pos));
    if (tab == std::string_view::npos) break;
    pos = tab + 1;
  }
  return fields;
}

double quantile(const std::vector<std::size_t>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) +
         frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

}  // namespace

std::vector<ManifestRecord> parse_manifest(std::string_view text,
                                           const std::filesystem::path& base_dir) {
  std::vector<ManifestRecord> records;
  std::set<std::string, std::less<>> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? nl : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;

    const auto fields = split_tabs(line);
    const std::string where = "manifest line " + std::to_string(line_no);
    if (fields.size() != 3) throw Error(where + ": expected 3 tab-separated fields");
    ManifestRecord rec;
    rec.id = std::string(fields[0]);
    if (rec.id.empty()) throw Error(where + ": empty id");
    if (!ids.insert(rec.id).second) throw Error(where + ": duplicate id " + rec.id);
    if (fields[1] != "-") {
      double score = 0;
      const auto [ptr, ec] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), score);
      if (ec != std::errc() || ptr != fields[1].data() + fields[1].size() || score < 0 || score > 1) {
        throw Error(where + ": audio_score must be a decimal in [0, 1] or \"-\"");
      }
      rec.audio_score = score;
    }
    const std::filesystem::path path{std::string(fields[2])};
    rec.midi_path = path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<CorpusEntry> filter_corpus(const std::vector<CorpusEntry>& entries,
                                       FilterReport* report) {
  FilterReport r;
  std::vector<CorpusEntry> kept;
  for (const CorpusEntry& e : entries) {
    if (!e.audio_score) {
      ++r.missing_score;
    } else if (*e.audio_score < kMinAudioScore) {
      ++r.below_threshold;
    } else {
      kept.push_back(e);
    }
  }
  r.kept = kept.size();
  if (report) *report = r;
  return kept;
}

std::uint64_t stable_hash(std::string_view salt, std::string_view id) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ull;
  };
  for (char c : salt) mix(static_cast<unsigned char>(c));
  mix(0);
  for (char c : id) mix(static_cast<unsigned char>(c));
  return h;
}

Split split_corpus(const std::vector<CorpusEntry>& entries, double holdout_fraction,
                   std::string_view salt) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("holdout_fraction must be in (0, 1)");
  }
  Split split;
  for (const CorpusEntry& e : entries) {
    const double u = static_cast<double>(stable_hash(salt, e.id) >> 11) * 0x1.0p-53;
    (u < holdout_fraction ? split.validation : split.train).push_back(e);
  }
  return split;
}

int total_bars(const Score& score) {
  if (score.empty()) return 0;
  return score.notes().back().start / kStepsPerBar + 1;
}

std::optional<TrainingWindow> sample_window(const CorpusEntry& entry, SampleRng& rng,
                                            int max_tries) {
  const int bars = total_bars(entry.score);
  if (bars < kWindowBars) return std::nullopt;
  const auto admissible = static_cast<std::size_t>(bars - kWindowBars + 1);
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    const int start_bar = static_cast<int>(rng.index(admissible));
    const int first = start_bar * kStepsPerBar;
    const Score window = slice(entry.score, first, first + kWindowBars * kStepsPerBar, true);
    std::vector<TokenId> tokens = encode(window, kWindowBars);
    if (tokens.size() >= kMinWindowTokens) {
      return TrainingWindow{std::move(tokens), entry.id, start_bar};
    }
  }
  return std::nullopt;
}

WindowStats window_stats(const std::vector<TrainingWindow>& windows) {
  WindowStats s;
  if (windows.empty()) return s;
  std::vector<std::size_t> lengths;
  lengths.reserve(windows.size());
  for (const TrainingWindow& w : windows) lengths.push_back(w.tokens.size());
  std::sort(lengths.begin(), lengths.end());
  s.count = lengths.size();
  s.min = lengths.front();
  s.max = lengths.back();
  s.mean = static_cast<double>(std::accumulate(lengths.begin(), lengths.end(), std::size_t{0})) /
           static_cast<double>(lengths.size());
  s.p10 = quantile(lengths, 0.1);
  s.median = quantile(lengths, 0.5);
  s.p90 = quantile(lengths, 0.9);
  return s;
}

}  // namespace contin
