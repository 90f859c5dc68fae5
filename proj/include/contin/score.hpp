#pragma once

// Quantized piano scores on a sixteenth-note grid and the continuation-task
// interchange document ("prompt" / "generation" note lists).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace contin {

inline constexpr int kStepsPerBar = 16;
inline constexpr int kPromptBars = 5;
inline constexpr int kGenerationBars = 12;
inline constexpr int kPromptFirstStep = 0;
inline constexpr int kPromptLastStep = kPromptBars * kStepsPerBar - 1;          // 79
inline constexpr int kGenerationFirstStep = kPromptLastStep + 1;                // 80
inline constexpr int kGenerationLastStep =
    kGenerationFirstStep + kGenerationBars * kStepsPerBar - 1;                   // 271
inline constexpr int kMaxPitch = 127;

struct Note {
  int start = 0;     // sixteenth steps from the piece origin
  int pitch = 0;     // MIDI pitch number
  int duration = 1;  // sixteenth steps

  friend bool operator==(const Note&, const Note&) = default;
};

bool is_valid_note(const Note& note);

/// Notes ordered by (start, pitch) with no repeated (start, pitch) pair.
class Score {
 public:
  Score() = default;

  /// Validates every note and canonicalizes: sorts by (start, pitch) and
  /// collapses duplicate (start, pitch) pairs to the longest duration.
  /// Throws std::invalid_argument on an invalid note.
  explicit Score(std::vector<Note> notes);

  const std::vector<Note>& notes() const { return notes_; }
  std::size_t size() const { return notes_.size(); }
  bool empty() const { return notes_.empty(); }
  auto begin() const { return notes_.begin(); }
  auto end() const { return notes_.end(); }

  friend bool operator==(const Score&, const Score&) = default;

 private:
  std::vector<Note> notes_;
};

/// Exact positive rational, used for tick-to-step ratios such as 22.5.
struct Ratio {
  std::int64_t num = 1;
  std::int64_t den = 1;
};

struct RawNoteEvent {
  std::int64_t onset_ticks = 0;
  std::int64_t offset_ticks = 0;
  int pitch = 0;
};

struct RejectedEvent {
  std::size_t index = 0;
  std::string reason;
};

struct QuantizeResult {
  Score score;
  std::vector<RejectedEvent> rejected;
};

/// Rounds a tick position to the nearest sixteenth step, halves rounding up.
std::int64_t round_to_step(std::int64_t ticks, Ratio ticks_per_sixteenth);

/// Snaps raw events to the sixteenth grid. Durations shorter than one step are
/// stretched to one step; events with a negative onset, an offset before the
/// onset, or a pitch outside 0-127 are rejected and reported.
QuantizeResult quantize(const std::vector<RawNoteEvent>& events, Ratio ticks_per_sixteenth);

/// Notes whose start lies in [start_step, end_step), optionally shifted so
/// that start_step becomes step 0.
Score slice(const Score& score, int start_step, int end_step, bool rebase = false);

/// Shifts every note start by `offset` steps.
Score shift(const Score& score, int offset);

struct ContinuationTask {
  Score prompt;
  std::optional<Score> generation;

  friend bool operator==(const ContinuationTask&, const ContinuationTask&) = default;
};

/// Throws TaskError if any prompt or generation start lies outside its region.
void validate_task(const ContinuationTask& task);

/// Parses an interchange document. Unknown keys and non-integer fields are
/// rejected; errors name the region and note index.
ContinuationTask parse_task(std::string_view text);

/// Serializes a task as a two-space indented document with a trailing newline.
std::string emit_task(const ContinuationTask& task);

}  // namespace contin
