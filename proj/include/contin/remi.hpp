#pragma once

// Simplified REMI token space (Bar / Position / Pitch / Duration, no
// velocities) and the grammar that keeps sampled streams decodable.

#include <bitset>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "contin/score.hpp"

namespace contin {

using TokenId = int;

inline constexpr int kVocabSize = 228;
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kBar = 3;
inline constexpr TokenId kPositionBase = 4;
inline constexpr int kNumPositions = 16;
inline constexpr TokenId kPitchBase = kPositionBase + kNumPositions;  // 20
inline constexpr int kNumPitches = 128;
inline constexpr TokenId kDurationBase = kPitchBase + kNumPitches - 1;  // 147, DURATION_d = 147 + d
inline constexpr int kMaxDuration = 80;

static_assert(kDurationBase + kMaxDuration + 1 == kVocabSize);

enum class TokenKind : std::uint8_t { kPad, kBos, kEos, kBar, kPosition, kPitch, kDuration };

constexpr TokenId position_token(int p) { return kPositionBase + p; }
constexpr TokenId pitch_token(int n) { return kPitchBase + n; }
constexpr TokenId duration_token(int d) { return kDurationBase + d; }

/// Total on [0, kVocabSize); throws std::out_of_range otherwise.
TokenKind token_kind(TokenId id);
/// Position, pitch, or duration carried by the token; 0 for the others.
int token_value(TokenId id);
std::string token_name(TokenId id);

using TokenMask = std::bitset<kVocabSize>;

struct GrammarState {
  enum class Last : std::uint8_t { kStart, kBar, kPosition, kPitch, kDuration };

  Last last = Last::kStart;
  int bars_emitted = 0;
  int last_position = -1;

  friend bool operator==(const GrammarState&, const GrammarState&) = default;
};

/// Tokens allowed after `state`. PAD, BOS and EOS are never included.
TokenMask legal_next(const GrammarState& state);

/// Throws Error if `token` is not in legal_next(state).
GrammarState advance(const GrammarState& state, TokenId token);

/// True when the stream can stop here without leaving a half-written note.
bool at_note_boundary(const GrammarState& state);

/// BOS, then n_bars bars of BAR, POSITION, (PITCH DURATION)+ groups in
/// (position, pitch) order. Durations are clamped to [1, 80]. Throws Error
/// listing the first note whose start falls outside the n_bars window.
std::vector<TokenId> encode(const Score& score, int n_bars, bool append_eos = false);

enum class DecodeMode : std::uint8_t { kStrict, kLenient };

struct DecodeResult {
  Score score;
  std::size_t skipped = 0;  // lenient mode only
  int bars = 0;
};

/// Inverse of encode. A leading BOS and a trailing EOS are accepted. In strict
/// mode the first ungrammatical token raises TokenError; in lenient mode it is
/// dropped and counted.
DecodeResult decode(std::span<const TokenId> tokens, int base_step,
                    DecodeMode mode = DecodeMode::kStrict);

/// Whitespace-separated decimal ids.
std::string format_tokens(std::span<const TokenId> tokens);
/// Throws Error on anything that is not an id in [0, kVocabSize).
std::vector<TokenId> parse_tokens(std::string_view line);

}  // namespace contin
