#include "contin/remi.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <stdexcept>

#include "contin/error.hpp"

namespace contin {

TokenKind token_kind(TokenId id) {
  if (id < 0 || id >= kVocabSize) throw std::out_of_range("token id " + std::to_string(id));
  if (id == kPad) return TokenKind::kPad;
  if (id == kBos) return TokenKind::kBos;
  if (id == kEos) return TokenKind::kEos;
  if (id == kBar) return TokenKind::kBar;
  if (id < kPitchBase) return TokenKind::kPosition;
  if (id < kPitchBase + kNumPitches) return TokenKind::kPitch;
  return TokenKind::kDuration;
}

int token_value(TokenId id) {
  switch (token_kind(id)) {
    case TokenKind::kPosition: return id - kPositionBase;
    case TokenKind::kPitch: return id - kPitchBase;
    case TokenKind::kDuration: return id - kDurationBase;
    default: return 0;
  }
}

std::string token_name(TokenId id) {
  switch (token_kind(id)) {
    case TokenKind::kPad: return "PAD";
    case TokenKind::kBos: return "BOS";
    case TokenKind::kEos: return "EOS";
    case TokenKind::kBar: return "Bar";
    case TokenKind::kPosition: return "Position_" + std::to_string(token_value(id));
    case TokenKind::kPitch: return "Pitch_" + std::to_string(token_value(id));
    case TokenKind::kDuration: return "Duration_" + std::to_string(token_value(id));
  }
  return {};
}

namespace {

TokenMask range_mask(TokenId first, int count) {
  TokenMask m;
  for (int i = 0; i < count; ++i) m.set(static_cast<std::size_t>(first + i));
  return m;
}

const TokenMask& all_pitches() {
  static const TokenMask mask = range_mask(kPitchBase, kNumPitches);
  return mask;
}

const TokenMask& all_durations() {
  static const TokenMask mask = range_mask(duration_token(1), kMaxDuration);
  return mask;
}

TokenMask positions_after(int last_position) {
  return range_mask(position_token(last_position + 1), kNumPositions - 1 - last_position);
}

}  // namespace

TokenMask legal_next(const GrammarState& state) {
  using Last = GrammarState::Last;
  TokenMask mask;
  switch (state.last) {
    case Last::kStart:
      mask.set(kBar);
      break;
    case Last::kBar:
    case Last::kDuration:
      mask = positions_after(state.last_position);
      mask.set(kBar);
      if (state.last == Last::kDuration) mask |= all_pitches();
      break;
    case Last::kPosition:
      mask = all_pitches();
      break;
    case Last::kPitch:
      mask = all_durations();
      break;
  }
  return mask;
}

GrammarState advance(const GrammarState& state, TokenId token) {
  if (token < 0 || token >= kVocabSize || !legal_next(state).test(static_cast<std::size_t>(token))) {
    throw Error("illegal token " + std::to_string(token) + " in current grammar state");
  }
  GrammarState next = state;
  switch (token_kind(token)) {
    case TokenKind::kBar:
      next.last = GrammarState::Last::kBar;
      ++next.bars_emitted;
      next.last_position = -1;
      break;
    case TokenKind::kPosition:
      next.last = GrammarState::Last::kPosition;
      next.last_position = token_value(token);
      break;
    case TokenKind::kPitch:
      next.last = GrammarState::Last::kPitch;
      break;
    case TokenKind::kDuration:
      next.last = GrammarState::Last::kDuration;
      break;
    default:
      break;  // unreachable: specials are never legal
  }
  return next;
}

bool at_note_boundary(const GrammarState& state) {
  return state.last != GrammarState::Last::kPosition && state.last != GrammarState::Last::kPitch;
}

std::vector<TokenId> encode(const Score& score, int n_bars, bool append_eos) {
  if (n_bars <= 0) throw std::invalid_argument("n_bars must be positive");
  const int limit = n_bars * kStepsPerBar;
  for (const Note& n : score) {
    if (n.start >= limit) {
      throw Error("note (start " + std::to_string(n.start) + ", pitch " + std::to_string(n.pitch) +
                  ") lies beyond the " + std::to_string(n_bars) + "-bar window");
    }
  }
  std::vector<TokenId> out;
  out.reserve(1 + static_cast<std::size_t>(n_bars) + 3 * score.size());
  out.push_back(kBos);
  auto it = score.begin();
  for (int bar = 0; bar < n_bars; ++bar) {
    out.push_back(kBar);
    const int bar_end = (bar + 1) * kStepsPerBar;
    int open_position = -1;
    for (; it != score.end() && it->start < bar_end; ++it) {
      const int position = it->start % kStepsPerBar;
      if (position != open_position) {
        out.push_back(position_token(position));
        open_position = position;
      }
      out.push_back(pitch_token(it->pitch));
      out.push_back(duration_token(std::clamp(it->duration, 1, kMaxDuration)));
    }
  }
  if (append_eos) out.push_back(kEos);
  return out;
}

DecodeResult decode(std::span<const TokenId> tokens, int base_step, DecodeMode mode) {
  const bool strict = mode == DecodeMode::kStrict;
  DecodeResult result;
  std::vector<Note> notes;
  GrammarState state;
  int pitch = 0;
  std::size_t i = 0;
  if (!tokens.empty() && tokens[0] == kBos) i = 1;
  std::size_t note_tokens_pending = 0;

  for (; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    if (t == kEos && at_note_boundary(state)) {
      if (i + 1 == tokens.size()) break;
      if (strict) throw TokenError("tokens after EOS", i + 1);
      result.skipped += tokens.size() - i - 1;
      break;
    }
    if (t < 0 || t >= kVocabSize || !legal_next(state).test(static_cast<std::size_t>(t))) {
      if (strict) {
        const std::string what = (t < 0 || t >= kVocabSize) ? "out-of-range" : token_name(t);
        throw TokenError("ungrammatical token " + what, i);
      }
      ++result.skipped;
      continue;
    }
    state = advance(state, t);
    switch (token_kind(t)) {
      case TokenKind::kPosition:
        note_tokens_pending = 1;
        break;
      case TokenKind::kPitch:
        pitch = token_value(t);
        ++note_tokens_pending;
        break;
      case TokenKind::kDuration:
        notes.push_back({base_step + kStepsPerBar * (state.bars_emitted - 1) + state.last_position,
                         pitch, token_value(t)});
        note_tokens_pending = 0;
        break;
      default:
        break;
    }
  }
  if (!at_note_boundary(state)) {
    if (strict) throw TokenError("stream ends inside a note", tokens.size());
    result.skipped += note_tokens_pending;
  }
  result.bars = state.bars_emitted;
  result.score = Score(std::move(notes));
  return result;
}

std::string format_tokens(std::span<const TokenId> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::vector<TokenId> parse_tokens(std::string_view line) {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
    if (pos == line.size()) break;
    std::size_t end = pos;
    while (end < line.size() && !std::isspace(static_cast<unsigned char>(line[end]))) ++end;
    TokenId id = -1;
    const auto [ptr, ec] = std::from_chars(line.data() + pos, line.data() + end, id);
    if (ec != std::errc() || ptr != line.data() + end || id < 0 || id >= kVocabSize) {
      throw Error("bad token id \"" + std::string(line.substr(pos, end - pos)) + "\"");
    }
    out.push_back(id);
    pos = end;
  }
  return out;
}

}  // namespace contin
