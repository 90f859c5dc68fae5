#pragma once

#include <vector>

#include "contin/score.hpp"

namespace contin::testing {

/// Sixteen bars with six notes at distinct positions per bar; encodes to 305
/// tokens, so the only admissible training window is the whole piece.
inline Score memorization_piece() {
  std::vector<Note> notes;
  const int positions[] = {0, 3, 6, 9, 12, 14};
  for (int bar = 0; bar < 16; ++bar) {
    for (int i = 0; i < 6; ++i) {
      notes.push_back({bar * 16 + positions[i], 48 + (bar * 5 + i * 7) % 40, 1 + (bar + i) % 3});
    }
  }
  return Score(std::move(notes));
}

/// A short prompt with a chord, a note in the pickup bar, and one on step 79.
inline ContinuationTask fixture_task() {
  ContinuationTask t;
  t.prompt = Score({{2, 55, 2}, {16, 60, 4}, {16, 64, 4}, {16, 67, 4}, {24, 72, 6},
                    {40, 55, 8}, {48, 62, 3}, {64, 59, 12}, {79, 48, 2}});
  return t;
}

}  // namespace contin::testing
