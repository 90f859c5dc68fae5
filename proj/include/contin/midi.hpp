#pragma once

// Minimal Standard MIDI File support: note events in, Type 0 files out.

#include <cstdint>
#include <span>
#include <vector>

#include "contin/score.hpp"

namespace contin {

enum class MidiEventKind : std::uint8_t { kNoteOn, kNoteOff };

struct MidiEvent {
  std::int64_t tick = 0;
  MidiEventKind kind = MidiEventKind::kNoteOn;
  int pitch = 0;
  int velocity = 0;

  friend bool operator==(const MidiEvent&, const MidiEvent&) = default;
};

struct MidiFile {
  int ticks_per_quarter = 480;
  std::vector<MidiEvent> events;  // merged across tracks, stable by tick
  std::int64_t end_tick = 0;      // last tick seen on any track, meta events included
};

/// Parses format 0 or 1 files. Note events from every track are merged into
/// one tick-ordered stream; everything else is skipped. Throws ParseError
/// with the byte offset of the problem.
MidiFile read_midi(std::span<const std::uint8_t> bytes);

struct PairingDiagnostics {
  std::size_t closed_at_end = 0;  // note-ons never released
  std::size_t restrikes = 0;      // note-ons while the pitch was already sounding
  std::size_t orphan_offs = 0;    // note-offs with nothing sounding
};

/// Pairs note-ons with the following note-off of the same pitch, sorted by
/// (onset, pitch).
std::vector<RawNoteEvent> to_note_events(const MidiFile& midi,
                                         PairingDiagnostics* diagnostics = nullptr);

/// Format 0 file, division 4 * ticks_per_sixteenth, channel 0, velocity 64.
std::vector<std::uint8_t> write_midi(const Score& score, int ticks_per_sixteenth);

}  // namespace contin
