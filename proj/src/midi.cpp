#include "contin/midi.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>

#include "contin/error.hpp"

namespace contin {

namespace {

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes, std::size_t base = 0)
      : bytes_(bytes), base_(base) {}

  /// Absolute offset in the enclosing file.
  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n) throw ParseError(std::string("truncated ") + what, offset());
  }

  std::uint8_t u8(const char* what) {
    require(1, what);
    return bytes_[pos_++];
  }

  std::uint32_t u16be(const char* what) {
    require(2, what);
    std::uint32_t v = (std::uint32_t{bytes_[pos_]} << 8) | bytes_[pos_ + 1];
    pos_ += 2;
    return v;
  }

  std::uint32_t u32be(const char* what) {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
    pos_ += 4;
    return v;
  }

  // At most four bytes, per the file format.
  std::uint32_t vlq(const char* what) {
    const std::size_t at = offset();
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8(what);
      v = (v << 7) | (b & 0x7F);
      if ((b & 0x80) == 0) return v;
    }
    throw ParseError(std::string("variable-length quantity longer than 4 bytes in ") + what, at);
  }

  void skip(std::size_t n, const char* what) {
    require(n, what);
    pos_ += n;
  }

  bool magic(const char (&tag)[5]) {
    if (remaining() < 4) return false;
    return std::equal(tag, tag + 4, bytes_.begin() + static_cast<std::ptrdiff_t>(pos_));
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t base_ = 0;
  std::size_t pos_ = 0;
};

void parse_track(std::span<const std::uint8_t> track, std::size_t base_offset,
                 std::vector<MidiEvent>& out, std::int64_t& end_tick) {
  ByteReader in(track, base_offset);
  std::int64_t tick = 0;
  std::uint8_t running = 0;
  while (in.remaining() > 0) {
    tick += in.vlq("delta time");
    end_tick = std::max(end_tick, tick);
    const std::size_t at = in.offset();
    std::uint8_t status = in.u8("event");
    if (status == 0xFF) {
      running = 0;  // meta and sysex events cancel running status
      const std::uint8_t type = in.u8("meta event");
      const std::uint32_t len = in.vlq("meta length");
      in.skip(len, "meta event data");
      if (type == 0x2F) break;  // end of track
      continue;
    }
    if (status == 0xF0 || status == 0xF7) {
      running = 0;
      in.skip(in.vlq("sysex length"), "sysex data");
      continue;
    }
    if (status >= 0xF0) throw ParseError("unsupported system message", at);

    std::uint8_t first;
    if (status & 0x80) {
      running = status;
      first = in.u8("channel message data");
    } else {
      if (running == 0) throw ParseError("running status without a preceding status byte", at);
      first = status;
      status = running;
    }
    const std::uint8_t kind = status & 0xF0;
    const bool single_data = kind == 0xC0 || kind == 0xD0;
    const std::uint8_t second = single_data ? 0 : in.u8("channel message data");
    if ((first | second) & 0x80) throw ParseError("data byte with high bit set", at);

    if (kind == 0x90 || kind == 0x80) {
      // Note-on with velocity 0 is a release.
      const bool on = kind == 0x90 && second > 0;
      out.push_back({tick, on ? MidiEventKind::kNoteOn : MidiEventKind::kNoteOff, first,
                     kind == 0x90 && !on ? 0 : second});
    }
  }
}

void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::array<std::uint8_t, 5> buf{};
  int n = 0;
  buf[n++] = v & 0x7F;
  while ((v >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

}  // namespace

MidiFile read_midi(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (!in.magic("MThd")) throw ParseError("bad magic: expected MThd header chunk", 0);
  in.skip(4, "header");
  const std::uint32_t header_len = in.u32be("header length");
  if (header_len < 6) throw ParseError("header chunk shorter than 6 bytes", 4);
  const std::size_t header_body = in.offset();
  in.require(header_len, "header chunk");
  const std::uint32_t format = in.u16be("format");
  const std::uint32_t n_tracks = in.u16be("track count");
  const std::uint32_t division = in.u16be("division");
  if (format > 1) throw ParseError("unsupported MIDI format " + std::to_string(format), header_body);
  if (division & 0x8000) {
    throw ParseError("SMPTE time division is not supported; metrical division required",
                     header_body + 4);
  }
  if (division == 0) throw ParseError("division must be positive", header_body + 4);
  in.skip(header_len - 6, "header chunk");

  MidiFile midi;
  midi.ticks_per_quarter = static_cast<int>(division);
  std::uint32_t tracks_seen = 0;
  while (in.remaining() > 0 && tracks_seen < n_tracks) {
    const std::size_t chunk_at = in.offset();
    const bool is_track = in.magic("MTrk");
    in.skip(4, "chunk id");
    const std::uint32_t len = in.u32be("chunk length");
    if (in.remaining() < len) throw ParseError("truncated chunk", chunk_at);
    const std::size_t body_at = in.offset();
    if (is_track) {
      std::vector<MidiEvent> events;
      std::int64_t end_tick = 0;
      parse_track(bytes.subspan(body_at, len), body_at, events, end_tick);
      midi.events.insert(midi.events.end(), events.begin(), events.end());
      midi.end_tick = std::max(midi.end_tick, end_tick);
      ++tracks_seen;
    }
    in.skip(len, "chunk body");
  }
  if (tracks_seen < n_tracks) {
    throw ParseError("header declares " + std::to_string(n_tracks) + " tracks, found " +
                         std::to_string(tracks_seen),
                     in.offset());
  }
  std::stable_sort(midi.events.begin(), midi.events.end(),
                   [](const MidiEvent& a, const MidiEvent& b) { return a.tick < b.tick; });
  return midi;
}

std::vector<RawNoteEvent> to_note_events(const MidiFile& midi, PairingDiagnostics* diagnostics) {
  PairingDiagnostics diag;
  std::array<std::int64_t, 128> sounding_since;
  sounding_since.fill(-1);
  std::vector<RawNoteEvent> notes;
  std::int64_t last_tick = midi.end_tick;
  for (const MidiEvent& ev : midi.events) {
    last_tick = std::max(last_tick, ev.tick);
    auto& since = sounding_since[static_cast<std::size_t>(ev.pitch)];
    if (ev.kind == MidiEventKind::kNoteOn) {
      if (since >= 0) {
        notes.push_back({since, ev.tick, ev.pitch});
        ++diag.restrikes;
      }
      since = ev.tick;
    } else if (since >= 0) {
      notes.push_back({since, ev.tick, ev.pitch});
      since = -1;
    } else {
      ++diag.orphan_offs;
    }
  }
  for (int pitch = 0; pitch < 128; ++pitch) {
    const std::int64_t since = sounding_since[static_cast<std::size_t>(pitch)];
    if (since >= 0) {
      notes.push_back({since, last_tick, pitch});
      ++diag.closed_at_end;
    }
  }
  std::stable_sort(notes.begin(), notes.end(), [](const RawNoteEvent& a, const RawNoteEvent& b) {
    if (a.onset_ticks != b.onset_ticks) return a.onset_ticks < b.onset_ticks;
    return a.pitch < b.pitch;
  });
  if (diagnostics) *diagnostics = diag;
  return notes;
}

std::vector<std::uint8_t> write_midi(const Score& score, int ticks_per_sixteenth) {
  if (ticks_per_sixteenth <= 0 || 4 * ticks_per_sixteenth > 0x7FFF) {
    throw std::invalid_argument("ticks_per_sixteenth must be in [1, 8191]");
  }
  struct Pending {
    std::int64_t tick;
    bool on;
    int pitch;
  };
  std::vector<Pending> pending;
  pending.reserve(score.size() * 2);
  for (const Note& n : score) {
    pending.push_back({std::int64_t{n.start} * ticks_per_sixteenth, true, n.pitch});
    pending.push_back({std::int64_t{n.start + n.duration} * ticks_per_sixteenth, false, n.pitch});
  }
  // Releases before attacks at the same tick so back-to-back notes of one
  // pitch read back as two notes.
  std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
    if (a.tick != b.tick) return a.tick < b.tick;
    if (a.on != b.on) return !a.on;
    return a.pitch < b.pitch;
  });

  std::vector<std::uint8_t> track;
  std::int64_t now = 0;
  for (const Pending& p : pending) {
    put_vlq(track, static_cast<std::uint32_t>(p.tick - now));
    now = p.tick;
    track.push_back(p.on ? 0x90 : 0x80);
    track.push_back(static_cast<std::uint8_t>(p.pitch));
    track.push_back(p.on ? 64 : 0);
  }
  put_vlq(track, 0);
  track.insert(track.end(), {0xFF, 0x2F, 0x00});

  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
  put_u32be(out, 6);
  out.insert(out.end(), {0x00, 0x00, 0x00, 0x01});
  const int division = 4 * ticks_per_sixteenth;
  out.push_back(static_cast<std::uint8_t>(division >> 8));
  out.push_back(static_cast<std::uint8_t>(division & 0xFF));
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_u32be(out, static_cast<std::uint32_t>(track.size()));
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

}  // namespace contin
