#include "contin/score.hpp"

#include <algorithm>
#include <stdexcept>

#include "contin/error.hpp"
#include "json.hpp"

namespace contin {

namespace {

using nlohmann::json;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

struct Region {
  const char* key;
  int first;
  int last;
};

constexpr Region kPromptRegion{"prompt", kPromptFirstStep, kPromptLastStep};
constexpr Region kGenerationRegion{"generation", kGenerationFirstStep, kGenerationLastStep};

std::string range_text(const Region& region) {
  return "[" + std::to_string(region.first) + "," + std::to_string(region.last) + "]";
}

void check_region(const Score& score, const Region& region) {
  for (std::size_t i = 0; i < score.size(); ++i) {
    const int start = score.notes()[i].start;
    if (start < region.first || start > region.last) {
      throw TaskError(std::string(region.key) + "[" + std::to_string(i) + "]: " + region.key +
                          " start out of range " + range_text(region),
                      region.key, static_cast<std::ptrdiff_t>(i));
    }
  }
}

int read_int_field(const json& obj, const char* field, const Region& region, std::size_t index) {
  const auto it = obj.find(field);
  const std::string where = std::string(region.key) + "[" + std::to_string(index) + "]";
  if (it == obj.end()) {
    throw TaskError(where + ": note field \"" + field + "\" missing", region.key,
                    static_cast<std::ptrdiff_t>(index));
  }
  if (!it->is_number_integer()) {
    throw TaskError(where + ": note field \"" + field + "\" must be an integer", region.key,
                    static_cast<std::ptrdiff_t>(index));
  }
  const auto value = it->get<std::int64_t>();
  if (value < INT32_MIN || value > INT32_MAX) {
    throw TaskError(where + ": note field \"" + field + "\" out of integer range", region.key,
                    static_cast<std::ptrdiff_t>(index));
  }
  return static_cast<int>(value);
}

Score read_region(const json& doc, const Region& region) {
  const json& list = doc.at(region.key);
  if (!list.is_array()) {
    throw TaskError(std::string("\"") + region.key + "\" must be a list", region.key);
  }
  std::vector<Note> notes;
  notes.reserve(list.size());
  for (std::size_t i = 0; i < list.size(); ++i) {
    const json& item = list[i];
    const std::string where = std::string(region.key) + "[" + std::to_string(i) + "]";
    if (!item.is_object()) {
      throw TaskError(where + ": note must be an object", region.key,
                      static_cast<std::ptrdiff_t>(i));
    }
    for (const auto& [key, value] : item.items()) {
      if (key != "start" && key != "pitch" && key != "duration") {
        throw TaskError(where + ": unknown note key \"" + key + "\"", region.key,
                        static_cast<std::ptrdiff_t>(i));
      }
    }
    Note note{read_int_field(item, "start", region, i), read_int_field(item, "pitch", region, i),
              read_int_field(item, "duration", region, i)};
    if (note.start < region.first || note.start > region.last) {
      throw TaskError(where + ": " + region.key + " start out of range " + range_text(region),
                      region.key, static_cast<std::ptrdiff_t>(i));
    }
    if (note.pitch < 0 || note.pitch > kMaxPitch) {
      throw TaskError(where + ": pitch out of range [0,127]", region.key,
                      static_cast<std::ptrdiff_t>(i));
    }
    if (note.duration < 1) {
      throw TaskError(where + ": duration must be at least 1", region.key,
                      static_cast<std::ptrdiff_t>(i));
    }
    notes.push_back(note);
  }
  return Score(std::move(notes));
}

nlohmann::ordered_json region_to_json(const Score& score) {
  auto list = nlohmann::ordered_json::array();
  for (const Note& n : score) {
    // Key order follows the published example object.
    auto obj = nlohmann::ordered_json::object();
    obj["start"] = n.start;
    obj["pitch"] = n.pitch;
    obj["duration"] = n.duration;
    list.push_back(std::move(obj));
  }
  return list;
}

}  // namespace

bool is_valid_note(const Note& note) {
  return note.start >= 0 && note.pitch >= 0 && note.pitch <= kMaxPitch && note.duration >= 1;
}

Score::Score(std::vector<Note> notes) : notes_(std::move(notes)) {
  for (const Note& n : notes_) {
    if (!is_valid_note(n)) {
      throw std::invalid_argument("invalid note (start " + std::to_string(n.start) + ", pitch " +
                                  std::to_string(n.pitch) + ", duration " +
                                  std::to_string(n.duration) + ")");
    }
  }
  // Longest duration first within an equal (start, pitch) run, so unique keeps it.
  std::sort(notes_.begin(), notes_.end(), [](const Note& a, const Note& b) {
    if (a.start != b.start) return a.start < b.start;
    if (a.pitch != b.pitch) return a.pitch < b.pitch;
    return a.duration > b.duration;
  });
  notes_.erase(std::unique(notes_.begin(), notes_.end(),
                           [](const Note& a, const Note& b) {
                             return a.start == b.start && a.pitch == b.pitch;
                           }),
               notes_.end());
}

std::int64_t round_to_step(std::int64_t ticks, Ratio tps) {
  // ticks / (num/den) + 1/2, floored.
  return floor_div(2 * ticks * tps.den + tps.num, 2 * tps.num);
}

QuantizeResult quantize(const std::vector<RawNoteEvent>& events, Ratio tps) {
  if (tps.num <= 0 || tps.den <= 0) {
    throw std::invalid_argument("ticks_per_sixteenth must be positive");
  }
  QuantizeResult result;
  std::vector<Note> notes;
  notes.reserve(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    const RawNoteEvent& ev = events[i];
    if (ev.onset_ticks < 0) {
      result.rejected.push_back({i, "negative onset " + std::to_string(ev.onset_ticks)});
      continue;
    }
    if (ev.pitch < 0 || ev.pitch > kMaxPitch) {
      result.rejected.push_back({i, "pitch " + std::to_string(ev.pitch) + " outside 0-127"});
      continue;
    }
    if (ev.offset_ticks < ev.onset_ticks) {
      result.rejected.push_back({i, "offset precedes onset"});
      continue;
    }
    const std::int64_t start = round_to_step(ev.onset_ticks, tps);
    const std::int64_t end = round_to_step(ev.offset_ticks, tps);
    if (end > INT32_MAX) {
      result.rejected.push_back({i, "event beyond representable range"});
      continue;
    }
    notes.push_back(
        {static_cast<int>(start), ev.pitch, static_cast<int>(std::max<std::int64_t>(1, end - start))});
  }
  result.score = Score(std::move(notes));
  return result;
}

Score slice(const Score& score, int start_step, int end_step, bool rebase) {
  std::vector<Note> kept;
  for (const Note& n : score) {
    if (n.start >= start_step && n.start < end_step) {
      kept.push_back(rebase ? Note{n.start - start_step, n.pitch, n.duration} : n);
    }
  }
  return Score(std::move(kept));
}

Score shift(const Score& score, int offset) {
  std::vector<Note> moved;
  moved.reserve(score.size());
  for (const Note& n : score) moved.push_back({n.start + offset, n.pitch, n.duration});
  return Score(std::move(moved));
}

void validate_task(const ContinuationTask& task) {
  check_region(task.prompt, kPromptRegion);
  if (task.generation) check_region(*task.generation, kGenerationRegion);
}

ContinuationTask parse_task(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw TaskError(std::string("malformed document: ") + e.what());
  }
  if (!doc.is_object()) throw TaskError("malformed document: top level must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (key != kPromptRegion.key && key != kGenerationRegion.key) {
      throw TaskError("unknown top-level key \"" + key + "\"");
    }
  }
  if (!doc.contains(kPromptRegion.key)) throw TaskError("missing \"prompt\" key");

  ContinuationTask task;
  task.prompt = read_region(doc, kPromptRegion);
  if (doc.contains(kGenerationRegion.key)) {
    task.generation = read_region(doc, kGenerationRegion);
  }
  return task;
}

std::string emit_task(const ContinuationTask& task) {
  auto doc = nlohmann::ordered_json::object();
  doc["prompt"] = region_to_json(task.prompt);
  if (task.generation) doc["generation"] = region_to_json(*task.generation);
  return doc.dump(2) + "\n";
}

}  // namespace contin
