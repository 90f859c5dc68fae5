#include "contin/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "contin/corpus.hpp"
#include "contin/error.hpp"
#include "contin/midi.hpp"
#include "contin/remi.hpp"
#include "contin/rwkv.hpp"
#include "contin/sampler.hpp"
#include "contin/score.hpp"
#include "contin/trainer.hpp"
#include "json.hpp"

namespace contin {

namespace {

namespace fs = std::filesystem;

// Carries an exit code out of a command body.
struct Failure {
  int code;
  std::string message;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{kExitInput, "cannot read " + path.string()};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure{kExitInput, "cannot write " + path.string()};
  out << text;
  if (!out) throw Failure{kExitInput, "short write to " + path.string()};
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  try {
    return read_file_bytes(path);
  } catch (const Error&) {
    throw Failure{kExitInput, "cannot read " + path.string()};
  }
}

ContinuationTask load_task(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return parse_task(text);
  } catch (const TaskError& e) {
    throw Failure{kExitContent, "invalid task " + path.string() + ": " + e.what()};
  }
}

// ---------------------------------------------------------------------------
// continue
// ---------------------------------------------------------------------------

struct ContinueArgs {
  std::string input;
  std::string output_dir;
  int n_sample = 1;
  std::string weights;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  double top_p = 0.95;
  int top_k = 40;
  double rep_penalty = 1.0;
  int max_tokens = 2048;
};

int cmd_continue(const ContinueArgs& args, std::ostream& out) {
  const ContinuationTask task = load_task(args.input);

  SamplerParams params;
  params.temperature = args.temperature;
  params.top_p = args.top_p;
  params.top_k = args.top_k > 0 ? std::optional<int>(args.top_k) : std::nullopt;
  params.repetition_penalty = args.rep_penalty;
  GenerationBudget budget;
  budget.max_tokens = args.max_tokens;
  try {
    params.validate();
    budget.validate();
  } catch (const std::invalid_argument& e) {
    throw Failure{kExitInput, e.what()};
  }

  std::string weights_path = args.weights;
  if (weights_path.empty()) {
    if (const char* env = std::getenv("CONTIN_WEIGHTS")) weights_path = env;
  }
  if (weights_path.empty()) {
    throw Failure{kExitWeights, "no weights: pass --weights or set CONTIN_WEIGHTS"};
  }
  WeightSet weights = [&] {
    try {
      WeightSet w = load_weights_file(weights_path);
      if (w.config().vocab_size != kVocabSize) {
        throw WeightError("vocabulary size " + std::to_string(w.config().vocab_size) +
                          " does not match the tokenizer (" + std::to_string(kVocabSize) + ")");
      }
      return w;
    } catch (const Error& e) {
      throw Failure{kExitWeights, "cannot load weights " + weights_path + ": " + e.what()};
    }
  }();

  std::error_code ec;
  fs::create_directories(args.output_dir, ec);
  if (ec) throw Failure{kExitInput, "cannot create " + args.output_dir + ": " + ec.message()};

  for (int i = 0; i < args.n_sample; ++i) {
    SamplerParams stream = params;
    stream.seed = args.seed + static_cast<std::uint64_t>(i);
    const Continuation c = generate_continuation(weights, task, stream, budget);
    ContinuationTask result{task.prompt, c.score};
    const fs::path file = fs::path(args.output_dir) / ("sample_" + std::to_string(i) + ".json");
    write_text(file, emit_task(result));
    out << file.string() << ": " << c.score.size() << " notes, " << c.bars << " bars";
    if (c.truncated) out << " (truncated at " << args.max_tokens << " tokens)";
    out << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// tokenize / detokenize / vocab
// ---------------------------------------------------------------------------

int cmd_tokenize(const std::string& input, const std::string& output) {
  const ContinuationTask task = load_task(input);
  std::string text = format_tokens(encode(task.prompt, kPromptBars)) + "\n";
  if (task.generation) {
    text += format_tokens(encode(shift(*task.generation, -kGenerationFirstStep), kGenerationBars)) +
            "\n";
  }
  write_text(output, text);
  return kExitOk;
}

int cmd_detokenize(const std::string& input, const std::string& output, bool lenient,
                   std::ostream& out) {
  const std::string text = read_text(input);
  std::vector<std::string> lines;
  std::istringstream ss(text);
  for (std::string line; std::getline(ss, line);) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  }
  if (lines.empty() || lines.size() > 2) {
    throw Failure{kExitContent, "expected one prompt line and an optional generation line"};
  }
  const DecodeMode mode = lenient ? DecodeMode::kLenient : DecodeMode::kStrict;
  ContinuationTask task;
  std::size_t skipped = 0;
  try {
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const std::vector<TokenId> tokens = parse_tokens(lines[i]);
      DecodeResult r = decode(tokens, i == 0 ? 0 : kGenerationFirstStep, mode);
      skipped += r.skipped;
      (i == 0 ? task.prompt : task.generation.emplace()) = std::move(r.score);
    }
    validate_task(task);
  } catch (const TokenError& e) {
    throw Failure{kExitContent, std::string("ungrammatical stream: ") + e.what()};
  } catch (const Error& e) {
    throw Failure{kExitContent, e.what()};
  }
  write_text(output, emit_task(task));
  if (skipped) out << "skipped " << skipped << " ungrammatical tokens\n";
  return kExitOk;
}

int cmd_vocab_dump(std::ostream& out) {
  for (TokenId id = 0; id < kVocabSize; ++id) out << id << '\t' << token_name(id) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// midi2json / json2midi
// ---------------------------------------------------------------------------

int cmd_midi2json(const std::string& input, const std::string& output, const std::string& tps_text,
                  std::ostream& out) {
  std::optional<Ratio> tps_override;
  if (!tps_text.empty()) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(tps_text, &used);
      if (used != tps_text.size() || v <= 0) throw std::invalid_argument("tps");
      tps_override = Ratio{v, 1};
    } catch (const std::exception&) {
      throw Failure{kExitInput, "--tps must be a positive integer"};
    }
  }
  const std::vector<std::uint8_t> bytes = read_bytes(input);
  MidiFile midi;
  try {
    midi = read_midi(bytes);
  } catch (const ParseError& e) {
    throw Failure{kExitContent, "cannot parse " + input + ": " + e.what()};
  }
  const Ratio tps = tps_override.value_or(Ratio{midi.ticks_per_quarter, 4});
  PairingDiagnostics diag;
  const QuantizeResult q = quantize(to_note_events(midi, &diag), tps);
  ContinuationTask task;
  task.prompt = slice(q.score, kPromptFirstStep, kPromptLastStep + 1);
  Score generation = slice(q.score, kGenerationFirstStep, kGenerationLastStep + 1);
  if (!generation.empty()) task.generation = std::move(generation);
  const std::size_t dropped = q.score.size() - task.prompt.size() -
                              (task.generation ? task.generation->size() : 0);
  write_text(output, emit_task(task));
  if (dropped) out << "dropped " << dropped << " notes starting after step 271\n";
  if (!q.rejected.empty()) out << "rejected " << q.rejected.size() << " events\n";
  if (diag.closed_at_end + diag.restrikes + diag.orphan_offs > 0) {
    out << "repaired pairing: " << diag.closed_at_end << " unreleased, " << diag.restrikes
        << " restrikes, " << diag.orphan_offs << " orphan releases\n";
  }
  return kExitOk;
}

int cmd_json2midi(const std::string& input, const std::string& output, int tps) {
  if (tps <= 0 || tps > 8191) throw Failure{kExitInput, "--tps must be in [1, 8191]"};
  const ContinuationTask task = load_task(input);
  std::vector<Note> notes = task.prompt.notes();
  if (task.generation) {
    notes.insert(notes.end(), task.generation->begin(), task.generation->end());
  }
  const std::vector<std::uint8_t> bytes = write_midi(Score(std::move(notes)), tps);
  try {
    write_file_bytes(output, bytes);
  } catch (const Error& e) {
    throw Failure{kExitInput, e.what()};
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// inspect-weights / init-weights
// ---------------------------------------------------------------------------

std::string shape_text(const std::vector<std::uint32_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

int cmd_inspect_weights(const std::string& path, std::ostream& out) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  WeightSet weights = [&] {
    try {
      return load_weights(bytes);
    } catch (const Error& e) {
      throw Failure{kExitWeights, "cannot load weights " + path + ": " + e.what()};
    }
  }();
  const ModelConfig& c = weights.config();
  out << "layers " << c.n_layers << ", d_model " << c.d_model << ", d_ffn " << c.d_ffn
      << ", vocab " << c.vocab_size << ", heads " << c.n_heads << " x " << c.head_dim() << '\n';
  out << "low-rank: decay " << c.decay_rank << ", iclr " << c.iclr_rank << ", value "
      << c.value_rank << ", gate " << c.gate_rank << '\n';
  for (const TensorSpec& t : weights.layout().tensors()) {
    out << t.name << "\tf32\t" << shape_text(t.shape) << '\t' << t.size << '\n';
  }
  out << "parameters " << param_count(weights) << '\n';
  return kExitOk;
}

struct InitArgs {
  std::string output;
  int layers = 12, d_model = 384, d_ffn = 1536, heads = 6, rank = 0;
  std::uint64_t seed = 0;
  bool zero = false;
};

int cmd_init_weights(const InitArgs& args, std::ostream& out) {
  ModelConfig cfg;
  cfg.n_layers = args.layers;
  cfg.d_model = args.d_model;
  cfg.d_ffn = args.d_ffn;
  cfg.n_heads = args.heads;
  const LoraRanks r = default_lora_ranks(args.d_model);
  cfg.decay_rank = args.rank > 0 ? args.rank : r.decay;
  cfg.iclr_rank = args.rank > 0 ? args.rank : r.iclr;
  cfg.value_rank = args.rank > 0 ? args.rank : r.value;
  cfg.gate_rank = args.rank > 0 ? args.rank : r.gate;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Failure{kExitInput, e.what()};
  }
  const TensorLayout layout(cfg);
  std::vector<float> values(layout.total(), 0.0f);
  if (!args.zero) {
    const std::vector<double> p = init_params(layout, args.seed);
    values.assign(p.begin(), p.end());
  }
  try {
    save_weights_file(args.output, WeightSet(cfg, std::move(values)));
  } catch (const Error& e) {
    throw Failure{kExitInput, e.what()};
  }
  out << args.output << ": " << layout.total() << " parameters\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

struct ToyRun {
  TrainConfig train;
  double holdout_fraction = 0.1;
  std::string salt = "contin";
  int max_tries = 32;
};

ToyRun parse_toy_config(const std::string& text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Failure{kExitInput, std::string("config: malformed JSON: ") + e.what()};
  }
  if (!doc.is_object()) throw Failure{kExitInput, "config: top level must be an object"};

  ToyRun run;
  ModelConfig& m = run.train.model;
  int rank = m.decay_rank;
  auto number = [](const json& v, const std::string& key) {
    if (!v.is_number()) throw Failure{kExitInput, key + ": must be a number"};
    return v.get<double>();
  };
  auto integer = [](const json& v, const std::string& key) {
    if (!v.is_number_integer()) throw Failure{kExitInput, key + ": must be an integer"};
    return v.get<long long>();
  };
  auto positive_int = [&](const json& v, const std::string& key) {
    const long long x = integer(v, key);
    if (x <= 0 || x > 1'000'000'000) throw Failure{kExitInput, key + ": must be positive"};
    return static_cast<int>(x);
  };
  for (const auto& [key, v] : doc.items()) {
    if (key == "n_layers") m.n_layers = positive_int(v, key);
    else if (key == "d_model") m.d_model = positive_int(v, key);
    else if (key == "d_ffn") m.d_ffn = positive_int(v, key);
    else if (key == "n_heads") m.n_heads = positive_int(v, key);
    else if (key == "lora_rank") rank = positive_int(v, key);
    else if (key == "lr_max") run.train.lr_max = number(v, key);
    else if (key == "lr_min") run.train.lr_min = number(v, key);
    else if (key == "weight_decay") run.train.weight_decay = number(v, key);
    else if (key == "batch_size") run.train.batch_size = positive_int(v, key);
    else if (key == "seq_len") run.train.seq_len = positive_int(v, key);
    else if (key == "total_steps") {
      const long long x = integer(v, key);
      if (x < 0 || x > 1'000'000'000) throw Failure{kExitInput, key + ": must be non-negative"};
      run.train.total_steps = static_cast<int>(x);
    }
    else if (key == "adam_beta1") run.train.adam_beta1 = number(v, key);
    else if (key == "adam_beta2") run.train.adam_beta2 = number(v, key);
    else if (key == "adam_eps") run.train.adam_eps = number(v, key);
    else if (key == "seed") {
      const long long x = integer(v, key);
      if (x < 0) throw Failure{kExitInput, key + ": must be non-negative"};
      run.train.seed = static_cast<std::uint64_t>(x);
    }
    else if (key == "holdout_fraction") {
      run.holdout_fraction = number(v, key);
      if (!(run.holdout_fraction > 0 && run.holdout_fraction < 1)) {
        throw Failure{kExitInput, key + ": must be in (0, 1)"};
      }
    }
    else if (key == "salt") {
      if (!v.is_string()) throw Failure{kExitInput, key + ": must be a string"};
      run.salt = v.get<std::string>();
    }
    else if (key == "max_tries") run.max_tries = positive_int(v, key);
    else throw Failure{kExitInput, key + ": unknown config field"};
  }
  m.vocab_size = kVocabSize;
  m.decay_rank = m.iclr_rank = m.value_rank = m.gate_rank = rank;
  try {
    run.train.validate();
  } catch (const std::invalid_argument& e) {
    throw Failure{kExitInput, e.what()};
  }
  return run;
}

int cmd_train_toy(const std::string& manifest_path, const std::string& config_path,
                  const std::string& out_dir, std::ostream& out) {
  const std::string manifest_text = read_text(manifest_path);
  const ToyRun run = parse_toy_config(read_text(config_path));

  std::vector<ManifestRecord> records;
  try {
    records = parse_manifest(manifest_text, fs::path(manifest_path).parent_path());
  } catch (const Error& e) {
    throw Failure{kExitContent, e.what()};
  }

  std::vector<CorpusEntry> entries;
  std::size_t unreadable = 0;
  for (const ManifestRecord& rec : records) {
    try {
      const MidiFile midi = read_midi(read_file_bytes(rec.midi_path));
      QuantizeResult q = quantize(to_note_events(midi), Ratio{midi.ticks_per_quarter, 4});
      entries.push_back({rec.id, rec.audio_score, std::move(q.score)});
    } catch (const Error& e) {
      out << "skipping " << rec.id << ": " << e.what() << '\n';
      ++unreadable;
    }
  }
  FilterReport report;
  const std::vector<CorpusEntry> kept = filter_corpus(entries, &report);
  const Split split = split_corpus(kept, run.holdout_fraction, run.salt);
  out << "corpus: " << records.size() << " listed, " << unreadable << " unreadable, "
      << report.below_threshold << " below audio_score 0.9, " << report.missing_score
      << " without audio_score, " << split.train.size() << " train, " << split.validation.size()
      << " validation\n";

  auto draw = [&](const std::vector<CorpusEntry>& pool, int epoch) {
    std::vector<TrainingWindow> windows;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      SampleRng rng(run.train.seed + stable_hash(std::to_string(epoch), pool[i].id));
      if (auto w = sample_window(pool[i], rng, run.max_tries)) windows.push_back(std::move(*w));
    }
    return windows;
  };
  const std::vector<TrainingWindow> first = draw(split.train, 0);
  if (first.empty()) throw Failure{kExitContent, "no training data"};
  const WindowStats stats = window_stats(first);
  out << "windows: " << stats.count << ", tokens min " << stats.min << ", median " << stats.median
      << ", p90 " << stats.p90 << ", max " << stats.max << '\n';

  TrainResult result = [&] {
    try {
      return train_toy([&](int epoch) { return epoch == 0 ? first : draw(split.train, epoch); },
                       run.train);
    } catch (const TrainingError& e) {
      throw Failure{kExitTraining, e.what()};
    }
  }();

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Failure{kExitInput, "cannot create " + out_dir + ": " + ec.message()};
  try {
    save_weights_file(fs::path(out_dir) / "model.rwkt", result.weights);
  } catch (const Error& e) {
    throw Failure{kExitInput, e.what()};
  }
  write_text(fs::path(out_dir) / "loss.tsv", format_loss_curve(result.curve));
  if (!result.curve.empty()) out << "final loss " << result.curve.back().loss << '\n';

  const std::vector<TrainingWindow> held_out = draw(split.validation, 0);
  if (!held_out.empty()) {
    std::vector<std::vector<TokenId>> batch;
    for (const TrainingWindow& w : held_out) {
      const std::size_t n = std::min(w.tokens.size(), static_cast<std::size_t>(run.train.seq_len));
      batch.emplace_back(w.tokens.begin(), w.tokens.begin() + static_cast<std::ptrdiff_t>(n));
    }
    const TensorLayout layout(run.train.model);
    const std::vector<double> params(result.weights.values().begin(), result.weights.values().end());
    out << "validation loss " << batch_loss(layout, params, batch) << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Piano continuation engine: tokenizer, recurrent model, sampler, toy trainer"};
  app.require_subcommand(1);

  ContinueArgs cont;
  auto* continue_cmd = app.add_subcommand("continue", "Generate 12-bar continuations of a prompt");
  continue_cmd->add_option("input", cont.input, "Interchange document with a prompt")->required();
  continue_cmd->add_option("output_dir", cont.output_dir, "Directory for sample_<i>.json")->required();
  continue_cmd->add_option("n_sample", cont.n_sample, "Number of samples")->required()->check(CLI::NonNegativeNumber);
  continue_cmd->add_option("--weights", cont.weights, "Weight container (default: $CONTIN_WEIGHTS)");
  continue_cmd->add_option("--seed", cont.seed, "Seed of sample 0; sample i uses seed + i");
  continue_cmd->add_option("--temperature", cont.temperature, "Sampling temperature");
  continue_cmd->add_option("--top-p", cont.top_p, "Nucleus mass");
  continue_cmd->add_option("--top-k", cont.top_k, "Top-k cutoff (0 disables)");
  continue_cmd->add_option("--rep-penalty", cont.rep_penalty, "Repetition penalty");
  continue_cmd->add_option("--max-tokens", cont.max_tokens, "Token cap per sample");

  std::string tok_in, tok_out;
  auto* tokenize_cmd = app.add_subcommand("tokenize", "Interchange document to token lines");
  tokenize_cmd->add_option("input", tok_in)->required();
  tokenize_cmd->add_option("output", tok_out)->required();

  std::string detok_in, detok_out;
  bool lenient = false;
  auto* detokenize_cmd = app.add_subcommand("detokenize", "Token lines to interchange document");
  detokenize_cmd->add_option("input", detok_in)->required();
  detokenize_cmd->add_option("output", detok_out)->required();
  detokenize_cmd->add_flag("--lenient", lenient, "Skip ungrammatical tokens instead of failing");

  std::string m2j_in, m2j_out, m2j_tps;
  auto* midi2json_cmd = app.add_subcommand("midi2json", "Quantize a MIDI file into a task document");
  midi2json_cmd->add_option("input", m2j_in)->required();
  midi2json_cmd->add_option("output", m2j_out)->required();
  midi2json_cmd->add_option("--tps", m2j_tps, "Ticks per sixteenth (default: division / 4)");

  std::string j2m_in, j2m_out;
  int j2m_tps = 120;
  auto* json2midi_cmd = app.add_subcommand("json2midi", "Write a task document as a Type 0 MIDI file");
  json2midi_cmd->add_option("input", j2m_in)->required();
  json2midi_cmd->add_option("output", j2m_out)->required();
  json2midi_cmd->add_option("--tps", j2m_tps, "Ticks per sixteenth");

  auto* vocab_cmd = app.add_subcommand("vocab", "Vocabulary utilities");
  vocab_cmd->require_subcommand(1);
  auto* vocab_dump_cmd = vocab_cmd->add_subcommand("dump", "Print the id to name table");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect-weights", "Print a weight container manifest");
  inspect_cmd->add_option("path", inspect_path)->required();

  InitArgs init;
  auto* init_cmd = app.add_subcommand("init-weights", "Write freshly initialized weights");
  init_cmd->add_option("output", init.output)->required();
  init_cmd->add_option("--layers", init.layers);
  init_cmd->add_option("--d-model", init.d_model);
  init_cmd->add_option("--d-ffn", init.d_ffn);
  init_cmd->add_option("--heads", init.heads);
  init_cmd->add_option("--rank", init.rank, "Low-rank generator rank (default: width heuristic)");
  init_cmd->add_option("--seed", init.seed);
  init_cmd->add_flag("--zero", init.zero, "All-zero weights");

  std::string manifest, config, train_out = ".";
  auto* train_cmd = app.add_subcommand("train-toy", "Train a small model on a MIDI manifest");
  train_cmd->add_option("manifest", manifest)->required();
  train_cmd->add_option("config", config, "JSON training configuration")->required();
  train_cmd->add_option("--out", train_out, "Directory for model.rwkt and loss.tsv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*continue_cmd) return cmd_continue(cont, out);
    if (*tokenize_cmd) return cmd_tokenize(tok_in, tok_out);
    if (*detokenize_cmd) return cmd_detokenize(detok_in, detok_out, lenient, out);
    if (*midi2json_cmd) return cmd_midi2json(m2j_in, m2j_out, m2j_tps, out);
    if (*json2midi_cmd) return cmd_json2midi(j2m_in, j2m_out, j2m_tps);
    if (*vocab_dump_cmd) return cmd_vocab_dump(out);
    if (*inspect_cmd) return cmd_inspect_weights(inspect_path, out);
    if (*init_cmd) return cmd_init_weights(init, out);
    if (*train_cmd) return cmd_train_toy(manifest, config, train_out, out);
  } catch (const Failure& f) {
    err << "error: " << f.message << '\n';
    return f.code;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitContent;
  }
  return kExitUsage;
}

}  // namespace contin
