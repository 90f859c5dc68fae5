// Acceptance criteria, one PASS/FAIL line each. Exit status is non-zero when
// any criterion fails or overruns its time limit.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "contin/remi.hpp"
#include "contin/rwkv.hpp"
#include "contin/sampler.hpp"
#include "contin/score.hpp"
#include "contin/trainer.hpp"
#include "fixtures.hpp"
#include "sampler_oracle.hpp"
#include "test_util.hpp"

namespace {

using namespace contin;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> body;
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

Outcome vocabulary() {
  const std::string cmd = std::string(CONTIN_CLI_PATH) + " vocab dump";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {false, "cannot run the CLI"};
  std::string text;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) text.append(buf, n);
  const int status = pclose(pipe);
  if (WEXITSTATUS(status) != 0) return {false, "vocab dump exited non-zero"};

  std::istringstream lines(text);
  int entries = 0, specials = 0, bars = 0, positions = 0, pitches = 0, durations = 0;
  for (std::string line; std::getline(lines, line); ++entries) {
    const std::string name = line.substr(line.find('\t') + 1);
    if (line.substr(0, line.find('\t')) != std::to_string(entries)) return {false, "ids not consecutive"};
    if (name == "PAD" || name == "BOS" || name == "EOS") ++specials;
    else if (name == "Bar") ++bars;
    else if (name.rfind("Position_", 0) == 0) ++positions;
    else if (name.rfind("Pitch_", 0) == 0) ++pitches;
    else if (name.rfind("Duration_", 0) == 0) ++durations;
  }
  std::ostringstream d;
  d << entries << " entries = " << specials << " specials + " << bars << " bar + " << positions
    << " positions + " << pitches << " pitches + " << durations << " durations";
  return {entries == 228 && specials == 3 && bars == 1 && positions == 16 && pitches == 128 &&
              durations == 80,
          d.str()};
}

Outcome tokenizer_round_trip() {
  std::mt19937_64 rng(2025);
  int failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const int bars = 1 + static_cast<int>(rng() % 17);
    const Score s = testing::random_score(rng, bars, 100);
    if (decode(encode(s, bars), 0).score != s) ++failures;
  }
  return {failures == 0, std::to_string(1000 - failures) + "/1000 scores reproduced exactly"};
}

Outcome interchange_round_trip() {
  std::mt19937_64 rng(2026);
  int failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const ContinuationTask t = testing::random_task(rng);
    const std::string text = emit_task(t);
    const ContinuationTask back = parse_task(text);
    if (!(back == t) || emit_task(back) != text) ++failures;
  }
  return {failures == 0, std::to_string(1000 - failures) + "/1000 documents byte-stable"};
}

Outcome streaming_equivalence() {
  std::mt19937_64 rng(2027);
  double worst = 0;
  for (int m = 0; m < 50; ++m) {
    const WeightSet w = testing::random_weights(testing::micro_config(2, 16, 32, kVocabSize, 2, 4),
                                                1000 + static_cast<std::uint64_t>(m), 0.5f);
    const auto tokens = testing::random_tokens(rng, 256, kVocabSize);
    const auto full = forward_full(w, tokens);
    DecoderState state = init_state(w.config());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const Logits step = forward_step(w, state, tokens[t]);
      for (std::size_t i = 0; i < step.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(step[i]) - full[t][i]));
    }
  }
  return {worst <= 1e-4, "max |streaming - full| = " + fmt("%.3g", worst) + " (limit 1e-4)"};
}

Outcome causality() {
  std::mt19937_64 rng(2028);
  int violations = 0;
  for (int c = 0; c < 100; ++c) {
    const WeightSet w = testing::random_weights(testing::micro_config(), 2000 + static_cast<std::uint64_t>(c), 0.5f);
    auto tokens = testing::random_tokens(rng, 40, kVocabSize);
    const std::size_t t = rng() % (tokens.size() - 1);
    const auto before = forward_full(w, tokens);
    tokens[t + 1] = (tokens[t + 1] + 1 + static_cast<TokenId>(rng() % 227)) % kVocabSize;
    const auto after = forward_full(w, tokens);
    for (std::size_t p = 0; p <= t; ++p)
      if (before[p] != after[p]) ++violations;
  }
  return {violations == 0, std::to_string(violations) + " positions changed across 100 perturbations"};
}

Outcome parameter_count() {
  const std::size_t n = param_count(ModelConfig::standard());
  return {n >= 17'000'000 && n <= 23'000'000, "12 x 384 / 1536 / 228 / 6 heads: " + std::to_string(n)};
}

Outcome sampler_oracles() {
  std::mt19937_64 rng(2029);
  std::normal_distribution<float> n(0, 2.5);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  TokenMask all;
  all.set();
  int mismatches = 0, penalty_changes = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<float> logits(228);
    for (float& v : logits) v = n(rng);
    if (trial % 10 == 0)
      for (std::size_t i = 0; i < 228; i += 4) logits[i] = logits[1];

    SamplerParams k_only;
    k_only.top_p = 1.0;
    k_only.top_k = 1 + static_cast<int>(rng() % 228);
    SamplerParams p_only;
    p_only.top_k.reset();
    p_only.top_p = u(rng);
    SamplerParams both;
    both.top_k = 1 + static_cast<int>(rng() % 100);
    both.temperature = 0.25 + u(rng) * 2;
    for (const SamplerParams& p : {k_only, p_only, both}) {
      if (testing::support(transform_logits(logits, {}, p, all)) !=
          testing::brute_force_support(logits, p.temperature, p.top_k, p.top_p)) {
        ++mismatches;
      }
    }
    if (trial % 10 == 0) {
      const auto recent = testing::random_tokens(rng, 64, kVocabSize);
      SamplerParams unit;
      if (transform_logits(logits, recent, unit, all) != transform_logits(logits, {}, unit, all)) ++penalty_changes;
    }
  }
  return {mismatches == 0 && penalty_changes == 0,
          std::to_string(mismatches) + " support mismatches in 30000 comparisons; penalty 1.0 changed " +
              std::to_string(penalty_changes) + "/1000 outputs"};
}

Outcome generation_validity() {
  const ContinuationTask task = testing::fixture_task();
  int invalid = 0;
  std::size_t total_tokens = 0;
  for (int run = 0; run < 1000; ++run) {
    const WeightSet w = testing::random_weights(testing::micro_config(), 3000 + static_cast<std::uint64_t>(run), 0.5f);
    SamplerParams p;
    p.seed = static_cast<std::uint64_t>(run);
    const Continuation c = generate_continuation(w, task, p);
    total_tokens += c.tokens.size();
    bool ok = !c.truncated && c.bars == 12;
    try {
      const DecodeResult d = decode(c.tokens, kGenerationFirstStep, DecodeMode::kStrict);
      ok = ok && d.bars == 12 && d.score == c.score;
    } catch (const Error&) {
      ok = false;
    }
    for (const Note& note : c.score) ok = ok && note.start >= 80 && note.start <= 271;
    if (!ok) ++invalid;
  }
  return {invalid == 0, std::to_string(1000 - invalid) + "/1000 valid 12-bar continuations, mean " +
                            fmt("%.0f", static_cast<double>(total_tokens) / 1000) + " tokens"};
}

Outcome gradient_check() {
  const TensorLayout layout(ModelConfig::micro(2, 8, 16, 12, 2, 4));
  std::mt19937_64 rng(2030);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<double> params(layout.total());
  for (double& v : params) v = u(rng);
  const std::vector<std::vector<TokenId>> batch{{1, 3, 4, 9, 11, 5, 5, 7, 3, 6, 10, 2, 8, 4, 9, 1},
                                                {3, 11, 6, 6, 2, 9, 4, 1, 7}};
  const LossAndGrad lg = loss_and_grad(layout, params, batch);
  const double h = 1e-5;
  double worst = 0;
  std::size_t worst_at = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = batch_loss(layout, params, batch);
    params[i] = saved - h;
    const double down = batch_loss(layout, params, batch);
    params[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(numeric - lg.grad[i]) / std::max({std::abs(numeric), std::abs(lg.grad[i]), 1e-6});
    if (rel > worst) {
      worst = rel;
      worst_at = i;
    }
  }
  std::string where;
  for (const TensorSpec& t : layout.tensors())
    if (worst_at >= t.offset && worst_at < t.offset + t.size) where = t.name;
  return {worst <= 1e-3, std::to_string(params.size()) + " coordinates, worst relative error " +
                             fmt("%.2e", worst) + " in " + where};
}

Outcome memorization() {
  TrainConfig cfg;
  cfg.model = ModelConfig::micro(2, 64, 256, kVocabSize, 2, 16);
  cfg.lr_max = 3e-3;
  cfg.lr_min = 3e-4;
  cfg.weight_decay = 0.1;
  cfg.batch_size = 1;
  cfg.seq_len = 300;
  cfg.total_steps = 500;
  cfg.seed = 1;
  TrainingWindow window;
  window.tokens = encode(testing::memorization_piece(), 16);
  window.tokens.resize(300);
  const TrainResult r = train_toy(std::vector<TrainingWindow>{window}, cfg);

  std::vector<double> means;
  for (std::size_t b = 0; b < 5; ++b) {
    double s = 0;
    for (std::size_t i = 0; i < 100; ++i) s += r.curve[b * 100 + i].loss;
    means.push_back(s / 100);
  }
  bool decreasing = true;
  for (std::size_t b = 1; b < means.size(); ++b) decreasing = decreasing && means[b] < means[b - 1];
  const double first = r.curve.front().loss, last = r.curve.back().loss;
  std::ostringstream d;
  d << "step 0 loss " << fmt("%.4f", first) << " (ln 228 = " << fmt("%.4f", std::log(228.0))
    << "), step 499 loss " << fmt("%.4f", last) << ", 100-step means";
  for (double m : means) d << " " << fmt("%.4f", m);
  return {last < 0.1 && decreasing && std::abs(first - std::log(228.0)) < 0.05, d.str()};
}

Outcome schedule_endpoints() {
  const TrainConfig cfg;
  const double a = lr_at(0, 1000, cfg), b = lr_at(1000, 1000, cfg);
  return {a == 1e-4 && b == 1e-5, "lr_at(0) = " + fmt("%.17g", a) + ", lr_at(T) = " + fmt("%.17g", b)};
}

Outcome end_to_end_determinism() {
  testing::TempDir dir("accept");
  save_weights_file(dir / "w.rwkt", testing::random_weights(testing::micro_config(), 7));
  {
    std::ofstream(dir / "in.json") << emit_task(testing::fixture_task());
  }
  setenv("CONTIN_WEIGHTS", (dir / "w.rwkt").c_str(), 1);
  auto invoke = [&](const std::string& out) {
    const std::string cmd = std::string(CONTIN_CLI_PATH) + " continue " + (dir / "in.json").string() + " " +
                            (dir / out).string() + " 3 --seed 7 > /dev/null";
    return WEXITSTATUS(std::system(cmd.c_str()));
  };
  const int a = invoke("out_a"), b = invoke("out_b");
  unsetenv("CONTIN_WEIGHTS");
  if (a != 0 || b != 0) return {false, "CLI exit codes " + std::to_string(a) + ", " + std::to_string(b)};

  auto listing = [&](const std::string& out) {
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;
    for (const auto& e : fs::directory_iterator(dir / out))
      files.emplace_back(e.path().filename().string(), read_file_bytes(e.path()));
    std::sort(files.begin(), files.end());
    return files;
  };
  const auto la = listing("out_a"), lb = listing("out_b");
  return {la.size() == 3 && la == lb, std::to_string(la.size()) + " files per run, directories " +
                                          (la == lb ? "byte-identical" : "differ")};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "vocabulary", 1, vocabulary},
      {2, "tokenizer round trip", 10, tokenizer_round_trip},
      {3, "interchange round trip", 10, interchange_round_trip},
      {4, "streaming equivalence", 60, streaming_equivalence},
      {5, "causality", 30, causality},
      {6, "parameter count", 1, parameter_count},
      {7, "sampler oracles", 30, sampler_oracles},
      {8, "generation validity", 300, generation_validity},
      {9, "gradient check", 300, gradient_check},
      {10, "memorization", 900, memorization},
      {11, "schedule endpoints", 1, schedule_endpoints},
      {12, "end-to-end determinism", 60, end_to_end_determinism},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.limit_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("[%s] %2d %-24s %s (%.2f s, limit %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.limit_seconds, in_time ? "" : ", over time");
    std::fflush(stdout);
  }
  std::printf("%zu criteria, %d failed\n", criteria.size(), failed);
  return failed == 0 ? 0 : 1;
}
