#pragma once

// Logit post-processing, grammar-masked sampling, and the 12-bar
// continuation loop.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "contin/remi.hpp"
#include "contin/rwkv.hpp"
#include "contin/score.hpp"

namespace contin {

struct SamplerParams {
  double temperature = 1.0;
  double top_p = 0.95;
  std::optional<int> top_k = 40;
  double repetition_penalty = 1.0;
  int penalty_window = 64;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct GenerationBudget {
  int target_bars = kGenerationBars;
  int max_tokens = 2048;

  void validate() const;
};

/// Absolute slack when testing the cumulative nucleus mass against top_p.
inline constexpr double kTopPSlack = 1e-9;

/// Masks illegal ids, applies the repetition penalty over `recent`, divides by
/// the temperature, keeps the top_k largest, then the smallest top_p nucleus,
/// and renormalizes. Ties are broken by ascending id. Throws Error when no id
/// is legal.
std::vector<double> transform_logits(std::span<const float> logits, std::span<const TokenId> recent,
                                     const SamplerParams& params, const TokenMask& legal);

/// mt19937_64 with a portable mapping to [0, 1).
class SampleRng {
 public:
  explicit SampleRng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  std::uint64_t next() { return engine_(); }
  std::size_t index(std::size_t n);  // unbiased in [0, n)

 private:
  std::mt19937_64 engine_;
};

/// Inverse-CDF draw over ascending ids; zero-probability ids are never drawn.
TokenId sample_token(std::span<const double> probs, SampleRng& rng);

struct Continuation {
  Score score;
  std::vector<TokenId> tokens;  // sampled tokens, starting with the first generated BAR
  int bars = 0;
  bool truncated = false;  // max_tokens hit before the bar budget closed
};

/// Streams the 5-bar prompt through the model, forces a BAR, then samples
/// under the grammar until 12 bars are complete. Once a bar has used its share
/// of max_tokens, only tokens that finish the current note or close the bar
/// stay legal. Notes are decoded from step 80.
Continuation generate_continuation(const WeightSet& weights, const ContinuationTask& task,
                                   const SamplerParams& params,
                                   const GenerationBudget& budget = {});

}  // namespace contin
