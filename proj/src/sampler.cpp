#include "contin/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "contin/error.hpp"

namespace contin {

void SamplerParams::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("temperature must be positive");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
  if (top_k && *top_k < 1) throw std::invalid_argument("top_k must be at least 1");
  if (!(repetition_penalty >= 1.0) || !std::isfinite(repetition_penalty)) {
    throw std::invalid_argument("repetition_penalty must be >= 1");
  }
  if (penalty_window < 0) throw std::invalid_argument("penalty_window must be non-negative");
}

void GenerationBudget::validate() const {
  if (target_bars < 1) throw std::invalid_argument("target_bars must be at least 1");
  if (max_tokens < target_bars) throw std::invalid_argument("max_tokens must be >= target_bars");
}

std::vector<double> transform_logits(std::span<const float> logits, std::span<const TokenId> recent,
                                     const SamplerParams& params, const TokenMask& legal) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  const std::size_t V = logits.size();
  std::vector<double> z(V, kNegInf);
  std::size_t n_legal = 0;
  for (std::size_t i = 0; i < V && i < legal.size(); ++i) {
    if (legal.test(i)) {
      z[i] = logits[i];
      ++n_legal;
    }
  }
  if (n_legal == 0) throw Error("grammar dead end: no legal token");

  if (params.repetition_penalty != 1.0) {
    std::vector<bool> seen(V, false);
    for (TokenId t : recent) {
      const auto i = static_cast<std::size_t>(t);
      if (i >= V || seen[i] || z[i] == kNegInf) continue;
      seen[i] = true;
      z[i] = z[i] > 0 ? z[i] / params.repetition_penalty : z[i] * params.repetition_penalty;
    }
  }

  for (double& v : z) v /= params.temperature;

  // Descending value, ascending id on ties.
  std::vector<std::size_t> order;
  order.reserve(n_legal);
  for (std::size_t i = 0; i < V; ++i) {
    if (z[i] != kNegInf) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });

  std::size_t keep = order.size();
  if (params.top_k) keep = std::min(keep, static_cast<std::size_t>(*params.top_k));

  const double top = z[order[0]];
  std::vector<double> mass(keep);
  double total = 0;
  for (std::size_t r = 0; r < keep; ++r) {
    mass[r] = std::exp(z[order[r]] - top);
    total += mass[r];
  }
  double cumulative = 0;
  std::size_t nucleus = keep;
  for (std::size_t r = 0; r < keep; ++r) {
    cumulative += mass[r] / total;
    if (cumulative + kTopPSlack >= params.top_p) {
      nucleus = r + 1;
      break;
    }
  }

  double kept_total = 0;
  for (std::size_t r = 0; r < nucleus; ++r) kept_total += mass[r];
  std::vector<double> probs(V, 0.0);
  for (std::size_t r = 0; r < nucleus; ++r) probs[order[r]] = mass[r] / kept_total;
  return probs;
}

std::size_t SampleRng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("empty range");
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t draw;
  do {
    draw = engine_();
  } while (draw >= limit);
  return static_cast<std::size_t>(draw % bound);
}

TokenId sample_token(std::span<const double> probs, SampleRng& rng) {
  const double u = rng.uniform();
  double cumulative = 0;
  std::ptrdiff_t last_positive = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    last_positive = static_cast<std::ptrdiff_t>(i);
    cumulative += probs[i];
    if (u < cumulative) return static_cast<TokenId>(i);
  }
  if (last_positive < 0) throw Error("cannot sample from an all-zero distribution");
  return static_cast<TokenId>(last_positive);  // rounding left u above the total
}

namespace {

// Restriction applied once a bar has used its token share: finish the current
// note, then close the bar.
TokenMask closing_mask(const TokenMask& legal) {
  if (legal.test(kBar)) {
    TokenMask only_bar;
    only_bar.set(kBar);
    return only_bar;
  }
  return legal;  // after POSITION or PITCH the note has to be completed first
}

}  // namespace

Continuation generate_continuation(const WeightSet& weights, const ContinuationTask& task,
                                   const SamplerParams& params, const GenerationBudget& budget) {
  params.validate();
  budget.validate();
  validate_task(task);
  if (weights.config().vocab_size != kVocabSize) {
    throw WeightError("model vocabulary is " + std::to_string(weights.config().vocab_size) +
                      ", the tokenizer needs " + std::to_string(kVocabSize));
  }

  std::vector<TokenId> context = encode(task.prompt, kPromptBars);
  DecoderState state = init_state(weights.config());
  Logits logits;
  for (TokenId t : context) logits = forward_step(weights, state, t);

  SampleRng rng(params.seed);
  Continuation result;
  GrammarState grammar;
  const int bar_share = budget.max_tokens / budget.target_bars;
  const int close_after = std::max(1, bar_share - 2);
  int tokens_in_bar = 0;

  while (static_cast<int>(result.tokens.size()) < budget.max_tokens) {
    TokenMask legal = legal_next(grammar);
    if (grammar.bars_emitted > 0 && tokens_in_bar >= close_after) {
      legal = closing_mask(legal);
    }
    const std::size_t window = std::min(context.size(), static_cast<std::size_t>(params.penalty_window));
    const std::span<const TokenId> recent(context.data() + context.size() - window, window);
    const std::vector<double> probs = transform_logits(logits, recent, params, legal);
    const TokenId next = sample_token(probs, rng);

    if (next == kBar && grammar.bars_emitted == budget.target_bars) break;  // bar budget spent
    grammar = advance(grammar, next);
    tokens_in_bar = next == kBar ? 1 : tokens_in_bar + 1;
    result.tokens.push_back(next);
    context.push_back(next);
    logits = forward_step(weights, state, next);
  }
  if (static_cast<int>(result.tokens.size()) >= budget.max_tokens &&
      !(grammar.bars_emitted == budget.target_bars && at_note_boundary(grammar))) {
    result.truncated = true;
  }

  // Drop a half-written trailing note before decoding.
  std::vector<TokenId> complete = result.tokens;
  while (!complete.empty() && token_kind(complete.back()) != TokenKind::kDuration &&
         token_kind(complete.back()) != TokenKind::kBar) {
    complete.pop_back();
  }
  DecodeResult decoded = decode(complete, kGenerationFirstStep, DecodeMode::kStrict);
  result.bars = decoded.bars;
  result.score = slice(decoded.score, kGenerationFirstStep, kGenerationLastStep + 1);
  return result;
}

}  // namespace contin
