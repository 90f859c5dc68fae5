#pragma once

// Desk-scale training: cross-entropy, exact reverse-mode gradients through the
// recurrent model, Adam with decoupled weight decay, cosine learning rate.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "contin/corpus.hpp"
#include "contin/error.hpp"
#include "contin/remi.hpp"
#include "contin/rwkv.hpp"

namespace contin {

struct TrainConfig {
  ModelConfig model = ModelConfig::micro(2, 64, 256, kVocabSize, 2, 16);
  double lr_max = 1e-4;
  double lr_min = 1e-5;
  double weight_decay = 0.1;
  int batch_size = 4;
  int seq_len = 256;
  int total_steps = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument whose message starts with the field name.
  void validate() const;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& message, int step)
      : Error(message + " at step " + std::to_string(step)), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// Mean of -log softmax(logits[t])[targets[t]] over positions whose target is
/// not PAD. Throws Error when every target is PAD.
double cross_entropy(const std::vector<std::vector<double>>& logits,
                     std::span<const TokenId> targets);
double cross_entropy(const std::vector<Logits>& logits, std::span<const TokenId> targets);

/// lr_max at step 0 falling to lr_min at total_steps along a half cosine.
double lr_at(int step, int total_steps, const TrainConfig& cfg);

struct OptimState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam; parameters are first scaled by (1 - lr * weight_decay).
/// Throws TrainingError on a non-finite gradient.
void adam_step(std::span<double> params, std::span<const double> grads, OptimState& opt,
               double lr, const TrainConfig& cfg);

/// Scaled-uniform projections, N(0, 0.02^2) embedding, unit norms, zero
/// generator biases.
std::vector<double> init_params(const TensorLayout& layout, std::uint64_t seed);

struct LossAndGrad {
  double loss = 0;
  std::size_t targets = 0;
  std::vector<double> grad;  // same layout as the parameters
};

/// Mean next-token cross-entropy over a batch of token sequences (each input
/// is seq[0..n-2], target seq[1..n-1]; PAD targets are skipped) and its exact
/// gradient.
LossAndGrad loss_and_grad(const TensorLayout& layout, std::span<const double> params,
                          const std::vector<std::vector<TokenId>>& batch);

/// Same loss, forward only.
double batch_loss(const TensorLayout& layout, std::span<const double> params,
                  const std::vector<std::vector<TokenId>>& batch);

/// Logits of the training forward pass for one sequence (test hook).
std::vector<std::vector<double>> training_logits(const TensorLayout& layout,
                                                 std::span<const double> params,
                                                 std::span<const TokenId> tokens);

struct LossPoint {
  int step = 0;
  double lr = 0;
  double loss = 0;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);
  Trainer(const TrainConfig& cfg, std::vector<double> params);

  /// One optimizer step on `batch` at the scheduled learning rate. The
  /// reported loss is measured before the update.
  LossPoint step(const std::vector<std::vector<TokenId>>& batch);

  int steps_done() const { return steps_done_; }
  const TensorLayout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  WeightSet export_weights() const;

 private:
  TrainConfig cfg_;
  TensorLayout layout_;
  std::vector<double> params_;
  OptimState opt_;
  int steps_done_ = 0;
};

struct TrainResult {
  WeightSet weights;
  std::vector<LossPoint> curve;
};

/// Supplies the windows of one epoch; called again whenever an epoch runs out.
using WindowSource = std::function<std::vector<TrainingWindow>(int epoch)>;

/// Runs cfg.total_steps steps. Each epoch's windows are shuffled with the
/// configured seed and consumed batch_size at a time, truncated to seq_len
/// tokens. Throws TrainingError if the loss becomes non-finite.
TrainResult train_toy(const WindowSource& source, const TrainConfig& cfg);
TrainResult train_toy(const std::vector<TrainingWindow>& corpus, const TrainConfig& cfg);

/// "step<TAB>lr<TAB>loss" lines.
std::string format_loss_curve(const std::vector<LossPoint>& curve);

}  // namespace contin
