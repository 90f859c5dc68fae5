#include "contin/trainer.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "contin/sampler.hpp"

namespace contin {

namespace {

void require(bool ok, const char* field, const char* rule) {
  if (!ok) throw std::invalid_argument(std::string(field) + ": " + rule);
}

template <class Row>
double cross_entropy_impl(const std::vector<Row>& logits, std::span<const TokenId> targets) {
  if (logits.size() != targets.size()) throw std::invalid_argument("logits/targets length mismatch");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == kPad) continue;
    const Row& row = logits[t];
    const auto target = static_cast<std::size_t>(targets[t]);
    if (target >= row.size()) throw std::out_of_range("target id outside logits");
    double top = row[0];
    for (double v : row) top = std::max(top, v);
    double sum = 0;
    for (double v : row) sum += std::exp(v - top);
    total += top + std::log(sum) - static_cast<double>(row[target]);
    ++count;
  }
  if (count == 0) throw Error("cross-entropy over an all-PAD target sequence");
  return total / static_cast<double>(count);
}

// Box-Muller on the portable uniform stream.
double normal(SampleRng& rng) {
  double u1 = rng.uniform();
  while (u1 <= 0.0) u1 = rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

void TrainConfig::validate() const {
  try {
    model.validate();
  } catch (const Error& e) {
    throw std::invalid_argument(std::string("model: ") + e.what());
  }
  require(lr_min > 0, "lr_min", "must be positive");
  require(lr_max >= lr_min, "lr_max", "must be >= lr_min");
  require(weight_decay >= 0, "weight_decay", "must be non-negative");
  require(batch_size > 0, "batch_size", "must be positive");
  require(seq_len > 1, "seq_len", "must be at least 2");
  require(total_steps >= 0, "total_steps", "must be non-negative");
  require(adam_beta1 > 0 && adam_beta1 < 1, "adam_beta1", "must be in (0, 1)");
  require(adam_beta2 > 0 && adam_beta2 < 1, "adam_beta2", "must be in (0, 1)");
  require(adam_eps > 0, "adam_eps", "must be positive");
}

double cross_entropy(const std::vector<std::vector<double>>& logits,
                     std::span<const TokenId> targets) {
  return cross_entropy_impl(logits, targets);
}

double cross_entropy(const std::vector<Logits>& logits, std::span<const TokenId> targets) {
  return cross_entropy_impl(logits, targets);
}

double lr_at(int step, int total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0) return cfg.lr_max;
  if (step < 0 || step > total_steps) throw std::out_of_range("step outside [0, total_steps]");
  const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * step / total_steps));
  // Weighted form keeps both endpoints exact: c is exactly 1 and 0 there.
  return cfg.lr_max * c + cfg.lr_min * (1.0 - c);
}

void adam_step(std::span<double> params, std::span<const double> grads, OptimState& opt,
               double lr, const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
  if (opt.m.empty()) {
    opt.m.assign(params.size(), 0.0);
    opt.v.assign(params.size(), 0.0);
  }
  if (opt.m.size() != params.size()) throw std::invalid_argument("optimizer state size mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw TrainingError("non-finite gradient at parameter " + std::to_string(i),
                          static_cast<int>(opt.step));
    }
  }
  ++opt.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g;
    opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g;
    const double m_hat = opt.m[i] / c1;
    const double v_hat = opt.v[i] / c2;
    params[i] = params[i] * decay - lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
  }
}

std::vector<double> init_params(const TensorLayout& layout, std::uint64_t seed) {
  const ModelConfig& cfg = layout.config();
  std::vector<double> p(layout.total(), 0.0);
  SampleRng rng(seed);
  const double gain = 0.1 / std::sqrt(static_cast<double>(cfg.d_model));
  auto fill_uniform = [&](std::size_t offset, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[offset + i] = gain * (2.0 * rng.uniform() - 1.0);
  };
  auto fill_const = [&](std::size_t offset, std::size_t n, double v) {
    std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(offset), n, v);
  };
  for (const TensorSpec& spec : layout.tensors()) {
    const std::string& name = spec.name;
    const bool matrix = spec.shape.size() == 2 && name.find("r_k") == std::string::npos;
    if (name == "emb.weight") {
      for (std::size_t i = 0; i < spec.size; ++i) p[spec.offset + i] = 0.02 * normal(rng);
    } else if (matrix) {
      fill_uniform(spec.offset, spec.size);
    } else if (name.ends_with("ln0.weight") || name.ends_with("ln1.weight") ||
               name.ends_with("ln2.weight") || name.ends_with("ln_x.weight") ||
               name == "ln_out.weight" || name.ends_with("att.k_k") ||
               name.ends_with("att.k_a")) {
      fill_const(spec.offset, spec.size, 1.0);
    } else if (name.ends_with(".x_r") || name.ends_with(".x_w") || name.ends_with(".x_k") ||
               name.ends_with(".x_v") || name.ends_with(".x_a") || name.ends_with(".x_g")) {
      fill_const(spec.offset, spec.size, 0.5);
    }
    // Biases, w0/a0/v0, and r_k stay zero.
  }
  return p;
}

Trainer::Trainer(const TrainConfig& cfg)
    : Trainer(cfg, init_params(TensorLayout(cfg.model), cfg.seed)) {}

Trainer::Trainer(const TrainConfig& cfg, std::vector<double> params)
    : cfg_(cfg), layout_(cfg.model), params_(std::move(params)) {
  cfg_.validate();
  if (params_.size() != layout_.total()) throw std::invalid_argument("parameter size mismatch");
}

LossPoint Trainer::step(const std::vector<std::vector<TokenId>>& batch) {
  const int step = steps_done_;
  const double lr = lr_at(std::min(step, cfg_.total_steps), cfg_.total_steps, cfg_);
  LossAndGrad lg = loss_and_grad(layout_, params_, batch);
  if (!std::isfinite(lg.loss)) throw TrainingError("loss diverged (non-finite)", step);
  adam_step(params_, lg.grad, opt_, lr, cfg_);
  ++steps_done_;
  return {step, lr, lg.loss};
}

WeightSet Trainer::export_weights() const {
  std::vector<float> values(params_.begin(), params_.end());
  return WeightSet(cfg_.model, std::move(values));
}

TrainResult train_toy(const WindowSource& source, const TrainConfig& cfg) {
  cfg.validate();
  Trainer trainer(cfg);
  SampleRng shuffle_rng(cfg.seed ^ 0x5DEECE66Dull);
  std::vector<LossPoint> curve;
  curve.reserve(static_cast<std::size_t>(cfg.total_steps));

  int epoch = 0;
  std::vector<TrainingWindow> windows;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_window = [&]() -> const TrainingWindow& {
    if (cursor == order.size()) {
      windows = source(epoch++);
      if (windows.empty()) throw Error("no training data");
      order.resize(windows.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);
      cursor = 0;
    }
    return windows[order[cursor++]];
  };

  for (int s = 0; s < cfg.total_steps; ++s) {
    std::vector<std::vector<TokenId>> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const TrainingWindow& w = next_window();
      const std::size_t n = std::min(w.tokens.size(), static_cast<std::size_t>(cfg.seq_len));
      batch.emplace_back(w.tokens.begin(), w.tokens.begin() + static_cast<std::ptrdiff_t>(n));
    }
    curve.push_back(trainer.step(batch));
  }
  return {trainer.export_weights(), std::move(curve)};
}

TrainResult train_toy(const std::vector<TrainingWindow>& corpus, const TrainConfig& cfg) {
  if (corpus.empty()) throw Error("no training data");
  return train_toy([&corpus](int) { return corpus; }, cfg);
}

std::string format_loss_curve(const std::vector<LossPoint>& curve) {
  std::ostringstream out;
  out.precision(17);
  for (const LossPoint& p : curve) out << p.step << '\t' << p.lr << '\t' << p.loss << '\n';
  return out.str();
}

}  // namespace contin
