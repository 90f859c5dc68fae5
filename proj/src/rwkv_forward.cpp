#include <algorithm>
#include <stdexcept>
#include <string>

#include "contin/error.hpp"
#include "contin/rwkv.hpp"
#include "detail/kernels.hpp"

namespace contin {

namespace {

using namespace detail;

template <class T>
struct Workspace {
  explicit Workspace(const ModelConfig& c)
      : h(c.d_model), xr(c.d_model), xw(c.d_model), xk(c.d_model), xv(c.d_model),
        xa(c.d_model), xg(c.d_model), r(c.d_model), k(c.d_model), v(c.d_model), w(c.d_model),
        a(c.d_model), g(c.d_model), kk(c.d_model), y(c.d_model), out(c.d_model),
        low(std::max({c.decay_rank, c.iclr_rank, c.value_rank, c.gate_rank})),
        hidden(c.d_ffn) {}

  std::vector<T> h, xr, xw, xk, xv, xa, xg, r, k, v, w, a, g, kk, y, out, low, hidden;
};

void check_token(TokenId token, int vocab) {
  if (token < 0 || token >= vocab) {
    throw std::out_of_range("token id " + std::to_string(token) + " outside vocabulary of " +
                            std::to_string(vocab));
  }
}

// One block on one position. `x` is the residual stream, updated in place.
// The shift vectors hold the previous position's normalized inputs; `wkv` is
// the block's [H, N, N] matrix state; `v_first` is block 0's value at this
// position (written by block 0, read by the others).
template <class T>
void block_step(const ModelConfig& cfg, const LayerSlots& L, const T* p, T* x, T* att_shift,
                T* ffn_shift, T* wkv, T* v_first, Workspace<T>& ws) {
  const int C = cfg.d_model, H = cfg.n_heads, N = cfg.head_dim(), F = cfg.d_ffn;
  const T ln_eps = T(kLayerNormEps);

  // Time mix.
  layer_norm(x, p + L.ln1_w, p + L.ln1_b, ws.h.data(), C, ln_eps);
  for (int i = 0; i < C; ++i) {
    const T hi = ws.h[i];
    const T d = att_shift[i] - hi;
    ws.xr[i] = hi + d * p[L.x_r + i];
    ws.xw[i] = hi + d * p[L.x_w + i];
    ws.xk[i] = hi + d * p[L.x_k + i];
    ws.xv[i] = hi + d * p[L.x_v + i];
    ws.xa[i] = hi + d * p[L.x_a + i];
    ws.xg[i] = hi + d * p[L.x_g + i];
    att_shift[i] = hi;
  }
  linear(p + L.receptance, ws.xr.data(), ws.r.data(), C, C);
  linear(p + L.key, ws.xk.data(), ws.k.data(), C, C);
  linear(p + L.value, ws.xv.data(), ws.v.data(), C, C);

  lowrank(ws.xw.data(), p + L.w1, ws.low.data(), C, cfg.decay_rank);
  for (int j = 0; j < cfg.decay_rank; ++j) ws.low[j] = std::tanh(ws.low[j]);
  lowrank(ws.low.data(), p + L.w2, ws.w.data(), cfg.decay_rank, C);
  for (int i = 0; i < C; ++i) {
    ws.w[i] = std::exp(-T(kDecayScale) * sigmoid(p[L.w0 + i] + ws.w[i]));
  }

  lowrank(ws.xa.data(), p + L.a1, ws.low.data(), C, cfg.iclr_rank);
  lowrank(ws.low.data(), p + L.a2, ws.a.data(), cfg.iclr_rank, C);
  for (int i = 0; i < C; ++i) ws.a[i] = sigmoid(p[L.a0 + i] + ws.a[i]);

  lowrank(ws.xg.data(), p + L.g1, ws.low.data(), C, cfg.gate_rank);
  for (int j = 0; j < cfg.gate_rank; ++j) ws.low[j] = sigmoid(ws.low[j]);
  lowrank(ws.low.data(), p + L.g2, ws.g.data(), cfg.gate_rank, C);

  for (int h = 0; h < H; ++h) {
    T norm = 0;
    for (int j = 0; j < N; ++j) {
      const int i = h * N + j;
      ws.kk[i] = ws.k[i] * p[L.k_k + i];
      norm += ws.kk[i] * ws.kk[i];
    }
    norm = std::max(std::sqrt(norm), T(kNormalizeEps));
    for (int j = 0; j < N; ++j) ws.kk[h * N + j] /= norm;
  }
  for (int i = 0; i < C; ++i) ws.k[i] *= T(1) + (ws.a[i] - T(1)) * p[L.k_a + i];

  if (!L.has_value_mix) {
    std::copy(ws.v.begin(), ws.v.end(), v_first);
  } else {
    lowrank(ws.xv.data(), p + L.v1, ws.low.data(), C, cfg.value_rank);
    lowrank(ws.low.data(), p + L.v2, ws.out.data(), cfg.value_rank, C);
    for (int i = 0; i < C; ++i) {
      const T nu = sigmoid(p[L.v0 + i] + ws.out[i]);
      ws.v[i] += (v_first[i] - ws.v[i]) * nu;
    }
  }

  // Per-head state: S <- S diag(w) - (S kk)(kk * a)^T + v k^T, readout S r.
  for (int h = 0; h < H; ++h) {
    T* S = wkv + static_cast<std::size_t>(h) * N * N;
    const int o = h * N;
    for (int i = 0; i < N; ++i) {
      T* row = S + static_cast<std::size_t>(i) * N;
      T sa = 0;
      for (int j = 0; j < N; ++j) sa -= row[j] * ws.kk[o + j];
      const T vi = ws.v[o + i];
      T acc = 0;
      for (int j = 0; j < N; ++j) {
        row[j] = row[j] * ws.w[o + j] + sa * ws.kk[o + j] * ws.a[o + j] + vi * ws.k[o + j];
        acc += row[j] * ws.r[o + j];
      }
      ws.y[o + i] = acc;
    }
  }

  for (int h = 0; h < H; ++h) {
    const int o = h * N;
    layer_norm(ws.y.data() + o, p + L.ln_x_w + o, p + L.ln_x_b + o, ws.out.data() + o, N,
               T(kGroupNormEps));
    T bonus = 0;
    for (int j = 0; j < N; ++j) bonus += ws.r[o + j] * ws.k[o + j] * p[L.r_k + o + j];
    for (int i = 0; i < N; ++i) ws.out[o + i] += bonus * ws.v[o + i];
  }
  for (int i = 0; i < C; ++i) ws.out[i] *= ws.g[i];
  linear(p + L.output, ws.out.data(), ws.y.data(), C, C);
  for (int i = 0; i < C; ++i) x[i] += ws.y[i];

  // Channel mix.
  layer_norm(x, p + L.ln2_w, p + L.ln2_b, ws.h.data(), C, ln_eps);
  for (int i = 0; i < C; ++i) {
    const T hi = ws.h[i];
    ws.xk[i] = hi + (ffn_shift[i] - hi) * p[L.ffn_x_k + i];
    ffn_shift[i] = hi;
  }
  linear(p + L.ffn_key, ws.xk.data(), ws.hidden.data(), F, C);
  for (int j = 0; j < F; ++j) {
    const T z = std::max(ws.hidden[j], T(0));
    ws.hidden[j] = z * z;
  }
  linear(p + L.ffn_value, ws.hidden.data(), ws.y.data(), C, F);
  for (int i = 0; i < C; ++i) x[i] += ws.y[i];
}

template <class T>
void embed(const TensorLayout& layout, const T* p, TokenId token, T* x) {
  const int C = layout.config().d_model;
  const T* row = p + layout.emb + static_cast<std::size_t>(token) * C;
  layer_norm(row, p + layout.ln0_w, p + layout.ln0_b, x, C, T(kLayerNormEps));
}

template <class T>
std::vector<T> head(const TensorLayout& layout, const T* p, const T* x, Workspace<T>& ws) {
  const ModelConfig& cfg = layout.config();
  layer_norm(x, p + layout.ln_out_w, p + layout.ln_out_b, ws.h.data(), cfg.d_model,
             T(kLayerNormEps));
  std::vector<T> logits(static_cast<std::size_t>(cfg.vocab_size));
  linear(p + layout.head, ws.h.data(), logits.data(), cfg.vocab_size, cfg.d_model);
  return logits;
}

}  // namespace

Logits forward_step(const WeightSet& weights, DecoderState& state, TokenId token) {
  const ModelConfig& cfg = weights.config();
  check_token(token, cfg.vocab_size);
  if (state.n_layers != cfg.n_layers || state.d_model != cfg.d_model ||
      state.n_heads != cfg.n_heads) {
    throw WeightError("decoder state does not match the model configuration");
  }
  const TensorLayout& layout = weights.layout();
  const float* p = weights.values().data();
  const auto C = static_cast<std::size_t>(cfg.d_model);
  const std::size_t state_stride = C * static_cast<std::size_t>(cfg.head_dim());

  Workspace<float> ws(cfg);
  std::vector<float> x(C), v_first(C);
  embed(layout, p, token, x.data());
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    block_step(cfg, layout.layers[li], p, x.data(), state.att_shift.data() + li * C,
               state.ffn_shift.data() + li * C, state.wkv.data() + li * state_stride,
               v_first.data(), ws);
  }
  return head(layout, p, x.data(), ws);
}

template <class T>
std::vector<std::vector<T>> forward_sequence(const TensorLayout& layout, std::span<const T> params,
                                             std::span<const TokenId> tokens) {
  const ModelConfig& cfg = layout.config();
  if (params.size() != layout.total()) throw WeightError("parameter vector does not match layout");
  if (tokens.empty()) throw std::invalid_argument("token sequence must be non-empty");
  for (TokenId t : tokens) check_token(t, cfg.vocab_size);

  const T* p = params.data();
  const auto C = static_cast<std::size_t>(cfg.d_model);
  const std::size_t T_len = tokens.size();
  Workspace<T> ws(cfg);

  std::vector<T> xs(T_len * C), v_first(T_len * C);
  for (std::size_t t = 0; t < T_len; ++t) embed(layout, p, tokens[t], xs.data() + t * C);

  std::vector<T> att_shift(C), ffn_shift(C), wkv(C * static_cast<std::size_t>(cfg.head_dim()));
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::fill(att_shift.begin(), att_shift.end(), T(0));
    std::fill(ffn_shift.begin(), ffn_shift.end(), T(0));
    std::fill(wkv.begin(), wkv.end(), T(0));
    for (std::size_t t = 0; t < T_len; ++t) {
      block_step(cfg, layout.layers[static_cast<std::size_t>(l)], p, xs.data() + t * C,
                 att_shift.data(), ffn_shift.data(), wkv.data(), v_first.data() + t * C, ws);
    }
  }

  std::vector<std::vector<T>> logits;
  logits.reserve(T_len);
  for (std::size_t t = 0; t < T_len; ++t) logits.push_back(head(layout, p, xs.data() + t * C, ws));
  return logits;
}

template std::vector<std::vector<float>> forward_sequence<float>(const TensorLayout&,
                                                                 std::span<const float>,
                                                                 std::span<const TokenId>);
template std::vector<std::vector<double>> forward_sequence<double>(const TensorLayout&,
                                                                   std::span<const double>,
                                                                   std::span<const TokenId>);

std::vector<Logits> forward_full(const WeightSet& weights, std::span<const TokenId> tokens) {
  return forward_sequence<float>(weights.layout(), weights.values(), tokens);
}

}  // namespace contin
