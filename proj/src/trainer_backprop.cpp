// Training forward pass with saved activations, and its reverse pass.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "contin/trainer.hpp"
#include "detail/kernels.hpp"

namespace contin {

namespace {

using namespace detail;
using Vec = std::vector<double>;

struct Dims {
  explicit Dims(const ModelConfig& c)
      : C(c.d_model), H(c.n_heads), N(c.head_dim()), F(c.d_ffn), V(c.vocab_size),
        Dw(c.decay_rank), Da(c.iclr_rank), Dv(c.value_rank), Dg(c.gate_rank) {}
  int C, H, N, F, V, Dw, Da, Dv, Dg;
};

struct LayerCache {
  Vec xhat1, rstd1, h;
  Vec xr, xw, xk, xv, xa, xg;
  Vec r, k, v;
  Vec uw, sw, w;   // decay: tanh hidden, sigmoid, final decay
  Vec pa, a;       // in-context rate: hidden, sigmoid
  Vec qg, g;       // gate: sigmoid hidden, output
  Vec kk, knorm;   // normalized key and the raw per-head norm
  Vec kmod;
  Vec pv, nu, vmod;
  Vec states;      // [T + 1, H, N, N], states[0] = 0
  Vec gn_xhat, gn_rstd, bonus, o, og;
  Vec xhat2, rstd2, h2, xk2, kpre, kf;
};

struct SequenceCache {
  std::vector<TokenId> inputs;
  Vec emb_xhat, emb_rstd;
  Vec v_first;
  std::vector<LayerCache> layers;
  Vec out_xhat, out_rstd, hout, logits;
};

std::size_t sz(int a) { return static_cast<std::size_t>(a); }

// dW[o, i] += dy[o] x[i];  dx[i] += sum_o W[o, i] dy[o]
void linear_backward(const double* W, const double* x, const double* dy, double* dW, double* dx,
                     int out, int in) {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0) continue;
    const double* row = W + sz(o) * sz(in);
    double* drow = dW + sz(o) * sz(in);
    for (int i = 0; i < in; ++i) {
      drow[i] += g * x[i];
      dx[i] += g * row[i];
    }
  }
}

// y = x W with W [in, out]:  dW[i, o] += x[i] dy[o];  dx[i] += sum_o W[i, o] dy[o]
void lowrank_backward(const double* x, const double* W, const double* dy, double* dW, double* dx,
                      int in, int out) {
  for (int i = 0; i < in; ++i) {
    const double* row = W + sz(i) * sz(out);
    double* drow = dW + sz(i) * sz(out);
    double acc = 0;
    for (int o = 0; o < out; ++o) {
      drow[o] += x[i] * dy[o];
      acc += row[o] * dy[o];
    }
    dx[i] += acc;
  }
}

void layer_norm_backward(const double* xhat, double rstd, const double* gain, const double* dy,
                         double* dx, double* dgain, double* dbias, int n) {
  double mean_d = 0, mean_dx = 0;
  for (int i = 0; i < n; ++i) {
    const double d = dy[i] * gain[i];
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
    mean_d += d;
    mean_dx += d * xhat[i];
  }
  mean_d /= n;
  mean_dx /= n;
  for (int i = 0; i < n; ++i) dx[i] += rstd * (dy[i] * gain[i] - mean_d - xhat[i] * mean_dx);
}

SequenceCache forward_cached(const TensorLayout& layout, const double* p,
                             std::span<const TokenId> inputs) {
  const ModelConfig& cfg = layout.config();
  const Dims d(cfg);
  const std::size_t T = inputs.size();
  const std::size_t C = sz(d.C);
  const double ln_eps = kLayerNormEps;
  const std::size_t state_size = C * sz(d.N);

  SequenceCache sc;
  sc.inputs.assign(inputs.begin(), inputs.end());
  sc.emb_xhat.resize(T * C);
  sc.emb_rstd.resize(T);
  sc.v_first.resize(T * C);
  Vec x(T * C);
  for (std::size_t t = 0; t < T; ++t) {
    if (inputs[t] < 0 || inputs[t] >= d.V) throw std::out_of_range("token id outside vocabulary");
    const double* row = p + layout.emb + sz(inputs[t]) * C;
    sc.emb_rstd[t] = layer_norm(row, p + layout.ln0_w, p + layout.ln0_b, &x[t * C], d.C, ln_eps,
                                &sc.emb_xhat[t * C]);
  }

  const Vec zeros(C, 0.0);
  Vec tmp(std::max<std::size_t>(C, sz(d.F)));
  sc.layers.resize(sz(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerSlots& L = layout.layers[sz(l)];
    LayerCache& c = sc.layers[sz(l)];
    for (Vec* v : {&c.xhat1, &c.h, &c.xr, &c.xw, &c.xk, &c.xv, &c.xa, &c.xg, &c.r, &c.k, &c.v,
                   &c.sw, &c.w, &c.a, &c.g, &c.kk, &c.kmod, &c.nu, &c.vmod, &c.gn_xhat, &c.o,
                   &c.og, &c.xhat2, &c.h2, &c.xk2}) {
      v->assign(T * C, 0.0);
    }
    c.rstd1.assign(T, 0.0);
    c.rstd2.assign(T, 0.0);
    c.uw.assign(T * sz(d.Dw), 0.0);
    c.pa.assign(T * sz(d.Da), 0.0);
    c.qg.assign(T * sz(d.Dg), 0.0);
    c.pv.assign(T * sz(d.Dv), 0.0);
    c.knorm.assign(T * sz(d.H), 0.0);
    c.gn_rstd.assign(T * sz(d.H), 0.0);
    c.bonus.assign(T * sz(d.H), 0.0);
    c.states.assign((T + 1) * state_size, 0.0);
    c.kpre.assign(T * sz(d.F), 0.0);
    c.kf.assign(T * sz(d.F), 0.0);

    for (std::size_t t = 0; t < T; ++t) {
      c.rstd1[t] = layer_norm(&x[t * C], p + L.ln1_w, p + L.ln1_b, &c.h[t * C], d.C, ln_eps,
                              &c.xhat1[t * C]);
    }
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t o = t * C;
      const double* h = &c.h[o];
      const double* prev = t > 0 ? &c.h[o - C] : zeros.data();
      for (std::size_t i = 0; i < C; ++i) {
        const double dd = prev[i] - h[i];
        c.xr[o + i] = h[i] + dd * p[L.x_r + i];
        c.xw[o + i] = h[i] + dd * p[L.x_w + i];
        c.xk[o + i] = h[i] + dd * p[L.x_k + i];
        c.xv[o + i] = h[i] + dd * p[L.x_v + i];
        c.xa[o + i] = h[i] + dd * p[L.x_a + i];
        c.xg[o + i] = h[i] + dd * p[L.x_g + i];
      }
      linear(p + L.receptance, &c.xr[o], &c.r[o], d.C, d.C);
      linear(p + L.key, &c.xk[o], &c.k[o], d.C, d.C);
      linear(p + L.value, &c.xv[o], &c.v[o], d.C, d.C);

      double* uw = &c.uw[t * sz(d.Dw)];
      lowrank(&c.xw[o], p + L.w1, uw, d.C, d.Dw);
      for (int j = 0; j < d.Dw; ++j) uw[j] = std::tanh(uw[j]);
      lowrank(uw, p + L.w2, tmp.data(), d.Dw, d.C);
      for (std::size_t i = 0; i < C; ++i) {
        c.sw[o + i] = sigmoid(p[L.w0 + i] + tmp[i]);
        c.w[o + i] = std::exp(-kDecayScale * c.sw[o + i]);
      }

      double* pa = &c.pa[t * sz(d.Da)];
      lowrank(&c.xa[o], p + L.a1, pa, d.C, d.Da);
      lowrank(pa, p + L.a2, tmp.data(), d.Da, d.C);
      for (std::size_t i = 0; i < C; ++i) c.a[o + i] = sigmoid(p[L.a0 + i] + tmp[i]);

      double* qg = &c.qg[t * sz(d.Dg)];
      lowrank(&c.xg[o], p + L.g1, qg, d.C, d.Dg);
      for (int j = 0; j < d.Dg; ++j) qg[j] = sigmoid(qg[j]);
      lowrank(qg, p + L.g2, &c.g[o], d.Dg, d.C);

      for (int hd = 0; hd < d.H; ++hd) {
        const std::size_t ho = o + sz(hd) * sz(d.N);
        double norm = 0;
        for (int j = 0; j < d.N; ++j) {
          const double z = c.k[ho + sz(j)] * p[L.k_k + ho - o + sz(j)];
          c.kk[ho + sz(j)] = z;
          norm += z * z;
        }
        norm = std::sqrt(norm);
        c.knorm[t * sz(d.H) + sz(hd)] = norm;
        const double denom = std::max(norm, kNormalizeEps);
        for (int j = 0; j < d.N; ++j) c.kk[ho + sz(j)] /= denom;
      }
      for (std::size_t i = 0; i < C; ++i) {
        c.kmod[o + i] = c.k[o + i] * (1.0 + (c.a[o + i] - 1.0) * p[L.k_a + i]);
      }

      if (!L.has_value_mix) {
        std::copy_n(&c.v[o], C, &sc.v_first[o]);
        std::copy_n(&c.v[o], C, &c.vmod[o]);
      } else {
        double* pv = &c.pv[t * sz(d.Dv)];
        lowrank(&c.xv[o], p + L.v1, pv, d.C, d.Dv);
        lowrank(pv, p + L.v2, tmp.data(), d.Dv, d.C);
        for (std::size_t i = 0; i < C; ++i) {
          c.nu[o + i] = sigmoid(p[L.v0 + i] + tmp[i]);
          c.vmod[o + i] = c.v[o + i] + (sc.v_first[o + i] - c.v[o + i]) * c.nu[o + i];
        }
      }

      const double* Sp = &c.states[t * state_size];
      double* Sn = &c.states[(t + 1) * state_size];
      for (int hd = 0; hd < d.H; ++hd) {
        const std::size_t so = sz(hd) * sz(d.N) * sz(d.N);
        const std::size_t ho = o + sz(hd) * sz(d.N);
        for (int i = 0; i < d.N; ++i) {
          const double* prow = Sp + so + sz(i) * sz(d.N);
          double* row = Sn + so + sz(i) * sz(d.N);
          double sa = 0;
          for (int j = 0; j < d.N; ++j) sa -= prow[j] * c.kk[ho + sz(j)];
          const double vi = c.vmod[ho + sz(i)];
          double acc = 0;
          for (int j = 0; j < d.N; ++j) {
            row[j] = prow[j] * c.w[ho + sz(j)] + sa * c.kk[ho + sz(j)] * c.a[ho + sz(j)] +
                     vi * c.kmod[ho + sz(j)];
            acc += row[j] * c.r[ho + sz(j)];
          }
          tmp[sz(hd) * sz(d.N) + sz(i)] = acc;
        }
      }
      for (int hd = 0; hd < d.H; ++hd) {
        const std::size_t hl = sz(hd) * sz(d.N);
        c.gn_rstd[t * sz(d.H) + sz(hd)] =
            layer_norm(&tmp[hl], p + L.ln_x_w + hl, p + L.ln_x_b + hl, &c.o[o + hl], d.N,
                       kGroupNormEps, &c.gn_xhat[o + hl]);
        double bonus = 0;
        for (int j = 0; j < d.N; ++j) {
          bonus += c.r[o + hl + sz(j)] * c.kmod[o + hl + sz(j)] * p[L.r_k + hl + sz(j)];
        }
        c.bonus[t * sz(d.H) + sz(hd)] = bonus;
        for (int i = 0; i < d.N; ++i) c.o[o + hl + sz(i)] += bonus * c.vmod[o + hl + sz(i)];
      }
      for (std::size_t i = 0; i < C; ++i) c.og[o + i] = c.o[o + i] * c.g[o + i];
      linear(p + L.output, &c.og[o], tmp.data(), d.C, d.C);
      for (std::size_t i = 0; i < C; ++i) x[o + i] += tmp[i];
    }

    for (std::size_t t = 0; t < T; ++t) {
      c.rstd2[t] = layer_norm(&x[t * C], p + L.ln2_w, p + L.ln2_b, &c.h2[t * C], d.C, ln_eps,
                              &c.xhat2[t * C]);
    }
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t o = t * C;
      const double* prev = t > 0 ? &c.h2[o - C] : zeros.data();
      for (std::size_t i = 0; i < C; ++i) {
        c.xk2[o + i] = c.h2[o + i] + (prev[i] - c.h2[o + i]) * p[L.ffn_x_k + i];
      }
      double* kpre = &c.kpre[t * sz(d.F)];
      double* kf = &c.kf[t * sz(d.F)];
      linear(p + L.ffn_key, &c.xk2[o], kpre, d.F, d.C);
      for (int j = 0; j < d.F; ++j) {
        const double z = std::max(kpre[j], 0.0);
        kf[j] = z * z;
      }
      linear(p + L.ffn_value, kf, tmp.data(), d.C, d.F);
      for (std::size_t i = 0; i < C; ++i) x[o + i] += tmp[i];
    }
  }

  sc.out_xhat.resize(T * C);
  sc.out_rstd.resize(T);
  sc.hout.resize(T * C);
  sc.logits.resize(T * sz(d.V));
  for (std::size_t t = 0; t < T; ++t) {
    sc.out_rstd[t] = layer_norm(&x[t * C], p + layout.ln_out_w, p + layout.ln_out_b,
                                &sc.hout[t * C], d.C, ln_eps, &sc.out_xhat[t * C]);
    linear(p + layout.head, &sc.hout[t * C], &sc.logits[t * sz(d.V)], d.V, d.C);
  }
  return sc;
}

// Sum over target positions of -log p(target), and softmax(logits) - onehot
// scaled by `scale` into dlogits.
double softmax_xent(const double* logits, TokenId target, int V, double scale, double* dlogits) {
  double top = logits[0];
  for (int i = 1; i < V; ++i) top = std::max(top, logits[i]);
  double total = 0;
  for (int i = 0; i < V; ++i) total += std::exp(logits[i] - top);
  const double log_z = top + std::log(total);
  if (dlogits) {
    for (int i = 0; i < V; ++i) dlogits[i] = std::exp(logits[i] - log_z) * scale;
    dlogits[target] -= scale;
  }
  return log_z - logits[target];
}

void backward(const TensorLayout& layout, const double* p, const SequenceCache& sc,
              const Vec& dlogits, double* G) {
  const ModelConfig& cfg = layout.config();
  const Dims d(cfg);
  const std::size_t T = sc.inputs.size();
  const std::size_t C = sz(d.C);
  const std::size_t N = sz(d.N);
  const std::size_t state_size = C * N;

  Vec dx(T * C, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    Vec dh(C, 0.0);
    linear_backward(p + layout.head, &sc.hout[t * C], &dlogits[t * sz(d.V)], G + layout.head,
                    dh.data(), d.V, d.C);
    layer_norm_backward(&sc.out_xhat[t * C], sc.out_rstd[t], p + layout.ln_out_w, dh.data(),
                        &dx[t * C], G + layout.ln_out_w, G + layout.ln_out_b, d.C);
  }

  const Vec zeros(C, 0.0);
  Vec dv_first(T * C, 0.0);
  Vec dkf(sz(d.F)), dkpre(sz(d.F)), dxk2(C), dh(C), carry(C);
  Vec dA(C), dog(C), dO(C), dg(C), dqg(sz(d.Dg)), dy(C), dr(C), dk(C), dv(C), dkmod(C),
      dvmod(C), dkk(C), da(C), dw(C), dlow(std::max({d.Dw, d.Da, d.Dv, d.Dg})), dz(C),
      dS(state_size), dsa(N);
  Vec dxr(C), dxw(C), dxk(C), dxv(C), dxa(C), dxg(C);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerSlots& L = layout.layers[sz(l)];
    const LayerCache& c = sc.layers[sz(l)];

    // Channel mix.
    std::fill(carry.begin(), carry.end(), 0.0);
    for (std::size_t tt = T; tt-- > 0;) {
      const std::size_t o = tt * C;
      const double* kf = &c.kf[tt * sz(d.F)];
      const double* kpre = &c.kpre[tt * sz(d.F)];
      std::fill(dkf.begin(), dkf.end(), 0.0);
      linear_backward(p + L.ffn_value, kf, &dx[o], G + L.ffn_value, dkf.data(), d.C, d.F);
      for (int j = 0; j < d.F; ++j) dkpre[sz(j)] = dkf[sz(j)] * 2.0 * std::max(kpre[j], 0.0);
      std::fill(dxk2.begin(), dxk2.end(), 0.0);
      linear_backward(p + L.ffn_key, &c.xk2[o], dkpre.data(), G + L.ffn_key, dxk2.data(), d.F,
                      d.C);
      const double* prev = tt > 0 ? &c.h2[o - C] : zeros.data();
      for (std::size_t i = 0; i < C; ++i) {
        const double mu = p[L.ffn_x_k + i];
        dh[i] = carry[i] + dxk2[i] * (1.0 - mu);
        carry[i] = dxk2[i] * mu;
        G[L.ffn_x_k + i] += dxk2[i] * (prev[i] - c.h2[o + i]);
      }
      layer_norm_backward(&c.xhat2[o], c.rstd2[tt], p + L.ln2_w, dh.data(), &dx[o],
                          G + L.ln2_w, G + L.ln2_b, d.C);
    }

    // Time mix.
    std::fill(carry.begin(), carry.end(), 0.0);
    std::fill(dS.begin(), dS.end(), 0.0);
    for (std::size_t tt = T; tt-- > 0;) {
      const std::size_t o = tt * C;
      std::copy_n(&dx[o], C, dA.begin());
      for (Vec* v : {&dog, &dy, &dr, &dk, &dv, &dkmod, &dvmod, &dkk, &da, &dw, &dxr, &dxw, &dxk,
                     &dxv, &dxa, &dxg}) {
        std::fill(v->begin(), v->end(), 0.0);
      }

      linear_backward(p + L.output, &c.og[o], dA.data(), G + L.output, dog.data(), d.C, d.C);
      for (std::size_t i = 0; i < C; ++i) {
        dO[i] = dog[i] * c.g[o + i];
        dg[i] = dog[i] * c.o[o + i];
      }

      // Gate generator.
      const double* qg = &c.qg[tt * sz(d.Dg)];
      std::fill(dqg.begin(), dqg.end(), 0.0);
      lowrank_backward(qg, p + L.g2, dg.data(), G + L.g2, dqg.data(), d.Dg, d.C);
      for (int j = 0; j < d.Dg; ++j) dqg[sz(j)] *= qg[j] * (1.0 - qg[j]);
      lowrank_backward(&c.xg[o], p + L.g1, dqg.data(), G + L.g1, dxg.data(), d.C, d.Dg);

      // Readout: group norm plus the per-head r.k bonus.
      for (int hd = 0; hd < d.H; ++hd) {
        const std::size_t hl = sz(hd) * N;
        const double bonus = c.bonus[tt * sz(d.H) + sz(hd)];
        double dbonus = 0;
        for (std::size_t i = 0; i < N; ++i) {
          dvmod[hl + i] += dO[hl + i] * bonus;
          dbonus += dO[hl + i] * c.vmod[o + hl + i];
        }
        for (std::size_t j = 0; j < N; ++j) {
          const double rk = p[L.r_k + hl + j];
          dr[hl + j] += dbonus * c.kmod[o + hl + j] * rk;
          dkmod[hl + j] += dbonus * c.r[o + hl + j] * rk;
          G[L.r_k + hl + j] += dbonus * c.r[o + hl + j] * c.kmod[o + hl + j];
        }
        layer_norm_backward(&c.gn_xhat[o + hl], c.gn_rstd[tt * sz(d.H) + sz(hd)],
                            p + L.ln_x_w + hl, &dO[hl], &dy[hl], G + L.ln_x_w + hl,
                            G + L.ln_x_b + hl, d.N);
      }

      // Matrix state.
      const double* Sp = &c.states[tt * state_size];
      const double* Sn = &c.states[(tt + 1) * state_size];
      for (int hd = 0; hd < d.H; ++hd) {
        const std::size_t so = sz(hd) * N * N;
        const std::size_t hl = sz(hd) * N;
        const double* kk = &c.kk[o + hl];
        const double* a = &c.a[o + hl];
        const double* w = &c.w[o + hl];
        const double* km = &c.kmod[o + hl];
        const double* vm = &c.vmod[o + hl];
        const double* r = &c.r[o + hl];
        double* dSh = &dS[so];
        for (std::size_t i = 0; i < N; ++i) {
          const double* nrow = Sn + so + i * N;
          double* drow = dSh + i * N;
          for (std::size_t j = 0; j < N; ++j) {
            drow[j] += dy[hl + i] * r[j];
            dr[hl + j] += nrow[j] * dy[hl + i];
          }
        }
        for (std::size_t i = 0; i < N; ++i) {
          const double* prow = Sp + so + i * N;
          const double* drow = dSh + i * N;
          double sa = 0, dsa_i = 0, dv_i = 0;
          for (std::size_t j = 0; j < N; ++j) {
            sa -= prow[j] * kk[j];
            dsa_i += drow[j] * kk[j] * a[j];
            dv_i += drow[j] * km[j];
            dw[hl + j] += drow[j] * prow[j];
            dkmod[hl + j] += drow[j] * vm[i];
          }
          dsa[i] = dsa_i;
          dvmod[hl + i] += dv_i;
          for (std::size_t j = 0; j < N; ++j) {
            const double db = drow[j] * sa;
            dkk[hl + j] += db * a[j];
            da[hl + j] += db * kk[j];
          }
        }
        for (std::size_t i = 0; i < N; ++i) {
          const double* prow = Sp + so + i * N;
          double* drow = dSh + i * N;
          for (std::size_t j = 0; j < N; ++j) {
            dkk[hl + j] -= dsa[i] * prow[j];
            drow[j] = drow[j] * w[j] - dsa[i] * kk[j];
          }
        }
      }

      // Value residual.
      if (L.has_value_mix) {
        const double* pv = &c.pv[tt * sz(d.Dv)];
        for (std::size_t i = 0; i < C; ++i) {
          const double nu = c.nu[o + i];
          dv[i] += dvmod[i] * (1.0 - nu);
          dv_first[o + i] += dvmod[i] * nu;
          dz[i] = dvmod[i] * (sc.v_first[o + i] - c.v[o + i]) * nu * (1.0 - nu);
          G[L.v0 + i] += dz[i];
        }
        std::fill(dlow.begin(), dlow.end(), 0.0);
        lowrank_backward(pv, p + L.v2, dz.data(), G + L.v2, dlow.data(), d.Dv, d.C);
        lowrank_backward(&c.xv[o], p + L.v1, dlow.data(), G + L.v1, dxv.data(), d.C, d.Dv);
      } else {
        for (std::size_t i = 0; i < C; ++i) dv[i] += dvmod[i] + dv_first[o + i];
      }

      // Key: in-context-rate scaling and the normalized removal key.
      for (std::size_t i = 0; i < C; ++i) {
        const double ka = p[L.k_a + i];
        const double kr = c.k[o + i];
        dk[i] += dkmod[i] * (1.0 + (c.a[o + i] - 1.0) * ka);
        da[i] += dkmod[i] * kr * ka;
        G[L.k_a + i] += dkmod[i] * kr * (c.a[o + i] - 1.0);
      }
      for (int hd = 0; hd < d.H; ++hd) {
        const std::size_t hl = sz(hd) * N;
        const double norm = c.knorm[tt * sz(d.H) + sz(hd)];
        double proj = 0;
        for (std::size_t j = 0; j < N; ++j) proj += c.kk[o + hl + j] * dkk[hl + j];
        for (std::size_t j = 0; j < N; ++j) {
          const double dzj = norm > kNormalizeEps
                                 ? (dkk[hl + j] - c.kk[o + hl + j] * proj) / norm
                                 : dkk[hl + j] / kNormalizeEps;
          dk[hl + j] += dzj * p[L.k_k + hl + j];
          G[L.k_k + hl + j] += dzj * c.k[o + hl + j];
        }
      }

      // In-context learning rate generator.
      for (std::size_t i = 0; i < C; ++i) {
        const double ai = c.a[o + i];
        dz[i] = da[i] * ai * (1.0 - ai);
        G[L.a0 + i] += dz[i];
      }
      std::fill(dlow.begin(), dlow.end(), 0.0);
      lowrank_backward(&c.pa[tt * sz(d.Da)], p + L.a2, dz.data(), G + L.a2, dlow.data(), d.Da,
                       d.C);
      lowrank_backward(&c.xa[o], p + L.a1, dlow.data(), G + L.a1, dxa.data(), d.C, d.Da);

      // Decay generator.
      for (std::size_t i = 0; i < C; ++i) {
        const double s = c.sw[o + i];
        dz[i] = dw[i] * c.w[o + i] * (-kDecayScale) * s * (1.0 - s);
        G[L.w0 + i] += dz[i];
      }
      const double* uw = &c.uw[tt * sz(d.Dw)];
      std::fill(dlow.begin(), dlow.end(), 0.0);
      lowrank_backward(uw, p + L.w2, dz.data(), G + L.w2, dlow.data(), d.Dw, d.C);
      for (int j = 0; j < d.Dw; ++j) dlow[sz(j)] *= 1.0 - uw[j] * uw[j];
      lowrank_backward(&c.xw[o], p + L.w1, dlow.data(), G + L.w1, dxw.data(), d.C, d.Dw);

      linear_backward(p + L.receptance, &c.xr[o], dr.data(), G + L.receptance, dxr.data(), d.C,
                      d.C);
      linear_backward(p + L.key, &c.xk[o], dk.data(), G + L.key, dxk.data(), d.C, d.C);
      linear_backward(p + L.value, &c.xv[o], dv.data(), G + L.value, dxv.data(), d.C, d.C);

      // Token shift.
      const double* h = &c.h[o];
      const double* prev = tt > 0 ? &c.h[o - C] : zeros.data();
      for (std::size_t i = 0; i < C; ++i) {
        const double diff = prev[i] - h[i];
        double own = 0, back = 0;
        auto mix = [&](std::size_t slot, double g) {
          const double mu = p[slot + i];
          own += g * (1.0 - mu);
          back += g * mu;
          G[slot + i] += g * diff;
        };
        mix(L.x_r, dxr[i]);
        mix(L.x_w, dxw[i]);
        mix(L.x_k, dxk[i]);
        mix(L.x_v, dxv[i]);
        mix(L.x_a, dxa[i]);
        mix(L.x_g, dxg[i]);
        dh[i] = carry[i] + own;
        carry[i] = back;
      }
      layer_norm_backward(&c.xhat1[o], c.rstd1[tt], p + L.ln1_w, dh.data(), &dx[o], G + L.ln1_w,
                          G + L.ln1_b, d.C);
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* demb = G + layout.emb + sz(sc.inputs[t]) * C;
    layer_norm_backward(&sc.emb_xhat[t * C], sc.emb_rstd[t], p + layout.ln0_w, &dx[t * C], demb,
                        G + layout.ln0_w, G + layout.ln0_b, d.C);
  }
}

std::size_t count_targets(const std::vector<std::vector<TokenId>>& batch) {
  std::size_t n = 0;
  for (const auto& seq : batch) {
    for (std::size_t t = 1; t < seq.size(); ++t) n += seq[t] != kPad;
  }
  return n;
}

double run(const TensorLayout& layout, std::span<const double> params,
           const std::vector<std::vector<TokenId>>& batch, double* grad) {
  if (params.size() != layout.total()) throw std::invalid_argument("parameter size mismatch");
  const std::size_t n_targets = count_targets(batch);
  if (n_targets == 0) throw Error("batch has no non-PAD targets");
  const double scale = 1.0 / static_cast<double>(n_targets);
  const int V = layout.config().vocab_size;
  double loss = 0;
  for (const auto& seq : batch) {
    if (seq.size() < 2) continue;
    const std::span<const TokenId> inputs(seq.data(), seq.size() - 1);
    const SequenceCache sc = forward_cached(layout, params.data(), inputs);
    Vec dlogits(grad ? inputs.size() * sz(V) : 0, 0.0);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      const TokenId target = seq[t + 1];
      if (target == kPad) continue;
      if (target < 0 || target >= V) throw std::out_of_range("target id outside vocabulary");
      loss += softmax_xent(&sc.logits[t * sz(V)], target, V, scale,
                           grad ? &dlogits[t * sz(V)] : nullptr) * scale;
    }
    if (grad) backward(layout, params.data(), sc, dlogits, grad);
  }
  return loss;
}

}  // namespace

LossAndGrad loss_and_grad(const TensorLayout& layout, std::span<const double> params,
                          const std::vector<std::vector<TokenId>>& batch) {
  LossAndGrad out;
  out.grad.assign(layout.total(), 0.0);
  out.loss = run(layout, params, batch, out.grad.data());
  out.targets = count_targets(batch);
  return out;
}

double batch_loss(const TensorLayout& layout, std::span<const double> params,
                  const std::vector<std::vector<TokenId>>& batch) {
  return run(layout, params, batch, nullptr);
}

std::vector<std::vector<double>> training_logits(const TensorLayout& layout,
                                                 std::span<const double> params,
                                                 std::span<const TokenId> tokens) {
  const SequenceCache sc = forward_cached(layout, params.data(), tokens);
  const auto V = sz(layout.config().vocab_size);
  std::vector<std::vector<double>> out;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    out.emplace_back(sc.logits.begin() + static_cast<std::ptrdiff_t>(t * V),
                     sc.logits.begin() + static_cast<std::ptrdiff_t>((t + 1) * V));
  }
  return out;
}

}  // namespace contin
