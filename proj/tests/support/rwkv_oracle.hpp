#pragma once

// Reference RWKV-7 forward pass in double precision, written for clarity
// against the named tensors of a WeightSet. Shares no code with the runtime.

#include <cmath>
#include <string>
#include <vector>

#include "contin/rwkv.hpp"

namespace contin::testing {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

class RwkvOracle {
 public:
  explicit RwkvOracle(const WeightSet& w) : w_(w), cfg_(w.config()) {}

  std::vector<Vec> run(const std::vector<TokenId>& tokens) const {
    const int C = cfg_.d_model, H = cfg_.n_heads, N = cfg_.head_dim(), L = cfg_.n_layers;
    std::vector<Vec> att_prev(L, Vec(C, 0.0)), ffn_prev(L, Vec(C, 0.0));
    std::vector<std::vector<Mat>> S(L, std::vector<Mat>(H, Mat(N, Vec(N, 0.0))));
    std::vector<Vec> out;
    for (TokenId tok : tokens) {
      Vec x = ln(row("emb.weight", tok, C), "blocks.0.ln0", 1e-5);
      Vec v_first;
      for (int l = 0; l < L; ++l) {
        const std::string b = "blocks." + std::to_string(l) + ".";
        const std::string a = b + "att.";
        Vec h = ln(x, b + "ln1", 1e-5);
        auto mix = [&](const std::string& name) {
          Vec m = vec(a + name), r(C);
          for (int i = 0; i < C; ++i) r[i] = h[i] + (att_prev[l][i] - h[i]) * m[i];
          return r;
        };
        Vec xr = mix("x_r"), xw = mix("x_w"), xk = mix("x_k"), xv = mix("x_v"), xa = mix("x_a"),
            xg = mix("x_g");
        att_prev[l] = h;
        Vec r = matvec(a + "receptance.weight", xr);
        Vec k = matvec(a + "key.weight", xk);
        Vec v = matvec(a + "value.weight", xv);

        Vec wpre = add(vec(a + "w0"), through(apply(through(xw, a + "w1"), tanh_), a + "w2"));
        Vec decay(C);
        for (int i = 0; i < C; ++i) decay[i] = std::exp(-std::exp(-0.5) * sig(wpre[i]));
        Vec iclr = apply(add(vec(a + "a0"), through(through(xa, a + "a1"), a + "a2")), sig);
        Vec gate = through(apply(through(xg, a + "g1"), sig), a + "g2");

        Vec kk = mul(k, vec(a + "k_k"));
        for (int hh = 0; hh < H; ++hh) {
          double n2 = 0;
          for (int j = 0; j < N; ++j) n2 += kk[hh * N + j] * kk[hh * N + j];
          const double n = std::max(std::sqrt(n2), 1e-12);
          for (int j = 0; j < N; ++j) kk[hh * N + j] /= n;
        }
        Vec ka = vec(a + "k_a");
        for (int i = 0; i < C; ++i) k[i] = k[i] * (1 + (iclr[i] - 1) * ka[i]);

        if (l == 0) {
          v_first = v;
        } else {
          Vec nu = apply(add(vec(a + "v0"), through(through(xv, a + "v1"), a + "v2")), sig);
          for (int i = 0; i < C; ++i) v[i] = v[i] + (v_first[i] - v[i]) * nu[i];
        }

        Vec y(C), gx = vec(a + "ln_x.weight"), gb = vec(a + "ln_x.bias"), rk = vec(a + "r_k");
        for (int hh = 0; hh < H; ++hh) {
          Mat& st = S[l][hh];
          const int o = hh * N;
          // S' = S diag(w) - (S kk)(kk*a)^T + v k^T
          Vec skk(N, 0.0);
          for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j) skk[i] += st[i][j] * kk[o + j];
          for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j)
              st[i][j] = st[i][j] * decay[o + j] - skk[i] * kk[o + j] * iclr[o + j] +
                         v[o + i] * k[o + j];
          Vec head_out(N, 0.0);
          for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j) head_out[i] += st[i][j] * r[o + j];
          double mean = 0, var = 0;
          for (double e : head_out) mean += e;
          mean /= N;
          for (double e : head_out) var += (e - mean) * (e - mean);
          var /= N;
          double bonus = 0;
          for (int j = 0; j < N; ++j) bonus += r[o + j] * k[o + j] * rk[o + j];
          for (int i = 0; i < N; ++i) {
            y[o + i] = (head_out[i] - mean) / std::sqrt(var + 64e-5) * gx[o + i] + gb[o + i] +
                       bonus * v[o + i];
          }
        }
        x = add(x, matvec(a + "output.weight", mul(y, gate)));

        Vec h2 = ln(x, b + "ln2", 1e-5);
        Vec fm = vec(b + "ffn.x_k"), xk2(C);
        for (int i = 0; i < C; ++i) xk2[i] = h2[i] + (ffn_prev[l][i] - h2[i]) * fm[i];
        ffn_prev[l] = h2;
        Vec hidden = matvec(b + "ffn.key.weight", xk2);
        for (double& e : hidden) e = e > 0 ? e * e : 0.0;
        x = add(x, matvec(b + "ffn.value.weight", hidden));
      }
      out.push_back(matvec("head.weight", ln(x, "ln_out", 1e-5)));
    }
    return out;
  }

 private:
  static double sig(double z) { return 1 / (1 + std::exp(-z)); }
  static double tanh_(double z) { return std::tanh(z); }

  Vec vec(const std::string& name) const {
    auto t = w_.tensor(name);
    return Vec(t.begin(), t.end());
  }
  Vec row(const std::string& name, int r, int width) const {
    auto t = w_.tensor(name);
    return Vec(t.begin() + static_cast<std::ptrdiff_t>(r) * width,
               t.begin() + static_cast<std::ptrdiff_t>(r + 1) * width);
  }
  // Linear layer stored as [out, in].
  Vec matvec(const std::string& name, const Vec& x) const {
    auto t = w_.tensor(name);
    const std::size_t in = x.size(), out = t.size() / in;
    Vec y(out, 0.0);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in; ++i) y[o] += t[o * in + i] * x[i];
    return y;
  }
  // Low-rank factor stored as [in, out]: y = x W.
  Vec through(const Vec& x, const std::string& name) const {
    auto t = w_.tensor(name);
    const std::size_t in = x.size(), out = t.size() / in;
    Vec y(out, 0.0);
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t o = 0; o < out; ++o) y[o] += x[i] * t[i * out + o];
    return y;
  }
  Vec ln(const Vec& x, const std::string& prefix, double eps) const {
    const Vec g = vec(prefix + ".weight"), b = vec(prefix + ".bias");
    double mean = 0, var = 0;
    for (double e : x) mean += e;
    mean /= static_cast<double>(x.size());
    for (double e : x) var += (e - mean) * (e - mean);
    var /= static_cast<double>(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
    return y;
  }
  static Vec add(Vec a, const Vec& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  }
  static Vec mul(Vec a, const Vec& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
    return a;
  }
  template <class F>
  static Vec apply(Vec a, F f) {
    for (double& e : a) e = f(e);
    return a;
  }

  const WeightSet& w_;
  ModelConfig cfg_;
};

}  // namespace contin::testing
