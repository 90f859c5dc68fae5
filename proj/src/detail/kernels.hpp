#pragma once

// Dense helpers shared by inference and training. Row-major storage; a
// "linear" weight is [out, in], a low-rank factor is [in, out].

#include <cmath>
#include <cstddef>

namespace contin::detail {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kGroupNormEps = 64e-5;
inline constexpr double kNormalizeEps = 1e-12;
inline constexpr double kDecayScale = 0.60653065971263342;  // exp(-0.5)

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// y[o] = sum_i W[o, i] x[i]
template <class T>
void linear(const T* W, const T* x, T* y, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const T* row = W + static_cast<std::size_t>(o) * in;
    T acc = 0;
    for (int i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// y[o] = sum_i x[i] W[i, o]
template <class T>
void lowrank(const T* x, const T* W, T* y, int in, int out) {
  for (int o = 0; o < out; ++o) y[o] = 0;
  for (int i = 0; i < in; ++i) {
    const T xi = x[i];
    const T* row = W + static_cast<std::size_t>(i) * out;
    for (int o = 0; o < out; ++o) y[o] += xi * row[o];
  }
}

/// Writes the normalized input to `xhat` (may alias nothing) and returns 1/sigma.
template <class T>
T layer_norm(const T* x, const T* gain, const T* bias, T* y, int n, T eps, T* xhat = nullptr) {
  T mean = 0;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= n;
  T var = 0;
  for (int i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= n;
  const T rstd = T(1) / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i) {
    const T z = (x[i] - mean) * rstd;
    if (xhat) xhat[i] = z;
    y[i] = z * gain[i] + bias[i];
  }
  return rstd;
}

}  // namespace contin::detail
