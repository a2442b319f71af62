#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "sdflow/tensor.hpp"

namespace sdflow {

namespace detail {

// Right-aligned numpy-style broadcast of b onto a's shape. Returns per-axis
// strides into b (0 on broadcast axes).
inline std::vector<int64_t> broadcast_strides(const Shape& a, const Shape& b) {
  SDFLOW_CHECK(b.size() <= a.size(),
               "cannot broadcast " << shape_str(b) << " onto " << shape_str(a));
  std::vector<int64_t> bs = strides_of(b);
  std::vector<int64_t> out(a.size(), 0);
  size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); ++i) {
    if (b[i] == a[off + i]) {
      out[off + i] = bs[i];
    } else {
      SDFLOW_CHECK(b[i] == 1, "cannot broadcast dim " << b[i] << " of "
                                  << shape_str(b) << " onto " << shape_str(a));
      out[off + i] = 0;
    }
  }
  return out;
}

// Calls fn(a_flat_index, b_flat_index) over every element of shape a.
template <typename F>
inline void for_each_broadcast(const Shape& a, const std::vector<int64_t>& b_stride, F&& fn) {
  int64_t n = numel(a);
  if (n == 0) return;
  size_t nd = a.size();
  std::vector<int64_t> idx(nd, 0);
  int64_t bi = 0;
  for (int64_t ai = 0; ai < n; ++ai) {
    fn(ai, bi);
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      idx[d]++;
      bi += b_stride[d];
      if (idx[d] < a[d]) break;
      bi -= b_stride[d] * a[d];
      idx[d] = 0;
    }
  }
}

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<float> out(av.size());
  std::vector<int64_t> bstride;
  const bool same = detail::same_shape(a, b);
  if (same) {
    switch (kind) {
      case BinaryKind::Add:
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
        break;
      case BinaryKind::Sub:
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
        break;
      case BinaryKind::Mul:
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
        break;
    }
  } else {
    bstride = detail::broadcast_strides(a.shape(), b.shape());
    detail::for_each_broadcast(a.shape(), bstride, [&](int64_t ai, int64_t bi) {
      switch (kind) {
        case BinaryKind::Add: out[ai] = av[ai] + bv[bi]; break;
        case BinaryKind::Sub: out[ai] = av[ai] - bv[bi]; break;
        case BinaryKind::Mul: out[ai] = av[ai] * bv[bi]; break;
      }
    });
  }
  auto an = a.node();
  auto bn = b.node();
  bool a_rg = a.requires_grad();
  bool b_rg = b.requires_grad();
  Shape ashape = a.shape();
  Shape bshape = b.shape();
  return make_node(
      a.shape(), std::move(out), {a, b},
      [an, bn, a_rg, b_rg, ashape, bshape, bstride, same, kind](TensorNode& o) {
        const auto& g = o.grad;
        if (a_rg) {
          an->ensure_grad();
          auto& ga = an->grad;
          if (kind == BinaryKind::Mul) {
            if (same) {
              for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
            } else {
              detail::for_each_broadcast(ashape, bstride, [&](int64_t ai, int64_t bi) {
                ga[ai] += g[ai] * bn->value[bi];
              });
            }
          } else {
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          }
        }
        if (b_rg) {
          bn->ensure_grad();
          auto& gb = bn->grad;
          float sign = (kind == BinaryKind::Sub) ? -1.0f : 1.0f;
          if (same) {
            if (kind == BinaryKind::Mul) {
              for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
            } else {
              for (size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
            }
          } else {
            detail::for_each_broadcast(ashape, bstride, [&](int64_t ai, int64_t bi) {
              if (kind == BinaryKind::Mul)
                gb[bi] += g[ai] * an->value[ai];
              else
                gb[bi] += sign * g[ai];
            });
          }
        }
      });
}

inline Tensor op_add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::Add); }
inline Tensor op_sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::Sub); }
inline Tensor op_hadamard(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::Mul); }

inline Tensor op_scalar_mul(const Tensor& a, float c) {
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  bool rg = a.requires_grad();
  return make_node(a.shape(), std::move(out), {a}, [an, rg, c](TensorNode& o) {
    if (!rg) return;
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
  });
}

inline Tensor op_scalar_add(const Tensor& a, float c) {
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  auto an = a.node();
  bool rg = a.requires_grad();
  return make_node(a.shape(), std::move(out), {a}, [an, rg](TensorNode& o) {
    if (!rg) return;
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
}

inline Tensor op_abs(const Tensor& a) {
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.data()[i]);
  auto an = a.node();
  bool rg = a.requires_grad();
  return make_node(a.shape(), std::move(out), {a}, [an, rg](TensorNode& o) {
    if (!rg) return;
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      float x = an->value[i];
      // subgradient 0 at x == 0
      float s = (x > 0.0f) ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
      an->grad[i] += o.grad[i] * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor op_matmul(const Tensor& a, const Tensor& b) {
  SDFLOW_CHECK(a.ndim() == 2 && b.ndim() == 2,
               "matmul expects 2-d operands, got " << shape_str(a.shape()) << " and "
                                                   << shape_str(b.shape()));
  int64_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  SDFLOW_CHECK(K == K2, "matmul inner dims differ: " << shape_str(a.shape()) << " x "
                                                     << shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(M * N), 0.0f);
  const float* ap = a.data().data();
  const float* bp = b.data().data();
  parallel_for(M, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      float* orow = out.data() + i * N;
      const float* arow = ap + i * K;
      for (int64_t k = 0; k < K; ++k) {
        float av = arow[k];
        if (av == 0.0f) continue;
        const float* brow = bp + k * N;
        for (int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
      }
    }
  });
  auto an = a.node();
  auto bn = b.node();
  bool a_rg = a.requires_grad(), b_rg = b.requires_grad();
  return make_node({M, N}, std::move(out), {a, b}, [an, bn, a_rg, b_rg, M, K, N](TensorNode& o) {
    const float* g = o.grad.data();
    if (a_rg) {
      an->ensure_grad();
      float* ga = an->grad.data();
      const float* bv = bn->value.data();
      parallel_for(M, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
          for (int64_t j = 0; j < N; ++j) {
            float gv = g[i * N + j];
            if (gv == 0.0f) continue;
            for (int64_t k = 0; k < K; ++k) ga[i * K + k] += gv * bv[k * N + j];
          }
      });
    }
    if (b_rg) {
      bn->ensure_grad();
      float* gb = bn->grad.data();
      const float* av = an->value.data();
      parallel_for(K, [&](int64_t lo, int64_t hi) {
        for (int64_t k = lo; k < hi; ++k)
          for (int64_t i = 0; i < M; ++i) {
            float avv = av[i * K + k];
            if (avv == 0.0f) continue;
            for (int64_t j = 0; j < N; ++j) gb[k * N + j] += avv * g[i * N + j];
          }
      });
    }
  });
}

// Batched a(B,M,K) @ b(B,K,N) -> (B,M,N)
inline Tensor op_bmm(const Tensor& a, const Tensor& b) {
  SDFLOW_CHECK(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
               "bmm shape mismatch: " << shape_str(a.shape()) << " x " << shape_str(b.shape()));
  int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<float> out(static_cast<size_t>(B * M * N), 0.0f);
  const float* ap = a.data().data();
  const float* bp = b.data().data();
  parallel_for(B, [&](int64_t lo, int64_t hi) {
    for (int64_t bb = lo; bb < hi; ++bb)
      for (int64_t i = 0; i < M; ++i) {
        float* orow = out.data() + (bb * M + i) * N;
        for (int64_t k = 0; k < K; ++k) {
          float av = ap[(bb * M + i) * K + k];
          if (av == 0.0f) continue;
          const float* brow = bp + (bb * K + k) * N;
          for (int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
      }
  });
  auto an = a.node();
  auto bn = b.node();
  bool a_rg = a.requires_grad(), b_rg = b.requires_grad();
  return make_node({B, M, N}, std::move(out), {a, b},
                   [an, bn, a_rg, b_rg, B, M, K, N](TensorNode& o) {
                     const float* g = o.grad.data();
                     if (a_rg) an->ensure_grad();
                     if (b_rg) bn->ensure_grad();
                     parallel_for(B, [&](int64_t lo, int64_t hi) {
                       for (int64_t bb = lo; bb < hi; ++bb) {
                         for (int64_t i = 0; i < M; ++i)
                           for (int64_t j = 0; j < N; ++j) {
                             float gv = g[(bb * M + i) * N + j];
                             if (gv == 0.0f) continue;
                             if (a_rg)
                               for (int64_t k = 0; k < K; ++k)
                                 an->grad[(bb * M + i) * K + k] += gv * bn->value[(bb * K + k) * N + j];
                             if (b_rg)
                               for (int64_t k = 0; k < K; ++k)
                                 bn->grad[(bb * K + k) * N + j] += gv * an->value[(bb * M + i) * K + k];
                           }
                       }
                     });
                   });
}

// Batched a(B,M,K) @ b(B,N,K)^T -> (B,M,N)
inline Tensor op_bmm_nt(const Tensor& a, const Tensor& b) {
  SDFLOW_CHECK(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
               "bmm_nt shape mismatch: " << shape_str(a.shape()) << " x " << shape_str(b.shape()));
  int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
  std::vector<float> out(static_cast<size_t>(B * M * N), 0.0f);
  const float* ap = a.data().data();
  const float* bp = b.data().data();
  parallel_for(B, [&](int64_t lo, int64_t hi) {
    for (int64_t bb = lo; bb < hi; ++bb)
      for (int64_t i = 0; i < M; ++i) {
        const float* arow = ap + (bb * M + i) * K;
        float* orow = out.data() + (bb * M + i) * N;
        for (int64_t j = 0; j < N; ++j) {
          const float* brow = bp + (bb * N + j) * K;
          float acc = 0.0f;
          for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
          orow[j] = acc;
        }
      }
  });
  auto an = a.node();
  auto bn = b.node();
  bool a_rg = a.requires_grad(), b_rg = b.requires_grad();
  return make_node({B, M, N}, std::move(out), {a, b},
                   [an, bn, a_rg, b_rg, B, M, K, N](TensorNode& o) {
                     const float* g = o.grad.data();
                     if (a_rg) an->ensure_grad();
                     if (b_rg) bn->ensure_grad();
                     parallel_for(B, [&](int64_t lo, int64_t hi) {
                       for (int64_t bb = lo; bb < hi; ++bb)
                         for (int64_t i = 0; i < M; ++i)
                           for (int64_t j = 0; j < N; ++j) {
                             float gv = g[(bb * M + i) * N + j];
                             if (gv == 0.0f) continue;
                             const float* arow = an->value.data() + (bb * M + i) * K;
                             const float* brow = bn->value.data() + (bb * N + j) * K;
                             if (a_rg) {
                               float* garow = an->grad.data() + (bb * M + i) * K;
                               for (int64_t k = 0; k < K; ++k) garow[k] += gv * brow[k];
                             }
                             if (b_rg) {
                               float* gbrow = bn->grad.data() + (bb * N + j) * K;
                               for (int64_t k = 0; k < K; ++k) gbrow[k] += gv * arow[k];
                             }
                           }
                     });
                   });
}

// y = x @ W^T + b. x: (N, Cin), W: (Cout, Cin), b: (Cout) or undefined.
inline Tensor op_linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  SDFLOW_CHECK(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1),
               "linear shape mismatch: x " << shape_str(x.shape()) << " W " << shape_str(w.shape()));
  int64_t N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
  bool has_bias = b.defined();
  if (has_bias)
    SDFLOW_CHECK(b.ndim() == 1 && b.dim(0) == Cout, "linear bias shape " << shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(N * Cout));
  const float* xp = x.data().data();
  const float* wp = w.data().data();
  const float* bp = has_bias ? b.data().data() : nullptr;
  parallel_for(N, [&](int64_t lo, int64_t hi) {
    for (int64_t n = lo; n < hi; ++n) {
      const float* xrow = xp + n * Cin;
      float* orow = out.data() + n * Cout;
      for (int64_t co = 0; co < Cout; ++co) {
        const float* wrow = wp + co * Cin;
        float acc = bp ? bp[co] : 0.0f;
        for (int64_t ci = 0; ci < Cin; ++ci) acc += xrow[ci] * wrow[ci];
        orow[co] = acc;
      }
    }
  });
  std::vector<Tensor> inputs = {x, w};
  if (has_bias) inputs.push_back(b);
  auto xn = x.node();
  auto wn = w.node();
  auto bnn = has_bias ? b.node() : nullptr;
  bool x_rg = x.requires_grad(), w_rg = w.requires_grad();
  bool b_rg = has_bias && b.requires_grad();
  return make_node({N, Cout}, std::move(out), inputs,
                   [xn, wn, bnn, x_rg, w_rg, b_rg, N, Cin, Cout](TensorNode& o) {
                     const float* g = o.grad.data();
                     if (x_rg) {
                       xn->ensure_grad();
                       parallel_for(N, [&](int64_t lo, int64_t hi) {
                         for (int64_t n = lo; n < hi; ++n) {
                           float* gxrow = xn->grad.data() + n * Cin;
                           for (int64_t co = 0; co < Cout; ++co) {
                             float gv = g[n * Cout + co];
                             if (gv == 0.0f) continue;
                             const float* wrow = wn->value.data() + co * Cin;
                             for (int64_t ci = 0; ci < Cin; ++ci) gxrow[ci] += gv * wrow[ci];
                           }
                         }
                       });
                     }
                     if (w_rg) {
                       wn->ensure_grad();
                       parallel_for(Cout, [&](int64_t lo, int64_t hi) {
                         for (int64_t co = lo; co < hi; ++co) {
                           float* gwrow = wn->grad.data() + co * Cin;
                           for (int64_t n = 0; n < N; ++n) {
                             float gv = g[n * Cout + co];
                             if (gv == 0.0f) continue;
                             const float* xrow = xn->value.data() + n * Cin;
                             for (int64_t ci = 0; ci < Cin; ++ci) gwrow[ci] += gv * xrow[ci];
                           }
                         }
                       });
                     }
                     if (b_rg) {
                       bnn->ensure_grad();
                       for (int64_t n = 0; n < N; ++n)
                         for (int64_t co = 0; co < Cout; ++co) bnn->grad[co] += g[n * Cout + co];
                     }
                   });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

inline Tensor op_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  SDFLOW_CHECK(x.ndim() == 4 && w.ndim() == 4, "conv2d expects 4-d input and weight, got "
                                                   << shape_str(x.shape()) << " and "
                                                   << shape_str(w.shape()));
  int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  SDFLOW_CHECK(w.dim(1) == Cin, "conv2d channel mismatch: input " << Cin << " weight expects "
                                                                  << w.dim(1));
  SDFLOW_CHECK(stride >= 1, "conv2d stride must be >= 1");
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  SDFLOW_CHECK(Ho >= 1 && Wo >= 1, "conv2d output would be empty for input "
                                       << shape_str(x.shape()) << " kernel " << kh << "x" << kw);
  bool has_bias = b.defined();
  if (has_bias)
    SDFLOW_CHECK(b.ndim() == 1 && b.dim(0) == Cout, "conv2d bias shape " << shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(N * Cout * Ho * Wo), 0.0f);
  const float* xp = x.data().data();
  const float* wp = w.data().data();
  const float* bp = has_bias ? b.data().data() : nullptr;
  parallel_for(N * Cout, [&](int64_t lo, int64_t hi) {
    for (int64_t nc = lo; nc < hi; ++nc) {
      int64_t n = nc / Cout, co = nc % Cout;
      float* oplane = out.data() + nc * Ho * Wo;
      if (bp) {
        float bv = bp[co];
        for (int64_t i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
      }
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const float* xplane = xp + (n * Cin + ci) * H * W;
        const float* wplane = wp + (co * Cin + ci) * kh * kw;
        for (int64_t ky = 0; ky < kh; ++ky)
          for (int64_t kx = 0; kx < kw; ++kx) {
            float wv = wplane[ky * kw + kx];
            if (wv == 0.0f) continue;
            for (int64_t oy = 0; oy < Ho; ++oy) {
              int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              const float* xrow = xplane + iy * W;
              float* orow = oplane + oy * Wo;
              for (int64_t ox = 0; ox < Wo; ++ox) {
                int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                orow[ox] += wv * xrow[ix];
              }
            }
          }
      }
    }
  });
  std::vector<Tensor> inputs = {x, w};
  if (has_bias) inputs.push_back(b);
  auto xn = x.node();
  auto wn = w.node();
  auto bnn = has_bias ? b.node() : nullptr;
  bool x_rg = x.requires_grad(), w_rg = w.requires_grad();
  bool b_rg = has_bias && b.requires_grad();
  int64_t sh = stride, ph = pad;
  return make_node(
      {N, Cout, Ho, Wo}, std::move(out), inputs,
      [xn, wn, bnn, x_rg, w_rg, b_rg, N, Cin, H, W, Cout, kh, kw, Ho, Wo, sh, ph](TensorNode& o) {
        const float* g = o.grad.data();
        if (x_rg) {
          xn->ensure_grad();
          parallel_for(N, [&](int64_t lo, int64_t hi) {
            for (int64_t n = lo; n < hi; ++n)
              for (int64_t co = 0; co < Cout; ++co) {
                const float* gplane = g + (n * Cout + co) * Ho * Wo;
                for (int64_t ci = 0; ci < Cin; ++ci) {
                  float* gxplane = xn->grad.data() + (n * Cin + ci) * H * W;
                  const float* wplane = wn->value.data() + (co * Cin + ci) * kh * kw;
                  for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      float wv = wplane[ky * kw + kx];
                      if (wv == 0.0f) continue;
                      for (int64_t oy = 0; oy < Ho; ++oy) {
                        int64_t iy = oy * sh - ph + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t ox = 0; ox < Wo; ++ox) {
                          int64_t ix = ox * sh - ph + kx;
                          if (ix < 0 || ix >= W) continue;
                          gxplane[iy * W + ix] += wv * gplane[oy * Wo + ox];
                        }
                      }
                    }
                }
              }
          });
        }
        if (w_rg) {
          wn->ensure_grad();
          parallel_for(Cout, [&](int64_t lo, int64_t hi) {
            for (int64_t co = lo; co < hi; ++co)
              for (int64_t n = 0; n < N; ++n) {
                const float* gplane = g + (n * Cout + co) * Ho * Wo;
                for (int64_t ci = 0; ci < Cin; ++ci) {
                  const float* xplane = xn->value.data() + (n * Cin + ci) * H * W;
                  float* gwplane = wn->grad.data() + (co * Cin + ci) * kh * kw;
                  for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      float acc = 0.0f;
                      for (int64_t oy = 0; oy < Ho; ++oy) {
                        int64_t iy = oy * sh - ph + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t ox = 0; ox < Wo; ++ox) {
                          int64_t ix = ox * sh - ph + kx;
                          if (ix < 0 || ix >= W) continue;
                          acc += gplane[oy * Wo + ox] * xplane[iy * W + ix];
                        }
                      }
                      gwplane[ky * kw + kx] += acc;
                    }
                }
              }
          });
        }
        if (b_rg) {
          bnn->ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
              const float* gplane = g + (n * Cout + co) * Ho * Wo;
              float acc = 0.0f;
              for (int64_t i = 0; i < Ho * Wo; ++i) acc += gplane[i];
              bnn->grad[co] += acc;
            }
        }
      });
}

// Transposed convolution. x: (N,Cin,H,W), w: (Cin,Cout,kh,kw).
// Output spatial size: (H-1)*stride - 2*pad + k.
inline Tensor op_conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                                  int pad) {
  SDFLOW_CHECK(x.ndim() == 4 && w.ndim() == 4, "conv_transpose2d expects 4-d input and weight");
  int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  SDFLOW_CHECK(w.dim(0) == Cin, "conv_transpose2d channel mismatch: input "
                                    << Cin << " weight expects " << w.dim(0));
  int64_t Cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (H - 1) * stride - 2 * pad + kh;
  int64_t Wo = (W - 1) * stride - 2 * pad + kw;
  SDFLOW_CHECK(Ho >= 1 && Wo >= 1, "conv_transpose2d output would be empty");
  bool has_bias = b.defined();
  if (has_bias) SDFLOW_CHECK(b.ndim() == 1 && b.dim(0) == Cout, "conv_transpose2d bias shape");
  std::vector<float> out(static_cast<size_t>(N * Cout * Ho * Wo), 0.0f);
  const float* xp = x.data().data();
  const float* wp = w.data().data();
  const float* bp = has_bias ? b.data().data() : nullptr;
  // Gather form: out[oy,ox] sums x[iy,ix]*w[ky,kx] with oy = iy*s - p + ky.
  parallel_for(N * Cout, [&](int64_t lo, int64_t hi) {
    for (int64_t nc = lo; nc < hi; ++nc) {
      int64_t n = nc / Cout, co = nc % Cout;
      float* oplane = out.data() + nc * Ho * Wo;
      if (bp) {
        float bv = bp[co];
        for (int64_t i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
      }
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const float* xplane = xp + (n * Cin + ci) * H * W;
        const float* wplane = wp + (ci * Cout + co) * kh * kw;
        for (int64_t iy = 0; iy < H; ++iy)
          for (int64_t ix = 0; ix < W; ++ix) {
            float xv = xplane[iy * W + ix];
            if (xv == 0.0f) continue;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t oy = iy * stride - pad + ky;
              if (oy < 0 || oy >= Ho) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ox = ix * stride - pad + kx;
                if (ox < 0 || ox >= Wo) continue;
                oplane[oy * Wo + ox] += xv * wplane[ky * kw + kx];
              }
            }
          }
      }
    }
  });
  std::vector<Tensor> inputs = {x, w};
  if (has_bias) inputs.push_back(b);
  auto xn = x.node();
  auto wn = w.node();
  auto bnn = has_bias ? b.node() : nullptr;
  bool x_rg = x.requires_grad(), w_rg = w.requires_grad();
  bool b_rg = has_bias && b.requires_grad();
  int64_t s = stride, p = pad;
  return make_node(
      {N, Cout, Ho, Wo}, std::move(out), inputs,
      [xn, wn, bnn, x_rg, w_rg, b_rg, N, Cin, H, W, Cout, kh, kw, Ho, Wo, s, p](TensorNode& o) {
        const float* g = o.grad.data();
        if (x_rg) {
          xn->ensure_grad();
          parallel_for(N * Cin, [&](int64_t lo, int64_t hi) {
            for (int64_t nc = lo; nc < hi; ++nc) {
              int64_t n = nc / Cin, ci = nc % Cin;
              float* gxplane = xn->grad.data() + nc * H * W;
              for (int64_t co = 0; co < Cout; ++co) {
                const float* gplane = g + (n * Cout + co) * Ho * Wo;
                const float* wplane = wn->value.data() + (ci * Cout + co) * kh * kw;
                for (int64_t iy = 0; iy < H; ++iy)
                  for (int64_t ix = 0; ix < W; ++ix) {
                    float acc = 0.0f;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                      int64_t oy = iy * s - p + ky;
                      if (oy < 0 || oy >= Ho) continue;
                      for (int64_t kx = 0; kx < kw; ++kx) {
                        int64_t ox = ix * s - p + kx;
                        if (ox < 0 || ox >= Wo) continue;
                        acc += gplane[oy * Wo + ox] * wplane[ky * kw + kx];
                      }
                    }
                    gxplane[iy * W + ix] += acc;
                  }
              }
            }
          });
        }
        if (w_rg) {
          wn->ensure_grad();
          parallel_for(Cin, [&](int64_t lo, int64_t hi) {
            for (int64_t ci = lo; ci < hi; ++ci)
              for (int64_t n = 0; n < N; ++n) {
                const float* xplane = xn->value.data() + (n * Cin + ci) * H * W;
                for (int64_t co = 0; co < Cout; ++co) {
                  const float* gplane = g + (n * Cout + co) * Ho * Wo;
                  float* gwplane = wn->grad.data() + (ci * Cout + co) * kh * kw;
                  for (int64_t iy = 0; iy < H; ++iy)
                    for (int64_t ix = 0; ix < W; ++ix) {
                      float xv = xplane[iy * W + ix];
                      if (xv == 0.0f) continue;
                      for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t oy = iy * s - p + ky;
                        if (oy < 0 || oy >= Ho) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                          int64_t ox = ix * s - p + kx;
                          if (ox < 0 || ox >= Wo) continue;
                          gwplane[ky * kw + kx] += xv * gplane[oy * Wo + ox];
                        }
                      }
                    }
                }
              }
          });
        }
        if (b_rg) {
          bnn->ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
              const float* gplane = g + (n * Cout + co) * Ho * Wo;
              float acc = 0.0f;
              for (int64_t i = 0; i < Ho * Wo; ++i) acc += gplane[i];
              bnn->grad[co] += acc;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization (per-batch statistics, channel axis 1)
// ---------------------------------------------------------------------------

inline Tensor op_batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           float eps = 1e-5f) {
  SDFLOW_CHECK(x.ndim() >= 2, "batchnorm expects input with a channel axis, got "
                                  << shape_str(x.shape()));
  int64_t C = x.dim(1);
  SDFLOW_CHECK(gamma.numel() == C && beta.numel() == C,
               "batchnorm parameter size mismatch for " << C << " channels");
  int64_t n_total = x.numel();
  SDFLOW_CHECK(n_total > 0, "batchnorm over an empty batch");
  int64_t outer = x.dim(0);
  int64_t inner = n_total / (outer * C);
  int64_t m = outer * inner;  // elements per channel
  SDFLOW_CHECK(m > 0, "batchnorm over an empty batch");

  std::vector<float> mean(C, 0.0f), var(C, 0.0f), inv_std(C, 0.0f);
  const float* xp = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t c = 0; c < C; ++c) {
      const float* row = xp + (o * C + c) * inner;
      float acc = 0.0f;
      for (int64_t i = 0; i < inner; ++i) acc += row[i];
      mean[c] += acc;
    }
  for (int64_t c = 0; c < C; ++c) mean[c] /= static_cast<float>(m);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t c = 0; c < C; ++c) {
      const float* row = xp + (o * C + c) * inner;
      float acc = 0.0f;
      for (int64_t i = 0; i < inner; ++i) {
        float d = row[i] - mean[c];
        acc += d * d;
      }
      var[c] += acc;
    }
  for (int64_t c = 0; c < C; ++c) {
    var[c] /= static_cast<float>(m);
    inv_std[c] = 1.0f / std::sqrt(var[c] + eps);
  }
  std::vector<float> out(x.data().size());
  const float* gp = gamma.data().data();
  const float* bp = beta.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t c = 0; c < C; ++c) {
      const float* row = xp + (o * C + c) * inner;
      float* orow = out.data() + (o * C + c) * inner;
      float mu = mean[c], is = inv_std[c], ga = gp[c], be = bp[c];
      for (int64_t i = 0; i < inner; ++i) orow[i] = ga * (row[i] - mu) * is + be;
    }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  bool x_rg = x.requires_grad(), g_rg = gamma.requires_grad(), b_rg = beta.requires_grad();
  return make_node(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, x_rg, g_rg, b_rg, outer, C, inner, m, mean, inv_std](TensorNode& o) {
        const float* g = o.grad.data();
        const float* xv = xn->value.data();
        // Per-channel reductions of g and g*xhat.
        std::vector<float> sum_g(C, 0.0f), sum_gx(C, 0.0f);
        for (int64_t ou = 0; ou < outer; ++ou)
          for (int64_t c = 0; c < C; ++c) {
            const float* grow = g + (ou * C + c) * inner;
            const float* xrow = xv + (ou * C + c) * inner;
            float sg = 0.0f, sgx = 0.0f;
            for (int64_t i = 0; i < inner; ++i) {
              float xhat = (xrow[i] - mean[c]) * inv_std[c];
              sg += grow[i];
              sgx += grow[i] * xhat;
            }
            sum_g[c] += sg;
            sum_gx[c] += sgx;
          }
        if (g_rg) {
          gn->ensure_grad();
          for (int64_t c = 0; c < C; ++c) gn->grad[c] += sum_gx[c];
        }
        if (b_rg) {
          bn->ensure_grad();
          for (int64_t c = 0; c < C; ++c) bn->grad[c] += sum_g[c];
        }
        if (x_rg) {
          xn->ensure_grad();
          const float* gam = gn->value.data();
          float inv_m = 1.0f / static_cast<float>(m);
          for (int64_t ou = 0; ou < outer; ++ou)
            for (int64_t c = 0; c < C; ++c) {
              const float* grow = g + (ou * C + c) * inner;
              const float* xrow = xv + (ou * C + c) * inner;
              float* gxrow = xn->grad.data() + (ou * C + c) * inner;
              float k = gam[c] * inv_std[c];
              for (int64_t i = 0; i < inner; ++i) {
                float xhat = (xrow[i] - mean[c]) * inv_std[c];
                gxrow[i] += k * (grow[i] - inv_m * sum_g[c] - xhat * inv_m * sum_gx[c]);
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor op_reshape(const Tensor& x, Shape new_shape) {
  SDFLOW_CHECK(numel(new_shape) == x.numel(), "reshape " << shape_str(x.shape()) << " -> "
                                                         << shape_str(new_shape)
                                                         << " changes element count");
  std::vector<float> out = x.data();
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node(std::move(new_shape), std::move(out), {x}, [xn, rg](TensorNode& o) {
    if (!rg) return;
    xn->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
  });
}

inline Tensor op_permute(const Tensor& x, const std::vector<int>& perm) {
  SDFLOW_CHECK(static_cast<int>(perm.size()) == x.ndim(), "permute rank mismatch");
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  auto in_strides = strides_of(x.shape());
  // Stride of the output walk expressed in input flat offsets.
  std::vector<int64_t> walk(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) walk[i] = in_strides[perm[i]];
  std::vector<float> out(x.data().size());
  const float* xp = x.data().data();
  int64_t n = x.numel();
  size_t nd = perm.size();
  std::vector<int64_t> idx(nd, 0);
  int64_t src = 0;
  for (int64_t oi = 0; oi < n; ++oi) {
    out[oi] = xp[src];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      idx[d]++;
      src += walk[d];
      if (idx[d] < out_shape[d]) break;
      src -= walk[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node(out_shape, std::move(out), {x}, [xn, rg, out_shape, walk, nd](TensorNode& o) {
    if (!rg) return;
    xn->ensure_grad();
    std::vector<int64_t> idx2(nd, 0);
    int64_t src = 0;
    int64_t n2 = static_cast<int64_t>(o.grad.size());
    for (int64_t oi = 0; oi < n2; ++oi) {
      xn->grad[src] += o.grad[oi];
      for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
        idx2[d]++;
        src += walk[d];
        if (idx2[d] < out_shape[d]) break;
        src -= walk[d] * out_shape[d];
        idx2[d] = 0;
      }
    }
  });
}

inline Tensor op_concat(const std::vector<Tensor>& parts, int axis) {
  SDFLOW_CHECK(!parts.empty(), "concat of zero tensors");
  Shape base = parts[0].shape();
  SDFLOW_CHECK(axis >= 0 && axis < static_cast<int>(base.size()), "concat axis out of range");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    SDFLOW_CHECK(p.ndim() == static_cast<int>(base.size()), "concat rank mismatch");
    for (int d = 0; d < p.ndim(); ++d)
      if (d != axis)
        SDFLOW_CHECK(p.dim(d) == base[d], "concat shape mismatch at axis " << d << ": "
                                              << shape_str(p.shape()) << " vs "
                                              << shape_str(base));
    axis_total += p.dim(axis);
  }
  Shape out_shape = base;
  out_shape[axis] = axis_total;
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= base[d];
  int64_t inner = 1;
  for (size_t d = axis + 1; d < base.size(); ++d) inner *= base[d];
  std::vector<float> out(static_cast<size_t>(numel(out_shape)));
  std::vector<int64_t> offsets;  // axis offset of each part
  {
    int64_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      int64_t pa = p.dim(axis);
      const float* pp = p.data().data();
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + (o * axis_total + off) * inner, pp + o * pa * inner,
                    static_cast<size_t>(pa * inner) * sizeof(float));
      off += pa;
    }
  }
  std::vector<std::shared_ptr<TensorNode>> pnodes;
  std::vector<bool> prg;
  std::vector<int64_t> psizes;
  for (const auto& p : parts) {
    pnodes.push_back(p.node());
    prg.push_back(p.requires_grad());
    psizes.push_back(p.dim(axis));
  }
  return make_node(out_shape, std::move(out), parts,
                   [pnodes, prg, psizes, offsets, outer, inner, axis_total](TensorNode& o) {
                     for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                       if (!prg[pi]) continue;
                       pnodes[pi]->ensure_grad();
                       int64_t pa = psizes[pi], off = offsets[pi];
                       for (int64_t ou = 0; ou < outer; ++ou) {
                         const float* gsrc = o.grad.data() + (ou * axis_total + off) * inner;
                         float* gdst = pnodes[pi]->grad.data() + ou * pa * inner;
                         for (int64_t i = 0; i < pa * inner; ++i) gdst[i] += gsrc[i];
                       }
                     }
                   });
}

inline Tensor op_slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  SDFLOW_CHECK(axis >= 0 && axis < x.ndim(), "slice axis out of range");
  SDFLOW_CHECK(start >= 0 && len >= 1 && start + len <= x.dim(axis),
               "slice [" << start << "," << start + len << ") out of bounds for axis size "
                         << x.dim(axis));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  int64_t inner = 1;
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  int64_t ax = x.dim(axis);
  std::vector<float> out(static_cast<size_t>(outer * len * inner));
  const float* xp = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, xp + (o * ax + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(float));
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node(out_shape, std::move(out), {x},
                   [xn, rg, outer, inner, ax, start, len](TensorNode& o) {
                     if (!rg) return;
                     xn->ensure_grad();
                     for (int64_t ou = 0; ou < outer; ++ou) {
                       const float* gsrc = o.grad.data() + ou * len * inner;
                       float* gdst = xn->grad.data() + (ou * ax + start) * inner;
                       for (int64_t i = 0; i < len * inner; ++i) gdst[i] += gsrc[i];
                     }
                   });
}

// Zero padding appended at the end of each axis.
inline Tensor op_pad_end(const Tensor& x, const std::vector<int64_t>& pad_after) {
  SDFLOW_CHECK(static_cast<int>(pad_after.size()) == x.ndim(), "pad rank mismatch");
  Shape out_shape = x.shape();
  bool noop = true;
  for (size_t d = 0; d < pad_after.size(); ++d) {
    SDFLOW_CHECK(pad_after[d] >= 0, "negative padding");
    out_shape[d] += pad_after[d];
    noop = noop && pad_after[d] == 0;
  }
  if (noop) return op_reshape(x, out_shape);
  std::vector<float> out(static_cast<size_t>(numel(out_shape)), 0.0f);
  auto out_strides = strides_of(out_shape);
  auto in_shape = x.shape();
  const float* xp = x.data().data();
  size_t nd = in_shape.size();
  std::vector<int64_t> idx(nd, 0);
  int64_t dst = 0;
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    out[dst] = xp[i];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      idx[d]++;
      dst += out_strides[d];
      if (idx[d] < in_shape[d]) break;
      dst -= out_strides[d] * in_shape[d];
      idx[d] = 0;
    }
  }
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node(out_shape, std::move(out), {x},
                   [xn, rg, in_shape, out_strides, nd](TensorNode& o) {
                     if (!rg) return;
                     xn->ensure_grad();
                     std::vector<int64_t> idx2(nd, 0);
                     int64_t src = 0;
                     int64_t n2 = static_cast<int64_t>(xn->grad.size());
                     for (int64_t i = 0; i < n2; ++i) {
                       xn->grad[i] += o.grad[src];
                       for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                         idx2[d]++;
                         src += out_strides[d];
                         if (idx2[d] < in_shape[d]) break;
                         src -= out_strides[d] * in_shape[d];
                         idx2[d] = 0;
                       }
                     }
                   });
}

// Keeps the leading region of each axis.
inline Tensor op_crop_to(const Tensor& x, const Shape& new_sizes) {
  SDFLOW_CHECK(static_cast<int>(new_sizes.size()) == x.ndim(), "crop rank mismatch");
  bool noop = true;
  for (int d = 0; d < x.ndim(); ++d) {
    SDFLOW_CHECK(new_sizes[d] >= 1 && new_sizes[d] <= x.dim(d), "crop size out of range");
    noop = noop && new_sizes[d] == x.dim(d);
  }
  if (noop) return op_reshape(x, x.shape());
  Tensor cur = x;
  for (int d = 0; d < x.ndim(); ++d)
    if (new_sizes[d] != cur.dim(d)) cur = op_slice(cur, d, 0, new_sizes[d]);
  return cur;
}

// Cyclic roll: element at index i moves to (i + shift) mod size along each axis.
inline Tensor op_roll(const Tensor& x, const std::vector<int64_t>& shifts) {
  SDFLOW_CHECK(static_cast<int>(shifts.size()) == x.ndim(), "roll rank mismatch");
  const Shape& shape = x.shape();
  std::vector<int64_t> norm(shifts.size());
  bool noop = true;
  for (size_t d = 0; d < shifts.size(); ++d) {
    int64_t s = shifts[d] % shape[d];
    if (s < 0) s += shape[d];
    norm[d] = s;
    noop = noop && s == 0;
  }
  if (noop) return op_reshape(x, shape);
  auto st = strides_of(shape);
  size_t nd = shape.size();
  // Destination offset contributed by each axis position.
  std::vector<std::vector<int64_t>> amap(nd);
  for (size_t d = 0; d < nd; ++d) {
    amap[d].resize(static_cast<size_t>(shape[d]));
    for (int64_t i = 0; i < shape[d]; ++i)
      amap[d][static_cast<size_t>(i)] = ((i + norm[d]) % shape[d]) * st[d];
  }
  auto walk = [shape_c = shape, amap, nd](const std::function<void(int64_t, int64_t)>& fn) {
    std::vector<int64_t> idx(nd, 0);
    int64_t dst = 0;
    for (size_t d = 0; d < nd; ++d) dst += amap[d][0];
    int64_t n = numel(shape_c);
    for (int64_t i = 0; i < n; ++i) {
      fn(i, dst);
      for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
        int64_t old = idx[d]++;
        if (idx[d] < shape_c[d]) {
          dst += amap[d][static_cast<size_t>(idx[d])] - amap[d][static_cast<size_t>(old)];
          break;
        }
        idx[d] = 0;
        dst += amap[d][0] - amap[d][static_cast<size_t>(old)];
      }
    }
  };
  std::vector<float> out(x.data().size());
  const float* xp = x.data().data();
  walk([&](int64_t src, int64_t dst) { out[dst] = xp[src]; });
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node(shape, std::move(out), {x}, [xn, rg, walk](TensorNode& o) {
    if (!rg) return;
    xn->ensure_grad();
    walk([&](int64_t src, int64_t dst) { xn->grad[src] += o.grad[dst]; });
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor op_sum_axis(const Tensor& x, int axis, bool keepdim = false) {
  SDFLOW_CHECK(axis >= 0 && axis < x.ndim(), "sum_axis axis out of range");
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  int64_t n = x.dim(axis);
  int64_t inner = 1;
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  Shape out_shape;
  for (int d = 0; d < x.ndim(); ++d) {
    if (d == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(d));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<float> out(static_cast<size_t>(outer * inner), 0.0f);
  const float* xp = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k) {
      const float* row = xp + (o * n + k) * inner;
      float* orow = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) orow[i] += row[i];
    }
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node(out_shape, std::move(out), {x}, [xn, rg, outer, n, inner](TensorNode& o) {
    if (!rg) return;
    xn->ensure_grad();
    for (int64_t ou = 0; ou < outer; ++ou)
      for (int64_t k = 0; k < n; ++k) {
        float* grow = xn->grad.data() + (ou * n + k) * inner;
        const float* gsrc = o.grad.data() + ou * inner;
        for (int64_t i = 0; i < inner; ++i) grow[i] += gsrc[i];
      }
  });
}

inline Tensor op_mean_axis(const Tensor& x, int axis, bool keepdim = false) {
  return op_scalar_mul(op_sum_axis(x, axis, keepdim), 1.0f / static_cast<float>(x.dim(axis)));
}

inline Tensor op_sum_all(const Tensor& x) {
  float acc = 0.0f;
  for (float v : x.data()) acc += v;
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node({1}, {acc}, {x}, [xn, rg](TensorNode& o) {
    if (!rg) return;
    xn->ensure_grad();
    float g = o.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
}

// ---------------------------------------------------------------------------
// Spike threshold (Heaviside with surrogate backward)
// ---------------------------------------------------------------------------

// threshold: scalar tensor, leading-axis vector (length x.dim(0)), or same
// shape as x. Fires at exact threshold (>=). Backward multiplies the incoming
// gradient by the surrogate derivative g(x - threshold); the threshold
// receives -g.
inline Tensor op_heaviside(const Tensor& x, const Tensor& threshold, const SurrogateSpec& sg) {
  enum class Mode { Scalar, Leading, Full } mode;
  if (threshold.numel() == 1) {
    mode = Mode::Scalar;
  } else if (threshold.ndim() == 1 && x.ndim() >= 1 && threshold.dim(0) == x.dim(0)) {
    mode = Mode::Leading;
  } else if (threshold.shape() == x.shape()) {
    mode = Mode::Full;
  } else {
    fail("heaviside threshold shape " + shape_str(threshold.shape()) +
         " is not broadcastable to " + shape_str(x.shape()));
  }
  int64_t lead = x.ndim() >= 1 ? x.dim(0) : 1;
  int64_t inner = x.numel() / lead;
  std::vector<float> out(x.data().size());
  const float* xp = x.data().data();
  const float* tp = threshold.data().data();
  auto th_at = [&](int64_t i) -> float {
    switch (mode) {
      case Mode::Scalar: return tp[0];
      case Mode::Leading: return tp[i / inner];
      default: return tp[i];
    }
  };
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = xp[i] >= th_at(i) ? 1.0f : 0.0f;
  auto xn = x.node();
  auto tn = threshold.node();
  bool x_rg = x.requires_grad(), t_rg = threshold.requires_grad();
  return make_node(x.shape(), std::move(out), {x, threshold},
                   [xn, tn, x_rg, t_rg, mode, inner, sg](TensorNode& o) {
                     if (!x_rg && !t_rg) return;
                     if (x_rg) xn->ensure_grad();
                     if (t_rg) tn->ensure_grad();
                     int64_t n = static_cast<int64_t>(o.grad.size());
                     for (int64_t i = 0; i < n; ++i) {
                       float th;
                       int64_t ti;
                       switch (mode) {
                         case Mode::Scalar: ti = 0; break;
                         case Mode::Leading: ti = i / inner; break;
                         default: ti = i; break;
                       }
                       th = tn->value[ti];
                       float s = sg.derivative(xn->value[i] - th) * o.grad[i];
                       if (x_rg) xn->grad[i] += s;
                       if (t_rg) tn->grad[ti] -= s;
                     }
                   });
}

inline Tensor op_heaviside(const Tensor& x, float threshold, const SurrogateSpec& sg) {
  return op_heaviside(x, Tensor::scalar(threshold), sg);
}

// ---------------------------------------------------------------------------
// Table lookup (relative position bias, per-token parameter maps)
// ---------------------------------------------------------------------------

// table: (R, C); indices: flat row ids. Output (len(indices), C).
inline Tensor op_gather_rows(const Tensor& table, const std::vector<int64_t>& indices) {
  SDFLOW_CHECK(table.ndim() == 2, "gather_rows expects a 2-d table");
  int64_t R = table.dim(0), C = table.dim(1);
  std::vector<float> out(indices.size() * static_cast<size_t>(C));
  const float* tp = table.data().data();
  for (size_t i = 0; i < indices.size(); ++i) {
    int64_t r = indices[i];
    SDFLOW_CHECK(r >= 0 && r < R, "gather_rows index " << r << " out of range [0," << R << ")");
    std::memcpy(out.data() + i * C, tp + r * C, static_cast<size_t>(C) * sizeof(float));
  }
  auto tn = table.node();
  bool rg = table.requires_grad();
  return make_node({static_cast<int64_t>(indices.size()), C}, std::move(out), {table},
                   [tn, rg, indices, C](TensorNode& o) {
                     if (!rg) return;
                     tn->ensure_grad();
                     for (size_t i = 0; i < indices.size(); ++i) {
                       const float* gsrc = o.grad.data() + i * C;
                       float* gdst = tn->grad.data() + indices[i] * C;
                       for (int64_t c = 0; c < C; ++c) gdst[c] += gsrc[c];
                     }
                   });
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (align_corners = false)
// ---------------------------------------------------------------------------

inline Tensor op_upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  SDFLOW_CHECK(x.ndim() == 4, "upsample expects (N,C,H,W)");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  SDFLOW_CHECK(out_h >= 1 && out_w >= 1, "upsample target must be positive");
  float sy = static_cast<float>(H) / static_cast<float>(out_h);
  float sx = static_cast<float>(W) / static_cast<float>(out_w);
  // Precompute interpolation taps per output row/col.
  std::vector<int64_t> y0(out_h), x0(out_w);
  std::vector<float> wy(out_h), wx(out_w);
  for (int64_t oy = 0; oy < out_h; ++oy) {
    float src = (static_cast<float>(oy) + 0.5f) * sy - 0.5f;
    if (src < 0) src = 0;
    int64_t i0 = static_cast<int64_t>(src);
    if (i0 > H - 1) i0 = H - 1;
    y0[oy] = i0;
    wy[oy] = (i0 < H - 1) ? (src - static_cast<float>(i0)) : 0.0f;
  }
  for (int64_t ox = 0; ox < out_w; ++ox) {
    float src = (static_cast<float>(ox) + 0.5f) * sx - 0.5f;
    if (src < 0) src = 0;
    int64_t i0 = static_cast<int64_t>(src);
    if (i0 > W - 1) i0 = W - 1;
    x0[ox] = i0;
    wx[ox] = (i0 < W - 1) ? (src - static_cast<float>(i0)) : 0.0f;
  }
  std::vector<float> out(static_cast<size_t>(N * C * out_h * out_w));
  const float* xp = x.data().data();
  parallel_for(N * C, [&](int64_t lo, int64_t hi) {
    for (int64_t nc = lo; nc < hi; ++nc) {
      const float* plane = xp + nc * H * W;
      float* oplane = out.data() + nc * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        int64_t iy = y0[oy];
        int64_t iy1 = std::min(iy + 1, H - 1);
        float fy = wy[oy];
        for (int64_t ox = 0; ox < out_w; ++ox) {
          int64_t ix = x0[ox];
          int64_t ix1 = std::min(ix + 1, W - 1);
          float fx = wx[ox];
          float v00 = plane[iy * W + ix], v01 = plane[iy * W + ix1];
          float v10 = plane[iy1 * W + ix], v11 = plane[iy1 * W + ix1];
          oplane[oy * out_w + ox] = v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx +
                                    v10 * fy * (1 - fx) + v11 * fy * fx;
        }
      }
    }
  });
  auto xn = x.node();
  bool rg = x.requires_grad();
  return make_node({N, C, out_h, out_w}, std::move(out), {x},
                   [xn, rg, N, C, H, W, out_h, out_w, y0, x0, wy, wx](TensorNode& o) {
                     if (!rg) return;
                     xn->ensure_grad();
                     parallel_for(N * C, [&](int64_t lo, int64_t hi) {
                       for (int64_t nc = lo; nc < hi; ++nc) {
                         float* gplane = xn->grad.data() + nc * H * W;
                         const float* gout = o.grad.data() + nc * out_h * out_w;
                         for (int64_t oy = 0; oy < out_h; ++oy) {
                           int64_t iy = y0[oy];
                           int64_t iy1 = std::min(iy + 1, H - 1);
                           float fy = wy[oy];
                           for (int64_t ox = 0; ox < out_w; ++ox) {
                             int64_t ix = x0[ox];
                             int64_t ix1 = std::min(ix + 1, W - 1);
                             float fx = wx[ox];
                             float g = gout[oy * out_w + ox];
                             gplane[iy * W + ix] += g * (1 - fy) * (1 - fx);
                             gplane[iy * W + ix1] += g * (1 - fy) * fx;
                             gplane[iy1 * W + ix] += g * fy * (1 - fx);
                             gplane[iy1 * W + ix1] += g * fy * fx;
                           }
                         }
                       }
                     });
                   });
}

}  // namespace sdflow
