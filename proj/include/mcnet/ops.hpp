#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <mutex>
#include <vector>

#include <cblas.h>

#include "tensor.hpp"

extern "C" void openblas_set_num_threads(int);

namespace mcnet {

enum class UpsampleMode { nearest, bilinear };

namespace detail {

inline void ensure_blas_setup() {
  static std::once_flag flag;
  std::call_once(flag, [] { openblas_set_num_threads(1); });
}

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  ensure_blas_setup();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
  ensure_blas_setup();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// Grow-only scratch buffers; closures run sequentially and never nest ops, so
// a handful of slots per thread is enough.
template <typename T>
std::vector<T>& scratch(int slot, std::size_t n) {
  thread_local std::array<std::vector<T>, 6> bufs;
  auto& b = bufs[static_cast<std::size_t>(slot)];
  if (b.size() < n) b.resize(n);
  return b;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

template <typename T>
void require_4d(const Tensor<T>& x, const char* op) {
  if (x.ndim() != 4) throw ConfigError(std::string(op) + ": expected a 4-d tensor [B,C,H,W]");
}

// x^e for integer e >= 0.
template <typename T>
T powi(T x, int e) {
  T r = T(1);
  for (int i = 0; i < e; ++i) r *= x;
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  bool rec = g.should_record({a, b});
  out.set_requires_grad(rec);
  auto fwd = [a, b, out]() mutable {
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  };
  fwd();
  if (rec) {
    g.record({{a, b},
              out,
              fwd,
              [a, b, out]() mutable {
                const auto& og = out.grad();
                if (a.requires_grad()) {
                  auto& ag = a.grad();
                  for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
                }
                if (b.requires_grad()) {
                  auto& bg = b.grad();
                  for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
                }
              }});
  }
  return out;
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  bool rec = g.should_record({a, b});
  out.set_requires_grad(rec);
  auto fwd = [a, b, out]() mutable {
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  };
  fwd();
  if (rec) {
    g.record({{a, b},
              out,
              fwd,
              [a, b, out]() mutable {
                const auto& og = out.grad();
                if (a.requires_grad()) {
                  auto& ag = a.grad();
                  for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
                }
                if (b.requires_grad()) {
                  auto& bg = b.grad();
                  for (std::size_t i = 0; i < og.size(); ++i) bg[i] -= og[i];
                }
              }});
  }
  return out;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  bool rec = g.should_record({a, b});
  out.set_requires_grad(rec);
  auto fwd = [a, b, out]() mutable {
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  };
  fwd();
  if (rec) {
    g.record({{a, b},
              out,
              fwd,
              [a, b, out]() mutable {
                const auto& og = out.grad();
                if (a.requires_grad()) {
                  auto& ag = a.grad();
                  const auto& bv = b.values();
                  for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * bv[i];
                }
                if (b.requires_grad()) {
                  auto& bg = b.grad();
                  const auto& av = a.values();
                  for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i] * av[i];
                }
              }});
  }
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto fwd = [x, out, c]() mutable {
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = c * xv[i];
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out, c]() mutable {
                const auto& og = out.grad();
                auto& xg = x.grad();
                for (std::size_t i = 0; i < og.size(); ++i) xg[i] += c * og[i];
              }});
  }
  return out;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto fwd = [x, out]() mutable {
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out]() mutable {
                const auto& og = out.grad();
                const auto& xv = x.values();
                auto& xg = x.grad();
                for (std::size_t i = 0; i < og.size(); ++i)
                  if (xv[i] > T(0)) xg[i] += og[i];
              }});
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto fwd = [x, out]() mutable {
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
      T v = xv[i];
      ov[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                        : std::exp(v) / (T(1) + std::exp(v));
    }
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out]() mutable {
                const auto& og = out.grad();
                const auto& ov = out.values();
                auto& xg = x.grad();
                for (std::size_t i = 0; i < og.size(); ++i)
                  xg[i] += og[i] * ov[i] * (T(1) - ov[i]);
              }});
  }
  return out;
}

// Softmax across dim 1 of [B,C,H,W].
template <typename T>
Tensor<T> softmax_channels(Graph<T>& g, const Tensor<T>& x) {
  detail::require_4d(x, "softmax_channels");
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto fwd = [x, out, b, c, hw]() mutable {
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int bi = 0; bi < b; ++bi)
      for (int p = 0; p < hw; ++p) {
        const std::size_t base = (static_cast<std::size_t>(bi) * c) * hw + p;
        T mx = xv[base];
        for (int ci = 1; ci < c; ++ci)
          mx = std::max(mx, xv[base + static_cast<std::size_t>(ci) * hw]);
        T sum = T(0);
        for (int ci = 0; ci < c; ++ci) {
          std::size_t idx = base + static_cast<std::size_t>(ci) * hw;
          T e = std::exp(xv[idx] - mx);
          ov[idx] = e;
          sum += e;
        }
        for (int ci = 0; ci < c; ++ci) ov[base + static_cast<std::size_t>(ci) * hw] /= sum;
      }
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out, b, c, hw]() mutable {
                const auto& og = out.grad();
                const auto& ov = out.values();
                auto& xg = x.grad();
                for (int bi = 0; bi < b; ++bi)
                  for (int p = 0; p < hw; ++p) {
                    const std::size_t base = (static_cast<std::size_t>(bi) * c) * hw + p;
                    T dot = T(0);
                    for (int ci = 0; ci < c; ++ci) {
                      std::size_t idx = base + static_cast<std::size_t>(ci) * hw;
                      dot += og[idx] * ov[idx];
                    }
                    for (int ci = 0; ci < c; ++ci) {
                      std::size_t idx = base + static_cast<std::size_t>(ci) * hw;
                      xg[idx] += ov[idx] * (og[idx] - dot);
                    }
                  }
              }});
  }
  return out;
}

// Value copy severed from the graph: gradients never flow back through it.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.detached_copy();
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> out({1});
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto fwd = [x, out]() mutable {
    T s = T(0);
    for (T v : x.values()) s += v;
    out.values()[0] = s;
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out]() mutable {
                T go = out.grad()[0];
                auto& xg = x.grad();
                for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += go;
              }});
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(Graph<T>& g, const Tensor<T>& x) {
  const T inv_n = T(1) / static_cast<T>(x.size());
  Tensor<T> out({1});
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto fwd = [x, out, inv_n]() mutable {
    T s = T(0);
    for (T v : x.values()) s += v;
    out.values()[0] = s * inv_n;
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out, inv_n]() mutable {
                T go = out.grad()[0] * inv_n;
                auto& xg = x.grad();
                for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += go;
              }});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structure: concat / slice
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_4d(a, "concat_channels");
  detail::require_4d(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ConfigError("concat_channels: non-channel dims differ: " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  const int bn = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out({bn, ca + cb, a.dim(2), a.dim(3)});
  bool rec = g.should_record({a, b});
  out.set_requires_grad(rec);
  auto fwd = [a, b, out, bn, ca, cb, hw]() mutable {
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    const std::size_t sa = static_cast<std::size_t>(ca) * hw;
    const std::size_t sb = static_cast<std::size_t>(cb) * hw;
    for (int bi = 0; bi < bn; ++bi) {
      std::memcpy(ov.data() + bi * (sa + sb), av.data() + bi * sa, sa * sizeof(T));
      std::memcpy(ov.data() + bi * (sa + sb) + sa, bv.data() + bi * sb, sb * sizeof(T));
    }
  };
  fwd();
  if (rec) {
    g.record({{a, b},
              out,
              fwd,
              [a, b, out, bn, ca, cb, hw]() mutable {
                const auto& og = out.grad();
                const std::size_t sa = static_cast<std::size_t>(ca) * hw;
                const std::size_t sb = static_cast<std::size_t>(cb) * hw;
                for (int bi = 0; bi < bn; ++bi) {
                  const T* src = og.data() + bi * (sa + sb);
                  if (a.requires_grad()) {
                    T* dst = a.grad().data() + bi * sa;
                    for (std::size_t i = 0; i < sa; ++i) dst[i] += src[i];
                  }
                  if (b.requires_grad()) {
                    T* dst = b.grad().data() + bi * sb;
                    for (std::size_t i = 0; i < sb; ++i) dst[i] += src[i + sa];
                  }
                }
              }});
  }
  return out;
}

// Contiguous sub-range of the batch dimension.
template <typename T>
Tensor<T> slice_batch(Graph<T>& g, const Tensor<T>& x, int start, int count) {
  if (x.ndim() < 1 || start < 0 || count <= 0 || start + count > x.dim(0))
    throw ConfigError("slice_batch: range [" + std::to_string(start) + "," +
                      std::to_string(start + count) + ") outside batch of " +
                      std::to_string(x.ndim() ? x.dim(0) : 0));
  std::vector<int> oshape = x.shape();
  oshape[0] = count;
  const std::size_t stride = shape_numel(oshape) / static_cast<std::size_t>(count);
  Tensor<T> out(oshape);
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto fwd = [x, out, start, stride]() mutable {
    std::memcpy(out.values().data(), x.values().data() + start * stride,
                out.size() * sizeof(T));
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out, start, stride]() mutable {
                const auto& og = out.grad();
                T* xg = x.grad().data() + start * stride;
                for (std::size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
              }});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool2d(Graph<T>& g, const Tensor<T>& x) {
  detail::require_4d(x, "max_pool2d");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw DataError("max_pool2d: H and W must be multiples of 2, got " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor<T> out({b, c, ho, wo});
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto fwd = [x, out, argmax, b, c, h, w, ho, wo]() mutable {
    const auto& xv = x.values();
    auto& ov = out.values();
    std::size_t o = 0;
    for (int bc = 0; bc < b * c; ++bc) {
      const std::size_t plane = static_cast<std::size_t>(bc) * h * w;
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j, ++o) {
          std::size_t i00 = plane + (2 * i) * static_cast<std::size_t>(w) + 2 * j;
          std::size_t best = i00;
          T bv = xv[i00];
          if (xv[i00 + 1] > bv) { bv = xv[i00 + 1]; best = i00 + 1; }
          if (xv[i00 + w] > bv) { bv = xv[i00 + w]; best = i00 + w; }
          if (xv[i00 + w + 1] > bv) { bv = xv[i00 + w + 1]; best = i00 + w + 1; }
          ov[o] = bv;
          (*argmax)[o] = best;
        }
    }
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out, argmax]() mutable {
                const auto& og = out.grad();
                auto& xg = x.grad();
                for (std::size_t o = 0; o < og.size(); ++o) xg[(*argmax)[o]] += og[o];
              }});
  }
  return out;
}

namespace detail {

// Half-pixel-center source coordinates with clamp-to-edge, precomputed per axis.
template <typename T>
void bilinear_axis(int n_out, int n_in, int factor, std::vector<int>& i0, std::vector<int>& i1,
                   std::vector<T>& w1) {
  i0.resize(n_out);
  i1.resize(n_out);
  w1.resize(n_out);
  for (int i = 0; i < n_out; ++i) {
    double src = (i + 0.5) / factor - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(n_in - 1));
    int lo = static_cast<int>(std::floor(src));
    int hi = std::min(lo + 1, n_in - 1);
    i0[i] = lo;
    i1[i] = hi;
    w1[i] = static_cast<T>(src - lo);
  }
}

}  // namespace detail

template <typename T>
Tensor<T> upsample(Graph<T>& g, const Tensor<T>& x, int factor, UpsampleMode mode) {
  detail::require_4d(x, "upsample");
  if (factor < 1) throw ConfigError("upsample: factor must be >= 1");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * factor, wo = w * factor;
  Tensor<T> out({b, c, ho, wo});
  bool rec = g.should_record({x});
  out.set_requires_grad(rec);
  if (mode == UpsampleMode::nearest) {
    auto fwd = [x, out, b, c, h, w, ho, wo, factor]() mutable {
      const auto& xv = x.values();
      auto& ov = out.values();
      std::size_t o = 0;
      for (int bc = 0; bc < b * c; ++bc) {
        const std::size_t plane = static_cast<std::size_t>(bc) * h * w;
        for (int i = 0; i < ho; ++i) {
          const std::size_t row = plane + static_cast<std::size_t>(i / factor) * w;
          for (int j = 0; j < wo; ++j, ++o) ov[o] = xv[row + j / factor];
        }
      }
    };
    fwd();
    if (rec) {
      g.record({{x},
                out,
                fwd,
                [x, out, b, c, h, w, ho, wo, factor]() mutable {
                  const auto& og = out.grad();
                  auto& xg = x.grad();
                  std::size_t o = 0;
                  for (int bc = 0; bc < b * c; ++bc) {
                    const std::size_t plane = static_cast<std::size_t>(bc) * h * w;
                    for (int i = 0; i < ho; ++i) {
                      const std::size_t row = plane + static_cast<std::size_t>(i / factor) * w;
                      for (int j = 0; j < wo; ++j, ++o) xg[row + j / factor] += og[o];
                    }
                  }
                }});
    }
    return out;
  }
  // bilinear
  auto iy0 = std::make_shared<std::vector<int>>();
  auto iy1 = std::make_shared<std::vector<int>>();
  auto wy = std::make_shared<std::vector<T>>();
  auto ix0 = std::make_shared<std::vector<int>>();
  auto ix1 = std::make_shared<std::vector<int>>();
  auto wx = std::make_shared<std::vector<T>>();
  detail::bilinear_axis<T>(ho, h, factor, *iy0, *iy1, *wy);
  detail::bilinear_axis<T>(wo, w, factor, *ix0, *ix1, *wx);
  auto fwd = [x, out, b, c, h, w, ho, wo, iy0, iy1, wy, ix0, ix1, wx]() mutable {
    const auto& xv = x.values();
    auto& ov = out.values();
    std::size_t o = 0;
    for (int bc = 0; bc < b * c; ++bc) {
      const std::size_t plane = static_cast<std::size_t>(bc) * h * w;
      for (int i = 0; i < ho; ++i) {
        const std::size_t r0 = plane + static_cast<std::size_t>((*iy0)[i]) * w;
        const std::size_t r1 = plane + static_cast<std::size_t>((*iy1)[i]) * w;
        const T fy = (*wy)[i];
        for (int j = 0; j < wo; ++j, ++o) {
          const int j0 = (*ix0)[j], j1 = (*ix1)[j];
          const T fx = (*wx)[j];
          const T top = xv[r0 + j0] + fx * (xv[r0 + j1] - xv[r0 + j0]);
          const T bot = xv[r1 + j0] + fx * (xv[r1 + j1] - xv[r1 + j0]);
          ov[o] = top + fy * (bot - top);
        }
      }
    }
  };
  fwd();
  if (rec) {
    g.record({{x},
              out,
              fwd,
              [x, out, b, c, h, w, ho, wo, iy0, iy1, wy, ix0, ix1, wx]() mutable {
                const auto& og = out.grad();
                auto& xg = x.grad();
                std::size_t o = 0;
                for (int bc = 0; bc < b * c; ++bc) {
                  const std::size_t plane = static_cast<std::size_t>(bc) * h * w;
                  for (int i = 0; i < ho; ++i) {
                    const std::size_t r0 = plane + static_cast<std::size_t>((*iy0)[i]) * w;
                    const std::size_t r1 = plane + static_cast<std::size_t>((*iy1)[i]) * w;
                    const T fy = (*wy)[i];
                    for (int j = 0; j < wo; ++j, ++o) {
                      const int j0 = (*ix0)[j], j1 = (*ix1)[j];
                      const T fx = (*wx)[j];
                      const T go = og[o];
                      xg[r0 + j0] += go * (T(1) - fy) * (T(1) - fx);
                      xg[r0 + j1] += go * (T(1) - fy) * fx;
                      xg[r1 + j0] += go * fy * (T(1) - fx);
                      xg[r1 + j1] += go * fy * fx;
                    }
                  }
                }
              }});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

// col has layout [Cin*kH*kW, Ho*Wo], one batch item at a time.
template <typename T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo,
            T* col) {
  for (int c = 0; c < cin; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) *
                           (static_cast<std::size_t>(ho) * wo);
        for (int i = 0; i < ho; ++i) {
          const int si = i * stride + ki - pad;
          T* dst = row + static_cast<std::size_t>(i) * wo;
          if (si < 0 || si >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(si) * w;
          for (int j = 0; j < wo; ++j) {
            const int sj = j * stride + kj - pad;
            dst[j] = (sj >= 0 && sj < w) ? src[sj] : T(0);
          }
        }
      }
  }
}

template <typename T>
void col2im_add(const T* col, int cin, int h, int w, int kh, int kw, int stride, int pad, int ho,
                int wo, T* dx) {
  for (int c = 0; c < cin; ++c) {
    T* plane = dx + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) *
                                 (static_cast<std::size_t>(ho) * wo);
        for (int i = 0; i < ho; ++i) {
          const int si = i * stride + ki - pad;
          if (si < 0 || si >= h) continue;
          const T* src = row + static_cast<std::size_t>(i) * wo;
          T* dst = plane + static_cast<std::size_t>(si) * w;
          for (int j = 0; j < wo; ++j) {
            const int sj = j * stride + kj - pad;
            if (sj >= 0 && sj < w) dst[sj] += src[j];
          }
        }
      }
  }
}

}  // namespace detail

// x [B,Cin,H,W], w [Cout,Cin,kH,kW], b [Cout] (pass a default-constructed
// Tensor for no bias) -> [B,Cout,Ho,Wo].
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
  detail::require_4d(x, "conv2d");
  detail::require_4d(w, "conv2d weight");
  if (x.dim(1) != w.dim(1))
    throw ConfigError("conv2d: input channels " + std::to_string(x.dim(1)) +
                      " do not match kernel channels " + std::to_string(w.dim(1)));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(0)))
    throw ConfigError("conv2d: bias shape must be [Cout]");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: invalid stride/pad");
  const int bn = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw ConfigError("conv2d: kernel larger than padded input");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const int k = cin * kh * kw;
  const int n = ho * wo;
  Tensor<T> out({bn, cout, ho, wo});
  std::vector<Tensor<T>> ins = b.defined() ? std::vector<Tensor<T>>{x, w, b}
                                           : std::vector<Tensor<T>>{x, w};
  bool rec = g.should_record(ins);
  out.set_requires_grad(rec);
  auto fwd = [x, w, b, out, bn, cin, h, wd, cout, kh, kw, stride, pad, ho, wo, k, n]() mutable {
    auto& col = detail::scratch<T>(0, static_cast<std::size_t>(k) * n);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int bi = 0; bi < bn; ++bi) {
      detail::im2col(xv.data() + static_cast<std::size_t>(bi) * cin * h * wd, cin, h, wd, kh, kw,
                     stride, pad, ho, wo, col.data());
      T* dst = ov.data() + static_cast<std::size_t>(bi) * cout * n;
      detail::gemm(false, false, cout, n, k, T(1), w.values().data(), k, col.data(), n, T(0), dst,
                   n);
      if (b.defined()) {
        const auto& bv = b.values();
        for (int co = 0; co < cout; ++co) {
          T* row = dst + static_cast<std::size_t>(co) * n;
          const T bias = bv[co];
          for (int i = 0; i < n; ++i) row[i] += bias;
        }
      }
    }
  };
  fwd();
  if (rec) {
    g.record(
        {std::move(ins),
         out,
         fwd,
         [x, w, b, out, bn, cin, h, wd, cout, kh, kw, stride, pad, ho, wo, k, n]() mutable {
           const auto& og = out.grad();
           auto& col = detail::scratch<T>(0, static_cast<std::size_t>(k) * n);
           auto& dcol = detail::scratch<T>(1, static_cast<std::size_t>(k) * n);
           const bool need_dx = x.requires_grad();
           const bool need_dw = w.requires_grad();
           for (int bi = 0; bi < bn; ++bi) {
             const T* dy = og.data() + static_cast<std::size_t>(bi) * cout * n;
             if (need_dw) {
               detail::im2col(x.values().data() + static_cast<std::size_t>(bi) * cin * h * wd,
                              cin, h, wd, kh, kw, stride, pad, ho, wo, col.data());
               detail::gemm(false, true, cout, k, n, T(1), dy, n, col.data(), n, T(1),
                            w.grad().data(), k);
             }
             if (need_dx) {
               detail::gemm(true, false, k, n, cout, T(1), w.values().data(), k, dy, n, T(0),
                            dcol.data(), n);
               detail::col2im_add(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                                  x.grad().data() + static_cast<std::size_t>(bi) * cin * h * wd);
             }
           }
           if (b.defined() && b.requires_grad()) {
             auto& bg = b.grad();
             for (int bi = 0; bi < bn; ++bi) {
               const T* dy = og.data() + static_cast<std::size_t>(bi) * cout * n;
               for (int co = 0; co < cout; ++co) {
                 T s = T(0);
                 const T* row = dy + static_cast<std::size_t>(co) * n;
                 for (int i = 0; i < n; ++i) s += row[i];
                 bg[co] += s;
               }
             }
           }
         }});
  }
  return out;
}

// Transposed convolution with kernel == stride (each output pixel receives
// exactly one contribution, so no checkerboard overlap). x [B,Cin,H,W],
// w [Cin,Cout,k,k] -> [B,Cout,H*k,W*k].
template <typename T>
Tensor<T> transposed_conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& b, int stride) {
  detail::require_4d(x, "transposed_conv2d");
  detail::require_4d(w, "transposed_conv2d weight");
  if (x.dim(1) != w.dim(0))
    throw ConfigError("transposed_conv2d: input channels " + std::to_string(x.dim(1)) +
                      " do not match kernel channels " + std::to_string(w.dim(0)));
  if (w.dim(2) != stride || w.dim(3) != stride)
    throw ConfigError("transposed_conv2d: kernel must equal stride");
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(1)))
    throw ConfigError("transposed_conv2d: bias shape must be [Cout]");
  const int bn = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(1), k = stride;
  const int ho = h * k, wo = wd * k;
  const int n = h * wd;
  Tensor<T> out({bn, cout, ho, wo});
  std::vector<Tensor<T>> ins = b.defined() ? std::vector<Tensor<T>>{x, w, b}
                                           : std::vector<Tensor<T>>{x, w};
  bool rec = g.should_record(ins);
  out.set_requires_grad(rec);
  // Weight slice for offset (di,dj) is the [Cin,Cout] matrix w[:,:,di,dj];
  // gather it once into contiguous form per call.
  auto fwd = [x, w, b, out, bn, cin, h, wd, cout, k, wo, n]() mutable {
    auto& wmat = detail::scratch<T>(2, static_cast<std::size_t>(cin) * cout);
    auto& tmp = detail::scratch<T>(3, static_cast<std::size_t>(cout) * n);
    const auto& xv = x.values();
    const auto& wv = w.values();
    auto& ov = out.values();
    for (int di = 0; di < k; ++di)
      for (int dj = 0; dj < k; ++dj) {
        for (int ci = 0; ci < cin; ++ci)
          for (int co = 0; co < cout; ++co)
            wmat[static_cast<std::size_t>(ci) * cout + co] =
                wv[((static_cast<std::size_t>(ci) * cout + co) * k + di) * k + dj];
        for (int bi = 0; bi < bn; ++bi) {
          detail::gemm(true, false, cout, n, cin, T(1), wmat.data(), cout,
                       xv.data() + static_cast<std::size_t>(bi) * cin * n, n, T(0), tmp.data(),
                       n);
          for (int co = 0; co < cout; ++co) {
            const T bias = b.defined() ? b.values()[co] : T(0);
            const T* src = tmp.data() + static_cast<std::size_t>(co) * n;
            T* plane = ov.data() + (static_cast<std::size_t>(bi) * cout + co) * (h * k) * wo;
            for (int i = 0; i < h; ++i) {
              T* dst = plane + static_cast<std::size_t>(i * k + di) * wo + dj;
              const T* s = src + static_cast<std::size_t>(i) * wd;
              for (int j = 0; j < wd; ++j) dst[static_cast<std::size_t>(j) * k] = s[j] + bias;
            }
          }
        }
      }
  };
  fwd();
  if (rec) {
    g.record(
        {std::move(ins),
         out,
         fwd,
         [x, w, b, out, bn, cin, h, wd, cout, k, wo, n]() mutable {
           const auto& og = out.grad();
           auto& wmat = detail::scratch<T>(2, static_cast<std::size_t>(cin) * cout);
           auto& dy = detail::scratch<T>(3, static_cast<std::size_t>(cout) * n);
           auto& dwmat = detail::scratch<T>(4, static_cast<std::size_t>(cin) * cout);
           const bool need_dx = x.requires_grad();
           const bool need_dw = w.requires_grad();
           const auto& wv = w.values();
           for (int di = 0; di < k; ++di)
             for (int dj = 0; dj < k; ++dj) {
               if (need_dx)
                 for (int ci = 0; ci < cin; ++ci)
                   for (int co = 0; co < cout; ++co)
                     wmat[static_cast<std::size_t>(ci) * cout + co] =
                         wv[((static_cast<std::size_t>(ci) * cout + co) * k + di) * k + dj];
               if (need_dw) std::fill(dwmat.begin(), dwmat.begin() + cin * cout, T(0));
               for (int bi = 0; bi < bn; ++bi) {
                 // gather strided grad plane into dy [Cout, H*W]
                 for (int co = 0; co < cout; ++co) {
                   const T* plane =
                       og.data() + (static_cast<std::size_t>(bi) * cout + co) * (h * k) * wo;
                   T* dst = dy.data() + static_cast<std::size_t>(co) * n;
                   for (int i = 0; i < h; ++i) {
                     const T* src = plane + static_cast<std::size_t>(i * k + di) * wo + dj;
                     T* d = dst + static_cast<std::size_t>(i) * wd;
                     for (int j = 0; j < wd; ++j) d[j] = src[static_cast<std::size_t>(j) * k];
                   }
                 }
                 if (need_dx)
                   detail::gemm(false, false, cin, n, cout, T(1), wmat.data(), cout, dy.data(), n,
                                T(1), x.grad().data() + static_cast<std::size_t>(bi) * cin * n,
                                n);
                 if (need_dw)
                   detail::gemm(false, true, cin, cout, n, T(1),
                                x.values().data() + static_cast<std::size_t>(bi) * cin * n, n,
                                dy.data(), n, T(1), dwmat.data(), cout);
                 if (b.defined() && b.requires_grad()) {
                   auto& bg = b.grad();
                   for (int co = 0; co < cout; ++co) {
                     T s = T(0);
                     const T* row = dy.data() + static_cast<std::size_t>(co) * n;
                     for (int i = 0; i < n; ++i) s += row[i];
                     bg[co] += s;
                   }
                 }
               }
               if (need_dw) {
                 auto& wg = w.grad();
                 for (int ci = 0; ci < cin; ++ci)
                   for (int co = 0; co < cout; ++co)
                     wg[((static_cast<std::size_t>(ci) * cout + co) * k + di) * k + dj] +=
                         dwmat[static_cast<std::size_t>(ci) * cout + co];
               }
             }
         }});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization (per channel over B,H,W)
// ---------------------------------------------------------------------------

// Training mode normalizes with batch statistics (population variance) and
// updates the running buffers in place at call time -- the recorded forward
// closure is pure, so replaying the tape does not double-apply the update.
template <typename T>
Tensor<T> batch_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                     bool training, T momentum, T eps) {
  detail::require_4d(x, "batch_norm");
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c ||
      running_mean.dim(0) != c || running_var.dim(0) != c)
    throw ConfigError("batch_norm: parameter shapes must be [C] with C=" + std::to_string(c));
  const std::size_t cn = static_cast<std::size_t>(c);
  const T n = static_cast<T>(b) * static_cast<T>(hw);
  Tensor<T> out(x.shape());
  bool rec = g.should_record({x, gamma, beta});
  out.set_requires_grad(rec);

  auto mean = std::make_shared<std::vector<T>>(cn);
  auto inv_std = std::make_shared<std::vector<T>>(cn);

  if (training) {
    auto stats = [x, mean, inv_std, b, c, hw, n, eps](std::vector<T>* var_out) {
      const auto& xv = x.values();
      for (int ci = 0; ci < c; ++ci) {
        T s = T(0);
        for (int bi = 0; bi < b; ++bi) {
          const T* p = xv.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
          for (int i = 0; i < hw; ++i) s += p[i];
        }
        const T mu = s / n;
        T v = T(0);
        for (int bi = 0; bi < b; ++bi) {
          const T* p = xv.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
          for (int i = 0; i < hw; ++i) {
            const T d = p[i] - mu;
            v += d * d;
          }
        }
        v /= n;
        (*mean)[ci] = mu;
        (*inv_std)[ci] = T(1) / std::sqrt(v + eps);
        if (var_out) (*var_out)[ci] = v;
      }
    };
    auto fwd = [x, gamma, beta, out, mean, inv_std, stats, b, c, hw]() mutable {
      stats(nullptr);
      const auto& xv = x.values();
      auto& ov = out.values();
      for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
          const std::size_t off = (static_cast<std::size_t>(bi) * c + ci) * hw;
          const T mu = (*mean)[ci], is = (*inv_std)[ci];
          const T ga = gamma.values()[ci], be = beta.values()[ci];
          for (int i = 0; i < hw; ++i) ov[off + i] = ga * (xv[off + i] - mu) * is + be;
        }
    };
    // Side effect outside the closure: compute stats once more for the running
    // buffers so replay() stays pure.
    {
      std::vector<T> var(cn);
      stats(&var);
      auto& rm = running_mean.values();
      auto& rv = running_var.values();
      for (int ci = 0; ci < c; ++ci) {
        rm[ci] = momentum * rm[ci] + (T(1) - momentum) * (*mean)[ci];
        rv[ci] = momentum * rv[ci] + (T(1) - momentum) * var[ci];
      }
    }
    fwd();
    if (rec) {
      g.record({{x, gamma, beta},
                out,
                fwd,
                [x, gamma, beta, out, mean, inv_std, b, c, hw, n]() mutable {
                  const auto& og = out.grad();
                  const auto& xv = x.values();
                  for (int ci = 0; ci < c; ++ci) {
                    const T mu = (*mean)[ci], is = (*inv_std)[ci];
                    T sum_dy = T(0), sum_dy_xhat = T(0);
                    for (int bi = 0; bi < b; ++bi) {
                      const std::size_t off = (static_cast<std::size_t>(bi) * c + ci) * hw;
                      for (int i = 0; i < hw; ++i) {
                        const T dy = og[off + i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (xv[off + i] - mu) * is;
                      }
                    }
                    if (gamma.requires_grad()) gamma.grad()[ci] += sum_dy_xhat;
                    if (beta.requires_grad()) beta.grad()[ci] += sum_dy;
                    if (x.requires_grad()) {
                      auto& xg = x.grad();
                      const T ga = gamma.values()[ci];
                      const T k1 = ga * is / n;
                      for (int bi = 0; bi < b; ++bi) {
                        const std::size_t off = (static_cast<std::size_t>(bi) * c + ci) * hw;
                        for (int i = 0; i < hw; ++i) {
                          const T xhat = (xv[off + i] - mu) * is;
                          xg[off + i] += k1 * (n * og[off + i] - sum_dy - xhat * sum_dy_xhat);
                        }
                      }
                    }
                  }
                }});
    }
    return out;
  }

  // Eval mode: running statistics are constants.
  {
    const auto& rm = running_mean.values();
    const auto& rv = running_var.values();
    for (int ci = 0; ci < c; ++ci) {
      (*mean)[ci] = rm[ci];
      (*inv_std)[ci] = T(1) / std::sqrt(rv[ci] + eps);
    }
  }
  auto fwd = [x, gamma, beta, out, mean, inv_std, b, c, hw]() mutable {
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int bi = 0; bi < b; ++bi)
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t off = (static_cast<std::size_t>(bi) * c + ci) * hw;
        const T mu = (*mean)[ci], is = (*inv_std)[ci];
        const T ga = gamma.values()[ci], be = beta.values()[ci];
        for (int i = 0; i < hw; ++i) ov[off + i] = ga * (xv[off + i] - mu) * is + be;
      }
  };
  fwd();
  if (rec) {
    g.record({{x, gamma, beta},
              out,
              fwd,
              [x, gamma, beta, out, mean, inv_std, b, c, hw]() mutable {
                const auto& og = out.grad();
                const auto& xv = x.values();
                for (int ci = 0; ci < c; ++ci) {
                  const T mu = (*mean)[ci], is = (*inv_std)[ci];
                  T sum_dy = T(0), sum_dy_xhat = T(0);
                  for (int bi = 0; bi < b; ++bi) {
                    const std::size_t off = (static_cast<std::size_t>(bi) * c + ci) * hw;
                    for (int i = 0; i < hw; ++i) {
                      sum_dy += og[off + i];
                      sum_dy_xhat += og[off + i] * (xv[off + i] - mu) * is;
                    }
                  }
                  if (gamma.requires_grad()) gamma.grad()[ci] += sum_dy_xhat;
                  if (beta.requires_grad()) beta.grad()[ci] += sum_dy;
                  if (x.requires_grad()) {
                    auto& xg = x.grad();
                    const T k1 = gamma.values()[ci] * is;
                    for (int bi = 0; bi < b; ++bi) {
                      const std::size_t off = (static_cast<std::size_t>(bi) * c + ci) * hw;
                      for (int i = 0; i < hw; ++i) xg[off + i] += k1 * og[off + i];
                    }
                  }
                }
              }});
  }
  return out;
}

}  // namespace mcnet
