#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ops.hpp"

namespace mcnet {

enum class Discrepancy { mse, kl };
enum class PairReduction { sum, mean };

struct SharpenConfig {
  double temperature = 0.1;
  bool through_grad = false;  // default: pseudo labels are cut from the graph
};

struct LossWeights {
  double lambda = 0.5;
  double beta_max = 0.1;
  long ramp_iters = 3000;
  Discrepancy discrepancy = Discrepancy::mse;
  PairReduction pair_reduction = PairReduction::sum;
};

// Per-iteration loss breakdown, in the order the run log writes it.
template <typename T>
struct LossReport {
  std::vector<T> l_seg;  // one entry per decoder
  T l_mc = T(0);
  T beta = T(0);
  T total = T(0);
  long iteration = 0;
};

// Gaussian ramp: w(t) = w_max * exp(-5 (1 - t/t_max)^2), clamped at t_max.
inline double rampup_weight(long iter, long ramp_iters, double w_max) {
  if (ramp_iters <= 0) return w_max;
  double phase = 1.0 - std::min(static_cast<double>(iter) / static_cast<double>(ramp_iters), 1.0);
  return w_max * std::exp(-5.0 * phase * phase);
}

namespace detail {

template <typename T>
void sharpen_values(const T* p, T* out, std::size_t n, int channels, std::size_t chan_stride,
                    double temperature) {
  const double u = 1.0 / temperature;
  const int ui = static_cast<int>(std::lround(u));
  const bool integral = std::abs(u - ui) < 1e-12 && ui >= 1;
  auto powu = [&](T v) -> T {
    return integral ? powi(v, ui) : static_cast<T>(std::pow(static_cast<double>(v), u));
  };
  if (channels <= 1) {
    if (integral && ui == 1) {  // T == 1 is the identity, exactly
      for (std::size_t i = 0; i < n; ++i) out[i] = p[i];
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const T a = powu(p[i]);
      const T b = powu(T(1) - p[i]);
      out[i] = a / (a + b);
    }
    return;
  }
  // Channel-normalized form for multi-class maps: n counts positions, the
  // channel axis is walked with chan_stride.
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0);
    for (int c = 0; c < channels; ++c) {
      const T a = powu(p[i + c * chan_stride]);
      out[i + c * chan_stride] = a;
      s += a;
    }
    for (int c = 0; c < channels; ++c) out[i + c * chan_stride] /= s;
  }
}

}  // namespace detail

// p^(1/T) / (p^(1/T) + (1-p)^(1/T)) elementwise on probability maps; tensors
// shaped [B,C,H,W] with C > 1 are normalized across channels instead. With
// cfg.through_grad false (the default) the result is a constant: no gradient
// reaches p.
template <typename T>
Tensor<T> sharpen(Graph<T>& g, const Tensor<T>& p, const SharpenConfig& cfg) {
  if (cfg.temperature <= 0) throw ConfigError("sharpen: temperature must be positive");
  const bool multichannel = p.ndim() == 4 && p.dim(1) > 1;
  const int channels = multichannel ? p.dim(1) : 1;
  const std::size_t chan_stride =
      multichannel ? static_cast<std::size_t>(p.dim(2)) * p.dim(3) : 0;
  const std::size_t npos = multichannel ? p.size() / channels : p.size();
  const double temp = cfg.temperature;

  Tensor<T> out(p.shape());
  bool rec = cfg.through_grad && g.should_record({p});
  out.set_requires_grad(rec);
  auto fwd = [p, out, npos, channels, chan_stride, temp, multichannel]() mutable {
    if (!multichannel) {
      detail::sharpen_values(p.values().data(), out.values().data(), npos, 1, 0, temp);
      return;
    }
    const int b = p.dim(0);
    const std::size_t batch_stride = static_cast<std::size_t>(channels) * chan_stride;
    for (int bi = 0; bi < b; ++bi)
      detail::sharpen_values(p.values().data() + bi * batch_stride,
                             out.values().data() + bi * batch_stride, chan_stride, channels,
                             chan_stride, temp);
  };
  fwd();
  if (rec) {
    g.record({{p},
              out,
              fwd,
              [p, out, channels, chan_stride, temp, multichannel]() mutable {
                const double u = 1.0 / temp;
                const auto& og = out.grad();
                const auto& pv = p.values();
                const auto& ov = out.values();
                auto& pg = p.grad();
                if (!multichannel) {
                  // ds/dp = u p^(u-1) (1-p)^(u-1) / (p^u + (1-p)^u)^2
                  for (std::size_t i = 0; i < pv.size(); ++i) {
                    const double pd = pv[i];
                    const double a = std::pow(pd, u), b = std::pow(1.0 - pd, u);
                    const double denom = (a + b) * (a + b);
                    const double ds =
                        u * std::pow(pd, u - 1.0) * std::pow(1.0 - pd, u - 1.0) / denom;
                    pg[i] += og[i] * static_cast<T>(ds);
                  }
                  return;
                }
                const int b = p.dim(0);
                const std::size_t bs = static_cast<std::size_t>(channels) * chan_stride;
                for (int bi = 0; bi < b; ++bi)
                  for (std::size_t i = 0; i < chan_stride; ++i) {
                    const std::size_t base = bi * bs + i;
                    double s = 0.0, dot = 0.0;
                    for (int c = 0; c < channels; ++c) {
                      const std::size_t idx = base + c * chan_stride;
                      s += std::pow(static_cast<double>(pv[idx]), u);
                      dot += static_cast<double>(og[idx]) * ov[idx];
                    }
                    for (int c = 0; c < channels; ++c) {
                      const std::size_t idx = base + c * chan_stride;
                      const double dp = u * std::pow(static_cast<double>(pv[idx]), u - 1.0) / s *
                                        (og[idx] - dot);
                      pg[idx] += static_cast<T>(dp);
                    }
                  }
              }});
  }
  return out;
}

// 1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps). Multi-channel inputs
// ([B,C,H,W], C > 1, y one-hot) average the per-class dice over the
// foreground classes c >= 1. Gradients flow to p only; y is a label map.
template <typename T>
Tensor<T> dice_loss(Graph<T>& g, const Tensor<T>& p, const Tensor<T>& y, T eps = T(1e-5)) {
  detail::require_same_shape(p, y, "dice_loss");
  const bool multichannel = p.ndim() == 4 && p.dim(1) > 1;
  Tensor<T> out({1});
  bool rec = g.should_record({p});
  out.set_requires_grad(rec);

  struct ClassTerms {
    std::vector<T> inter, denom;  // per class
  };
  auto terms = std::make_shared<ClassTerms>();
  const int nclass = multichannel ? p.dim(1) : 1;
  const int first_class = multichannel ? 1 : 0;
  terms->inter.resize(nclass);
  terms->denom.resize(nclass);

  auto class_range = [p, nclass](int c, std::size_t& lo, std::size_t& len,
                                 std::size_t& batch_stride, int& batches) {
    if (nclass == 1) {
      lo = 0;
      len = p.size();
      batch_stride = 0;
      batches = 1;
      return;
    }
    const std::size_t hw = static_cast<std::size_t>(p.dim(2)) * p.dim(3);
    lo = static_cast<std::size_t>(c) * hw;
    len = hw;
    batch_stride = static_cast<std::size_t>(p.dim(1)) * hw;
    batches = p.dim(0);
  };

  auto fwd = [p, y, out, terms, eps, nclass, first_class, class_range]() mutable {
    const auto& pv = p.values();
    const auto& yv = y.values();
    T loss = T(0);
    for (int c = first_class; c < nclass; ++c) {
      std::size_t lo, len, bs;
      int batches;
      class_range(c, lo, len, bs, batches);
      T inter = T(0), sp = T(0), sy = T(0);
      for (int bi = 0; bi < batches; ++bi) {
        const T* pp = pv.data() + lo + bi * bs;
        const T* yy = yv.data() + lo + bi * bs;
        for (std::size_t i = 0; i < len; ++i) {
          inter += pp[i] * yy[i];
          sp += pp[i];
          sy += yy[i];
        }
      }
      terms->inter[c] = inter;
      terms->denom[c] = sp + sy;
      loss += T(1) - (T(2) * inter + eps) / (sp + sy + eps);
    }
    out.values()[0] = loss / static_cast<T>(nclass - first_class);
  };
  fwd();
  if (rec) {
    g.record({{p, y},
              out,
              fwd,
              [p, y, out, terms, eps, nclass, first_class, class_range]() mutable {
                const T go = out.grad()[0] / static_cast<T>(nclass - first_class);
                const auto& yv = y.values();
                auto& pg = p.grad();
                for (int c = first_class; c < nclass; ++c) {
                  std::size_t lo, len, bs;
                  int batches;
                  class_range(c, lo, len, bs, batches);
                  const T denom = terms->denom[c] + eps;
                  const T num = T(2) * terms->inter[c] + eps;
                  for (int bi = 0; bi < batches; ++bi) {
                    const T* yy = yv.data() + lo + bi * bs;
                    T* gg = pg.data() + lo + bi * bs;
                    for (std::size_t i = 0; i < len; ++i)
                      gg[i] += go * (num - T(2) * yy[i] * denom) / (denom * denom);
                  }
                }
              }});
  }
  return out;
}

// Mean over all elements of (a - b)^2; gradients flow to both sides.
template <typename T>
Tensor<T> mse_loss(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mse_loss");
  const T inv_n = T(1) / static_cast<T>(a.size());
  Tensor<T> out({1});
  bool rec = g.should_record({a, b});
  out.set_requires_grad(rec);
  auto fwd = [a, b, out, inv_n]() mutable {
    const auto& av = a.values();
    const auto& bv = b.values();
    T s = T(0);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = av[i] - bv[i];
      s += d * d;
    }
    out.values()[0] = s * inv_n;
  };
  fwd();
  if (rec) {
    g.record({{a, b},
              out,
              fwd,
              [a, b, out, inv_n]() mutable {
                const T go = out.grad()[0] * T(2) * inv_n;
                const auto& av = a.values();
                const auto& bv = b.values();
                if (a.requires_grad()) {
                  auto& ag = a.grad();
                  for (std::size_t i = 0; i < av.size(); ++i) ag[i] += go * (av[i] - bv[i]);
                }
                if (b.requires_grad()) {
                  auto& bg = b.grad();
                  for (std::size_t i = 0; i < av.size(); ++i) bg[i] -= go * (av[i] - bv[i]);
                }
              }});
  }
  return out;
}

// KL(p || q) averaged over positions. Single-channel maps use the binary form
// p ln(p/q) + (1-p) ln((1-p)/(1-q)) per element; [B,C,H,W] with C > 1 treats
// each pixel's channel vector as a distribution. Arguments inside logs and
// denominators are clamped to [1e-7, 1-1e-7]; the clamp region contributes
// zero gradient.
template <typename T>
Tensor<T> kl_loss(Graph<T>& g, const Tensor<T>& p, const Tensor<T>& q) {
  detail::require_same_shape(p, q, "kl_loss");
  const bool multichannel = p.ndim() == 4 && p.dim(1) > 1;
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  auto clamp01 = [](double v) { return v < lo ? lo : (v > hi ? hi : v); };
  Tensor<T> out({1});
  bool rec = g.should_record({p, q});
  out.set_requires_grad(rec);

  if (!multichannel) {
    const T inv_n = T(1) / static_cast<T>(p.size());
    auto fwd = [p, q, out, inv_n, clamp01]() mutable {
      const auto& pv = p.values();
      const auto& qv = q.values();
      double s = 0.0;
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double pp = clamp01(pv[i]), qq = clamp01(qv[i]);
        s += pp * std::log(pp / qq) + (1.0 - pp) * std::log((1.0 - pp) / (1.0 - qq));
      }
      out.values()[0] = static_cast<T>(s) * inv_n;
    };
    fwd();
    if (rec) {
      g.record({{p, q},
                out,
                fwd,
                [p, q, out, inv_n, clamp01]() mutable {
                  const T go = out.grad()[0] * inv_n;
                  const auto& pv = p.values();
                  const auto& qv = q.values();
                  for (std::size_t i = 0; i < pv.size(); ++i) {
                    const double pp = clamp01(pv[i]), qq = clamp01(qv[i]);
                    if (p.requires_grad() && pv[i] > lo && pv[i] < hi)
                      p.grad()[i] += go * static_cast<T>(std::log(pp / qq) -
                                                         std::log((1.0 - pp) / (1.0 - qq)));
                    if (q.requires_grad() && qv[i] > lo && qv[i] < hi)
                      q.grad()[i] += go * static_cast<T>(-pp / qq + (1.0 - pp) / (1.0 - qq));
                  }
                }});
    }
    return out;
  }

  const int b = p.dim(0), c = p.dim(1);
  const std::size_t hw = static_cast<std::size_t>(p.dim(2)) * p.dim(3);
  const T inv_n = T(1) / static_cast<T>(static_cast<std::size_t>(b) * hw);
  auto fwd = [p, q, out, b, c, hw, inv_n, clamp01]() mutable {
    const auto& pv = p.values();
    const auto& qv = q.values();
    double s = 0.0;
    for (int bi = 0; bi < b; ++bi)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t base = static_cast<std::size_t>(bi) * c * hw + i;
        for (int ci = 0; ci < c; ++ci) {
          const double pp = clamp01(pv[base + ci * hw]), qq = clamp01(qv[base + ci * hw]);
          s += pp * std::log(pp / qq);
        }
      }
    out.values()[0] = static_cast<T>(s) * inv_n;
  };
  fwd();
  if (rec) {
    g.record({{p, q},
              out,
              fwd,
              [p, q, out, b, c, hw, inv_n, clamp01]() mutable {
                const T go = out.grad()[0] * inv_n;
                const auto& pv = p.values();
                const auto& qv = q.values();
                for (int bi = 0; bi < b; ++bi)
                  for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t base = static_cast<std::size_t>(bi) * c * hw + i;
                    for (int ci = 0; ci < c; ++ci) {
                      const std::size_t idx = base + ci * hw;
                      const double pp = clamp01(pv[idx]), qq = clamp01(qv[idx]);
                      if (p.requires_grad() && pv[idx] > lo && pv[idx] < hi)
                        p.grad()[idx] += go * static_cast<T>(std::log(pp / qq) + 1.0);
                      if (q.requires_grad() && qv[idx] > lo && qv[idx] < hi)
                        q.grad()[idx] += go * static_cast<T>(-pp / qq);
                    }
                  }
              }});
  }
  return out;
}

// Sum over ordered decoder pairs (i, j), i != j, of D[sharpen(out_i), out_j].
// With pair_reduction mean the sum is divided by n(n-1).
template <typename T>
Tensor<T> mutual_consistency_loss(Graph<T>& g, const std::vector<Tensor<T>>& outputs,
                                  const SharpenConfig& scfg, const LossWeights& w) {
  const int n = static_cast<int>(outputs.size());
  if (n < 2) throw ConfigError("mutual consistency needs at least 2 decoder outputs, got " +
                               std::to_string(n));
  std::vector<Tensor<T>> sharp(outputs.size());
  for (int i = 0; i < n; ++i) sharp[i] = sharpen(g, outputs[i], scfg);
  Tensor<T> acc;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      Tensor<T> term = w.discrepancy == Discrepancy::mse ? mse_loss(g, sharp[i], outputs[j])
                                                         : kl_loss(g, sharp[i], outputs[j]);
      acc = acc.defined() ? add(g, acc, term) : term;
    }
  if (w.pair_reduction == PairReduction::mean)
    acc = scale(g, acc, T(1) / static_cast<T>(n * (n - 1)));
  return acc;
}

// Pairwise consistency over ordered pairs (i, j), i != j, of D[target_i, pred_j]
// with the target side treated as a fixed label within the step — the same
// directed structure as mutual_consistency_loss, so the consistency arms are
// weight-matched and differ only in which map plays each role:
//   sharpened=false: raw -> raw   (arm "CC")
//   sharpened=true:  sharpened -> sharpened, gradient through the prediction
//                    side's sharpening only (arm "CCstar")
// A live-both-sides MSE would double every output's consistency gradient
// relative to the detached form (the loss value is identical), so detaching
// keeps the arms comparable at equal weight. scfg.through_grad = true keeps
// targets in the graph instead (the fully differentiable form used by
// finite-difference checks and the no-detach training mode).
template <typename T>
Tensor<T> pairwise_consistency_loss(Graph<T>& g, const std::vector<Tensor<T>>& outputs,
                                    const SharpenConfig& scfg, const LossWeights& w,
                                    bool sharpened) {
  const int n = static_cast<int>(outputs.size());
  if (n < 2) throw ConfigError("pairwise consistency needs at least 2 decoder outputs, got " +
                               std::to_string(n));
  std::vector<Tensor<T>> targets, preds;
  targets.reserve(outputs.size());
  preds.reserve(outputs.size());
  if (sharpened) {
    SharpenConfig target_cfg = scfg;  // through_grad false detaches the target
    SharpenConfig pred_cfg = scfg;
    pred_cfg.through_grad = true;
    for (const auto& o : outputs) {
      targets.push_back(sharpen(g, o, target_cfg));
      preds.push_back(sharpen(g, o, pred_cfg));
    }
  } else {
    for (const auto& o : outputs) {
      targets.push_back(scfg.through_grad ? o : o.detached_copy());
      preds.push_back(o);
    }
  }
  Tensor<T> acc;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      Tensor<T> term = w.discrepancy == Discrepancy::mse ? mse_loss(g, targets[i], preds[j])
                                                         : kl_loss(g, targets[i], preds[j]);
      acc = acc.defined() ? add(g, acc, term) : term;
    }
  if (w.pair_reduction == PairReduction::mean)
    acc = scale(g, acc, T(1) / static_cast<T>(n * (n - 1)));
  return acc;
}

enum class Variant { supervised, cc, ccstar, mc };

inline Variant parse_variant(const std::string& s) {
  if (s == "supervised") return Variant::supervised;
  if (s == "CC" || s == "cc") return Variant::cc;
  if (s == "CCstar" || s == "ccstar") return Variant::ccstar;
  if (s == "MC" || s == "mc") return Variant::mc;
  throw ConfigError("unknown variant '" + s + "' (expected supervised|CC|CCstar|MC)");
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::supervised: return "supervised";
    case Variant::cc: return "CC";
    case Variant::ccstar: return "CCstar";
    default: return "MC";
  }
}

template <typename T>
struct TotalLoss {
  Tensor<T> value;          // scalar, differentiable
  LossReport<T> report;
};

// total = lambda * sum_i dice(out_i[labeled], y) + beta(iter) * consistency.
// The first labeled_count batch items carry labels; labels may be undefined
// when labeled_count == 0. Supervised runs skip the consistency term.
template <typename T>
TotalLoss<T> total_loss(Graph<T>& g, const std::vector<Tensor<T>>& outputs,
                        const Tensor<T>& labels, int labeled_count, long iter, Variant variant,
                        const SharpenConfig& scfg, const LossWeights& w) {
  if (outputs.empty()) throw ConfigError("total_loss: no decoder outputs");
  const int batch = outputs[0].dim(0);
  if (labeled_count < 0 || labeled_count > batch)
    throw ConfigError("total_loss: labeled_count outside batch");
  if (labeled_count > 0 && !labels.defined())
    throw ConfigError("total_loss: labeled_count > 0 but no labels given");

  TotalLoss<T> result;
  result.report.iteration = iter;
  result.report.beta = static_cast<T>(rampup_weight(iter, w.ramp_iters, w.beta_max));

  Tensor<T> seg_sum;
  for (const auto& out : outputs) {
    if (labeled_count == 0) {
      result.report.l_seg.push_back(T(0));
      continue;
    }
    Tensor<T> pl = labeled_count == batch ? out : slice_batch(g, out, 0, labeled_count);
    Tensor<T> d = dice_loss(g, pl, labels);
    result.report.l_seg.push_back(d.values()[0]);
    seg_sum = seg_sum.defined() ? add(g, seg_sum, d) : d;
  }

  Tensor<T> total;
  if (seg_sum.defined()) total = scale(g, seg_sum, static_cast<T>(w.lambda));

  if (variant != Variant::supervised) {
    Tensor<T> cons;
    switch (variant) {
      case Variant::mc: cons = mutual_consistency_loss(g, outputs, scfg, w); break;
      case Variant::cc: cons = pairwise_consistency_loss(g, outputs, scfg, w, false); break;
      default: cons = pairwise_consistency_loss(g, outputs, scfg, w, true); break;
    }
    result.report.l_mc = cons.values()[0];
    Tensor<T> weighted = scale(g, cons, result.report.beta);
    total = total.defined() ? add(g, total, weighted) : weighted;
  }

  if (!total.defined()) total = Tensor<T>::scalar(T(0));
  result.value = total;
  result.report.total = total.values()[0];
  return result;
}

}  // namespace mcnet
