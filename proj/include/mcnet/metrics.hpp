#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "common.hpp"

namespace mcnet {

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;  // row-major, nonzero = foreground

  std::uint8_t at(int i, int j) const { return v[static_cast<std::size_t>(i) * w + j]; }
};

struct OverlapMetrics {
  double dice = 0.0;
  double jaccard = 0.0;
};

// Both-empty convention: dice = jaccard = 1 (degenerate agreement is not
// rewarded silently elsewhere: surface metrics go undefined instead).
inline OverlapMetrics overlap_metrics(const BinaryMask& a, const BinaryMask& b) {
  if (a.h != b.h || a.w != b.w) throw ConfigError("overlap_metrics: mask shapes differ");
  std::size_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const bool fa = a.v[i] != 0, fb = b.v[i] != 0;
    na += fa;
    nb += fb;
    inter += fa && fb;
  }
  OverlapMetrics m;
  if (na + nb == 0) {
    m.dice = m.jaccard = 1.0;
    return m;
  }
  m.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
  m.jaccard = static_cast<double>(inter) / static_cast<double>(na + nb - inter);
  return m;
}

// Foreground pixels with at least one background 4-neighbor; the image border
// counts as background.
inline std::vector<std::pair<int, int>> surface_points(const BinaryMask& m) {
  std::vector<std::pair<int, int>> pts;
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (!m.at(i, j)) continue;
      const bool boundary = i == 0 || i == m.h - 1 || j == 0 || j == m.w - 1 ||
                            !m.at(i - 1, j) || !m.at(i + 1, j) || !m.at(i, j - 1) ||
                            !m.at(i, j + 1);
      if (boundary) pts.emplace_back(i, j);
    }
  return pts;
}

namespace detail {

// Felzenszwalb–Huttenlocher exact squared Euclidean distance transform.
inline void sedt_1d(const std::vector<double>& f, std::vector<double>& d, int n,
                    std::vector<int>& v, std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -1e30;
  z[1] = 1e30;
  for (int q = 1; q < n; ++q) {
    double s;
    for (;;) {
      s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * (q - v[k]));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = 1e30;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Squared distance to the nearest feature point, exact for grid inputs.
inline std::vector<double> sedt(const std::vector<std::uint8_t>& feature, int h, int w) {
  constexpr double inf = 1e26;
  std::vector<double> grid(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = feature[i] ? 0.0 : inf;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int j = 0; j < w; ++j) {  // columns
    for (int i = 0; i < h; ++i) f[i] = grid[static_cast<std::size_t>(i) * w + j];
    sedt_1d(f, d, h, v, z);
    for (int i = 0; i < h; ++i) grid[static_cast<std::size_t>(i) * w + j] = d[i];
  }
  for (int i = 0; i < h; ++i) {  // rows
    for (int j = 0; j < w; ++j) f[j] = grid[static_cast<std::size_t>(i) * w + j];
    sedt_1d(f, d, w, v, z);
    for (int j = 0; j < w; ++j) grid[static_cast<std::size_t>(i) * w + j] = d[j];
  }
  return grid;
}

// Linear-interpolation percentile on an ascending-sorted list.
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double rank = p * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  if (lo + 1 >= n) return sorted[n - 1];
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

struct SurfaceDistances {
  double hd95 = 0.0;
  double asd = 0.0;
};

// Directed distances from every surface point of `from` to the nearest
// surface point of `to`, ascending-sorted. Distance-transform accelerated;
// exact (squared distances are integers).
inline std::vector<double> directed_surface_distances(const BinaryMask& from,
                                                      const BinaryMask& to) {
  const auto from_pts = surface_points(from);
  std::vector<std::uint8_t> to_surf(static_cast<std::size_t>(to.h) * to.w, 0);
  for (const auto& [i, j] : surface_points(to))
    to_surf[static_cast<std::size_t>(i) * to.w + j] = 1;
  const auto dist2 = detail::sedt(to_surf, to.h, to.w);
  std::vector<double> out;
  out.reserve(from_pts.size());
  for (const auto& [i, j] : from_pts)
    out.push_back(std::sqrt(dist2[static_cast<std::size_t>(i) * from.w + j]));
  std::sort(out.begin(), out.end());
  return out;
}

// hd95 = max of the two directed 95th percentiles; asd = mean of the combined
// multiset. Undefined (nullopt) when either mask has no surface.
inline std::optional<SurfaceDistances> surface_distances(const BinaryMask& pred,
                                                         const BinaryMask& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ConfigError("surface_distances: mask shapes differ");
  const auto d_pg = directed_surface_distances(pred, gt);
  const auto d_gp = directed_surface_distances(gt, pred);
  if (d_pg.empty() || d_gp.empty()) return std::nullopt;
  SurfaceDistances s;
  s.hd95 = std::max(detail::percentile_sorted(d_pg, 0.95), detail::percentile_sorted(d_gp, 0.95));
  double sum = 0.0;
  for (double d : d_pg) sum += d;
  for (double d : d_gp) sum += d;
  s.asd = sum / static_cast<double>(d_pg.size() + d_gp.size());
  return s;
}

struct MetricsReport {
  double dice = 0.0;
  double jaccard = 0.0;
  std::optional<double> hd95;  // missing = undefined (empty surface)
  std::optional<double> asd;
  std::vector<MetricsReport> per_class;  // foreground classes, multi-class only
};

inline MetricsReport compute_metrics(const BinaryMask& pred, const BinaryMask& gt) {
  MetricsReport r;
  const auto ov = overlap_metrics(pred, gt);
  r.dice = ov.dice;
  r.jaccard = ov.jaccard;
  if (const auto sd = surface_distances(pred, gt)) {
    r.hd95 = sd->hd95;
    r.asd = sd->asd;
  }
  return r;
}

// Per-foreground-class metrics plus their macro average in the top-level
// fields (undefined cells are skipped in the average).
inline MetricsReport compute_metrics_multiclass(const std::vector<std::uint8_t>& pred_ids,
                                                const std::vector<std::uint8_t>& gt_ids, int h,
                                                int w, int num_classes) {
  if (num_classes < 2) throw ConfigError("multi-class metrics need num_classes >= 2");
  MetricsReport macro;
  double hd_sum = 0, asd_sum = 0;
  int hd_n = 0;
  for (int c = 1; c < num_classes; ++c) {
    BinaryMask p{h, w, {}}, g{h, w, {}};
    p.v.resize(pred_ids.size());
    g.v.resize(gt_ids.size());
    for (std::size_t i = 0; i < pred_ids.size(); ++i) {
      p.v[i] = pred_ids[i] == c;
      g.v[i] = gt_ids[i] == c;
    }
    MetricsReport r = compute_metrics(p, g);
    macro.dice += r.dice;
    macro.jaccard += r.jaccard;
    if (r.hd95) {
      hd_sum += *r.hd95;
      asd_sum += *r.asd;
      ++hd_n;
    }
    macro.per_class.push_back(std::move(r));
  }
  const double nfg = static_cast<double>(num_classes - 1);
  macro.dice /= nfg;
  macro.jaccard /= nfg;
  if (hd_n > 0) {
    macro.hd95 = hd_sum / hd_n;
    macro.asd = asd_sum / hd_n;
  }
  return macro;
}

}  // namespace mcnet
