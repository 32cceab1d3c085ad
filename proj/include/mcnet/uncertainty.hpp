#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mcnet {

enum class UncertaintyStatistic { variance, mean_pairwise_sq, entropy_of_mean };

inline UncertaintyStatistic parse_uncertainty_statistic(const std::string& s) {
  if (s == "variance") return UncertaintyStatistic::variance;
  if (s == "mean_pairwise_sq") return UncertaintyStatistic::mean_pairwise_sq;
  if (s == "entropy_of_mean") return UncertaintyStatistic::entropy_of_mean;
  throw ConfigError("unknown uncertainty statistic '" + s + "'");
}

struct UncertaintyMap {
  int h = 0, w = 0;
  UncertaintyStatistic statistic = UncertaintyStatistic::variance;
  std::vector<double> values;  // all >= 0
};

// Per-pixel statistic across the n decoder outputs (one batch item).
// Multi-channel maps average the per-channel statistic over channels.
template <typename T>
UncertaintyMap uncertainty_map(const std::vector<Tensor<T>>& outputs,
                               UncertaintyStatistic statistic, int batch_index = 0) {
  const int n = static_cast<int>(outputs.size());
  if (n < 2) throw ConfigError("uncertainty needs at least 2 decoder outputs, got " +
                               std::to_string(n));
  for (const auto& o : outputs) {
    if (o.ndim() != 4) throw ConfigError("uncertainty: outputs must be [B,C,H,W]");
    if (o.shape() != outputs[0].shape())
      throw ConfigError("uncertainty: output shapes differ");
  }
  const int c = outputs[0].dim(1), h = outputs[0].dim(2), w = outputs[0].dim(3);
  if (batch_index < 0 || batch_index >= outputs[0].dim(0))
    throw ConfigError("uncertainty: batch index out of range");
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  UncertaintyMap map;
  map.h = h;
  map.w = w;
  map.statistic = statistic;
  map.values.assign(hw, 0.0);

  for (int ci = 0; ci < c; ++ci) {
    const std::size_t base = (static_cast<std::size_t>(batch_index) * c + ci) * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double stat = 0.0;
      if (statistic == UncertaintyStatistic::entropy_of_mean) {
        double mean = 0.0;
        for (const auto& o : outputs) mean += static_cast<double>(o.values()[base + p]);
        mean /= n;
        constexpr double eps = 1e-12;
        const double m = std::min(std::max(mean, eps), 1.0 - eps);
        stat = -m * std::log(m) - (1.0 - m) * std::log(1.0 - m);
      } else {
        double mean = 0.0;
        for (const auto& o : outputs) mean += static_cast<double>(o.values()[base + p]);
        mean /= n;
        double var = 0.0;  // population variance
        for (const auto& o : outputs) {
          const double d = static_cast<double>(o.values()[base + p]) - mean;
          var += d * d;
        }
        var /= n;
        stat = statistic == UncertaintyStatistic::variance
                   ? var
                   : 2.0 * var * static_cast<double>(n) / static_cast<double>(n - 1);
      }
      map.values[p] += stat / c;
    }
  }
  return map;
}

// Mean over the masked region (or everything when mask is empty-sized).
inline double summarize_uncertainty(const UncertaintyMap& map,
                                    const std::vector<std::uint8_t>& mask = {}) {
  if (!mask.empty() && mask.size() != map.values.size())
    throw ConfigError("uncertainty summary: mask shape mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    sum += map.values[i];
    ++count;
  }
  if (count == 0) throw ConfigError("uncertainty summary: empty mask");
  return sum / static_cast<double>(count);
}

}  // namespace mcnet
