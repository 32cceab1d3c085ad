#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "pcg32.hpp"
#include "pgm.hpp"

namespace mcnet {

enum class Split { labeled, unlabeled, val, test };

inline Split parse_split(const std::string& s) {
  if (s == "labeled") return Split::labeled;
  if (s == "unlabeled") return Split::unlabeled;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected labeled|unlabeled|val|test)");
}

inline std::string split_name(Split s) {
  switch (s) {
    case Split::labeled: return "labeled";
    case Split::unlabeled: return "unlabeled";
    case Split::val: return "val";
    default: return "test";
  }
}

struct Sample {
  std::string id;
  int size = 0;  // H == W
  std::vector<float> image;        // [0,1], 16-bit quantized
  std::vector<std::uint8_t> label;  // empty iff !labeled
  bool labeled = false;
};

struct Manifest {
  std::string root;
  int size = 0;
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Split>> entries;
};

struct GenConfig {
  std::uint64_t seed = 1337;
  int count_train = 200;
  int count_val = 20;
  int count_test = 50;
  int size = 64;
  int branch_count_min = 1;
  int branch_count_max = 4;
  int branch_width_min = 1;
  int branch_width_max = 3;
  double noise_sigma = 0.2;
  double intensity_inhomogeneity = 0.25;
  double labeled_fraction = 0.1;
  std::string root;

  void validate() const {
    if (count_train < 1 || count_val < 0 || count_test < 0)
      throw ConfigError("sample counts must be positive");
    if (size < 16) throw ConfigError("size must be >= 16");
    if (branch_count_min < 0 || branch_count_min > branch_count_max)
      throw ConfigError("branch_count range empty");
    if (branch_width_min < 1 || branch_width_min > branch_width_max)
      throw ConfigError("branch_width range empty");
    if (noise_sigma < 0 || intensity_inhomogeneity < 0)
      throw ConfigError("noise_sigma and intensity_inhomogeneity must be >= 0");
    if (labeled_fraction <= 0 || labeled_fraction > 1)
      throw ConfigError("labeled_fraction must be in (0,1]");
    if (root.empty()) throw ConfigError("dataset root not set");
  }
};

// ---------------------------------------------------------------------------
// Morphology helpers (Chebyshev radius 2; border counts as background)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::uint8_t> erode_r2(const std::vector<std::uint8_t>& m, int h, int w) {
  std::vector<std::uint8_t> out(m.size(), 0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      bool all = true;
      for (int di = -2; di <= 2 && all; ++di)
        for (int dj = -2; dj <= 2 && all; ++dj) {
          const int ii = i + di, jj = j + dj;
          if (ii < 0 || ii >= h || jj < 0 || jj >= w || !m[ii * w + jj]) all = false;
        }
      out[i * w + j] = all ? 1 : 0;
    }
  return out;
}

inline std::vector<std::uint8_t> dilate_r2(const std::vector<std::uint8_t>& m, int h, int w) {
  std::vector<std::uint8_t> out(m.size(), 0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      bool any = false;
      for (int di = -2; di <= 2 && !any; ++di)
        for (int dj = -2; dj <= 2 && !any; ++dj) {
          const int ii = i + di, jj = j + dj;
          if (ii >= 0 && ii < h && jj >= 0 && jj < w && m[ii * w + jj]) any = true;
        }
      out[i * w + j] = any ? 1 : 0;
    }
  return out;
}

// Size of the largest 4-connected component of m.
inline std::size_t largest_component(const std::vector<std::uint8_t>& m, int h, int w) {
  std::vector<std::uint8_t> seen(m.size(), 0);
  std::size_t best = 0;
  std::deque<int> queue;
  for (int s = 0; s < h * w; ++s) {
    if (!m[s] || seen[s]) continue;
    std::size_t count = 0;
    seen[s] = 1;
    queue.push_back(s);
    while (!queue.empty()) {
      const int p = queue.front();
      queue.pop_front();
      ++count;
      const int i = p / w, j = p % w;
      const int nb[4] = {p - w, p + w, p - 1, p + 1};
      const bool okn[4] = {i > 0, i < h - 1, j > 0, j < w - 1};
      for (int k = 0; k < 4; ++k)
        if (okn[k] && m[nb[k]] && !seen[nb[k]]) {
          seen[nb[k]] = 1;
          queue.push_back(nb[k]);
        }
    }
    best = std::max(best, count);
  }
  return best;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

struct Ellipse {
  double cx, cy, a, b, theta;
  double w3, p3, w5, p5;  // boundary perturbation harmonics
};

inline bool inside(const Ellipse& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double c = std::cos(e.theta), s = std::sin(e.theta);
  const double u = (dx * c + dy * s) / e.a;
  const double v = (-dx * s + dy * c) / e.b;
  const double r2 = u * u + v * v;
  const double phi = std::atan2(v, u);
  const double scale = 1.0 + e.w3 * std::sin(3 * phi + e.p3) + e.w5 * std::sin(5 * phi + e.p5);
  return r2 <= scale * scale;
}

// One attempt at a blob-plus-branches mask; the caller retries until the
// rejection criteria pass.
inline std::vector<std::uint8_t> draw_mask(Pcg32& rng, const GenConfig& cfg) {
  const int n = cfg.size;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * n, 0);

  const int n_ell = rng.next_int(1, 3);
  std::vector<Ellipse> blob(n_ell);
  for (auto& e : blob) {
    e.cx = n / 2.0 + rng.next_double(-0.18, 0.18) * n;
    e.cy = n / 2.0 + rng.next_double(-0.18, 0.18) * n;
    e.a = rng.next_double(0.10, 0.20) * n;
    e.b = rng.next_double(0.10, 0.20) * n;
    e.theta = rng.next_double(0.0, 3.14159265358979323846);
    e.w3 = rng.next_double(0.0, 0.10);
    e.p3 = rng.next_double(0.0, 6.2831853);
    e.w5 = rng.next_double(0.0, 0.06);
    e.p5 = rng.next_double(0.0, 6.2831853);
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (const auto& e : blob)
        if (inside(e, j + 0.5, i + 0.5)) {
          mask[i * n + j] = 1;
          break;
        }

  auto stamp = [&](double x, double y, double radius) {
    const int lo_i = std::max(0, static_cast<int>(std::floor(y - radius)));
    const int hi_i = std::min(n - 1, static_cast<int>(std::ceil(y + radius)));
    const int lo_j = std::max(0, static_cast<int>(std::floor(x - radius)));
    const int hi_j = std::min(n - 1, static_cast<int>(std::ceil(x + radius)));
    for (int i = lo_i; i <= hi_i; ++i)
      for (int j = lo_j; j <= hi_j; ++j) {
        const double dx = j + 0.5 - x, dy = i + 0.5 - y;
        if (dx * dx + dy * dy <= radius * radius) mask[i * n + j] = 1;
      }
  };

  const int n_branch = rng.next_int(cfg.branch_count_min, cfg.branch_count_max);
  for (int bi = 0; bi < n_branch; ++bi) {
    const int width = rng.next_int(cfg.branch_width_min, cfg.branch_width_max);
    const double radius = width / 2.0;
    // march outward from the blob center until leaving the blob: the branch
    // root sits on the blob boundary, keeping it attached
    double angle = rng.next_double(0.0, 6.2831853);
    const double cx = blob[0].cx, cy = blob[0].cy;
    double x = cx, y = cy;
    int guard = 0;
    while (guard++ < 2 * n) {
      const int pi = static_cast<int>(y), pj = static_cast<int>(x);
      if (pi < 1 || pi >= n - 1 || pj < 1 || pj >= n - 1) break;
      if (!mask[pi * n + pj]) break;
      x += std::cos(angle);
      y += std::sin(angle);
    }
    const double len = rng.next_double(0.30, 0.55) * n;
    const double curve = rng.next_double(0.08, 0.22);
    double heading = angle + rng.next_double(-0.35, 0.35);
    for (double t = 0; t < len; t += 1.0) {
      if (x < 1.5 || x > n - 2.5 || y < 1.5 || y > n - 2.5) break;
      stamp(x, y, std::max(radius, 0.5));
      heading += rng.next_normal() * curve;
      x += std::cos(heading);
      y += std::sin(heading);
    }
  }
  return mask;
}

inline bool mask_acceptable(const std::vector<std::uint8_t>& mask, int n) {
  std::size_t fg = 0;
  for (auto v : mask) fg += v;
  const double frac = static_cast<double>(fg) / (static_cast<double>(n) * n);
  if (frac < 0.02 || frac > 0.5) return false;
  // thin-structure requirement: opening by radius 2 must leave a residual
  // with a substantial connected piece (the branches)
  const auto opened = dilate_r2(erode_r2(mask, n, n), n, n);
  std::vector<std::uint8_t> residual(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) residual[i] = mask[i] && !opened[i];
  return largest_component(residual, n, n) >= 8;
}

}  // namespace detail

// Deterministic sample synthesis: all randomness comes from a PCG32 stream
// seeded with (cfg.seed, global sample index).
inline Sample generate_sample(const GenConfig& cfg, std::uint64_t index, const std::string& id,
                              bool with_label) {
  Pcg32 rng(cfg.seed, index);
  const int n = cfg.size;
  std::vector<std::uint8_t> mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 64)
      throw NumericalError("generator failed to produce an acceptable mask for " + id);
    mask = detail::draw_mask(rng, cfg);
    if (detail::mask_acceptable(mask, n)) break;
  }

  // low-frequency additive bias field
  const double fx = rng.next_double(1.0, 2.5), fy = rng.next_double(1.0, 2.5);
  const double px = rng.next_double(0.0, 6.2831853), py = rng.next_double(0.0, 6.2831853);
  const double amp = cfg.intensity_inhomogeneity;

  Sample s;
  s.id = id;
  s.size = n;
  s.labeled = with_label;
  s.image.resize(mask.size());
  constexpr double kFg = 0.68, kBg = 0.32;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * n + j;
      double v = mask[idx] ? kFg : kBg;
      v += amp * std::sin(fx * 3.14159265358979 * (j + 0.5) / n + px) *
           std::sin(fy * 3.14159265358979 * (i + 0.5) / n + py);
      v += cfg.noise_sigma * rng.next_normal();
      v = std::min(std::max(v, 0.0), 1.0);
      // 16-bit quantization, computed exactly as read_sample rescales, so the
      // in-memory sample equals its on-disk round trip bitwise
      const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      s.image[idx] = static_cast<float>(q) * (1.0f / 65535.0f);
    }
  if (with_label) s.label = std::move(mask);
  return s;
}

inline void write_sample(const std::string& root, const Sample& s) {
  PgmImage img;
  img.width = s.size;
  img.height = s.size;
  img.maxval = 65535;
  img.data.resize(s.image.size());
  for (std::size_t i = 0; i < s.image.size(); ++i)
    img.data[i] = static_cast<std::uint16_t>(std::lround(s.image[i] * 65535.0));
  write_pgm(root + "/images/" + s.id + ".pgm", img);
  if (s.labeled) {
    PgmImage lab;
    lab.width = s.size;
    lab.height = s.size;
    lab.maxval = 255;
    lab.data.assign(s.label.begin(), s.label.end());
    write_pgm(root + "/labels/" + s.id + ".pgm", lab);
  }
}

inline Sample read_sample(const std::string& root, const std::string& id, bool labeled,
                          int num_classes) {
  const PgmImage img = read_pgm(root + "/images/" + id + ".pgm");
  Sample s;
  s.id = id;
  if (img.width != img.height)
    throw DataError("'" + id + "': image must be square, got " + std::to_string(img.width) + "x" +
                    std::to_string(img.height));
  s.size = img.width;
  s.labeled = labeled;
  s.image.resize(img.data.size());
  const float inv = 1.0f / static_cast<float>(img.maxval);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    s.image[i] = static_cast<float>(img.data[i]) * inv;
  if (labeled) {
    const std::string lpath = root + "/labels/" + id + ".pgm";
    const PgmImage lab = read_pgm(lpath);
    if (lab.width != img.width || lab.height != img.height)
      throw DataError("'" + lpath + "': label dimensions " + std::to_string(lab.width) + "x" +
                      std::to_string(lab.height) + " do not match image at byte 3");
    s.label.resize(lab.data.size());
    for (std::size_t i = 0; i < lab.data.size(); ++i) {
      if (lab.data[i] >= static_cast<unsigned>(num_classes))
        throw DataError("'" + lpath + "': label value " + std::to_string(lab.data[i]) +
                        " >= num_classes " + std::to_string(num_classes));
      s.label[i] = static_cast<std::uint8_t>(lab.data[i]);
    }
  }
  return s;
}

inline void write_manifest(const Manifest& m) {
  std::ofstream out(m.root + "/manifest.txt");
  if (!out) throw DataError("cannot write manifest in '" + m.root + "'");
  out << "size=" << m.size << "\n";
  out << "classes=" << m.num_classes << "\n";
  out << "seed=" << m.seed << "\n";
  for (const auto& [id, split] : m.entries) out << id << " " << split_name(split) << "\n";
  out.close();
  if (!out) throw DataError("manifest write failed in '" + m.root + "'");
}

inline Manifest load_manifest(const std::string& root) {
  const std::string path = root + "/manifest.txt";
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  Manifest m;
  m.root = root;
  std::string line;
  auto header = [&](const char* key) -> std::string {
    if (!std::getline(in, line)) throw DataError("'" + path + "': missing " + key + " header");
    const std::string prefix = std::string(key) + "=";
    if (line.rfind(prefix, 0) != 0)
      throw DataError("'" + path + "': expected '" + prefix + "...', got '" + line + "'");
    return line.substr(prefix.size());
  };
  try {
    m.size = std::stoi(header("size"));
    m.num_classes = std::stoi(header("classes"));
    m.seed = std::stoull(header("seed"));
  } catch (const std::logic_error&) {
    throw DataError("'" + path + "': malformed header value");
  }
  if (m.size <= 0 || m.num_classes < 2)
    throw DataError("'" + path + "': invalid size/classes header");
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos)
      throw DataError("'" + path + "': malformed entry '" + line + "'");
    const std::string id = line.substr(0, sp);
    if (std::find(seen.begin(), seen.end(), id) != seen.end())
      throw DataError("'" + path + "': duplicate id '" + id + "'");
    seen.push_back(id);
    m.entries.emplace_back(id, parse_split(line.substr(sp + 1)));
  }
  if (m.entries.empty()) throw DataError("'" + path + "': no samples listed");
  return m;
}

// Writes images, labels (for labeled/val/test entries), and manifest.txt.
inline Manifest generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(cfg.root) / "images", ec);
  fs::create_directories(fs::path(cfg.root) / "labels", ec);
  if (ec) throw DataError("cannot create dataset directories under '" + cfg.root + "'");

  Manifest m;
  m.root = cfg.root;
  m.size = cfg.size;
  m.num_classes = 2;
  m.seed = cfg.seed;

  const int n_labeled = static_cast<int>(std::lround(cfg.labeled_fraction * cfg.count_train));
  std::uint64_t index = 0;
  char idbuf[32];
  auto emit = [&](const char* stem, int i, Split split, bool with_label) {
    std::snprintf(idbuf, sizeof(idbuf), "%s_%03d", stem, i);
    Sample s = generate_sample(cfg, index++, idbuf, with_label);
    write_sample(cfg.root, s);
    m.entries.emplace_back(idbuf, split);
  };
  for (int i = 0; i < cfg.count_train; ++i) {
    const bool lab = i < n_labeled;
    emit("train", i, lab ? Split::labeled : Split::unlabeled, lab);
  }
  for (int i = 0; i < cfg.count_val; ++i) emit("val", i, Split::val, true);
  for (int i = 0; i < cfg.count_test; ++i) emit("test", i, Split::test, true);
  write_manifest(m);
  return m;
}

// ---------------------------------------------------------------------------
// Loading & augmentation
// ---------------------------------------------------------------------------

struct Dataset {
  Manifest manifest;
  std::vector<Sample> samples;
  std::vector<int> labeled, unlabeled, val, test;  // indices into samples

  const std::vector<int>& split_indices(Split s) const {
    switch (s) {
      case Split::labeled: return labeled;
      case Split::unlabeled: return unlabeled;
      case Split::val: return val;
      default: return test;
    }
  }
};

inline Dataset load_dataset(const std::string& root) {
  Dataset d;
  d.manifest = load_manifest(root);
  for (const auto& [id, split] : d.manifest.entries) {
    const bool labeled = split != Split::unlabeled;
    Sample s = read_sample(root, id, labeled, d.manifest.num_classes);
    if (s.size != d.manifest.size)
      throw DataError("'" + id + "': size " + std::to_string(s.size) +
                      " does not match manifest size " + std::to_string(d.manifest.size));
    const int idx = static_cast<int>(d.samples.size());
    switch (split) {
      case Split::labeled: d.labeled.push_back(idx); break;
      case Split::unlabeled: d.unlabeled.push_back(idx); break;
      case Split::val: d.val.push_back(idx); break;
      default: d.test.push_back(idx); break;
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

enum class AugmentOp { identity, rot90, rot180, rot270, hflip, vflip };

template <typename V>
void apply_augment_plane(std::vector<V>& v, int n, AugmentOp op) {
  if (op == AugmentOp::identity) return;
  std::vector<V> src = v;
  auto at = [&](int i, int j) -> V { return src[static_cast<std::size_t>(i) * n + j]; };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      V val;
      switch (op) {
        case AugmentOp::rot90: val = at(j, n - 1 - i); break;   // 90° counter-clockwise
        case AugmentOp::rot180: val = at(n - 1 - i, n - 1 - j); break;
        case AugmentOp::rot270: val = at(n - 1 - j, i); break;
        case AugmentOp::hflip: val = at(i, n - 1 - j); break;
        case AugmentOp::vflip: val = at(n - 1 - i, j); break;
        default: val = at(i, j);
      }
      v[static_cast<std::size_t>(i) * n + j] = val;
    }
}

// Image and label receive the identical transform.
inline Sample apply_augment(const Sample& s, AugmentOp op) {
  Sample out = s;
  apply_augment_plane(out.image, out.size, op);
  if (!out.label.empty()) apply_augment_plane(out.label, out.size, op);
  return out;
}

inline AugmentOp random_augment_op(Pcg32& rng) {
  return static_cast<AugmentOp>(rng.next_below(6));
}

inline Sample augment(const Sample& s, Pcg32& rng) {
  return apply_augment(s, random_augment_op(rng));
}

// Half-labeled half-unlabeled batches, drawn without replacement from
// per-epoch shuffles. An empty unlabeled pool degrades to all-labeled batches
// (supervised fallback).
class BatchSampler {
 public:
  struct Batch {
    std::vector<int> labeled;
    std::vector<int> unlabeled;
  };

  BatchSampler(std::vector<int> labeled_pool, std::vector<int> unlabeled_pool, int batch_size,
               Pcg32 rng)
      : labeled_pool_(std::move(labeled_pool)),
        unlabeled_pool_(std::move(unlabeled_pool)),
        batch_size_(batch_size),
        rng_(rng) {
    if (batch_size_ < 1 || batch_size_ % 2 != 0)
      throw ConfigError("batch_size must be a positive even number");
    if (labeled_pool_.empty()) throw ConfigError("labeled pool is empty");
  }

  bool all_labeled_fallback() const { return unlabeled_pool_.empty(); }

  Batch make_batch() {
    Batch b;
    const int half = batch_size_ / 2;
    if (all_labeled_fallback()) {
      for (int i = 0; i < batch_size_; ++i) b.labeled.push_back(draw(labeled_pool_, labeled_q_));
      return b;
    }
    for (int i = 0; i < half; ++i) b.labeled.push_back(draw(labeled_pool_, labeled_q_));
    for (int i = 0; i < half; ++i) b.unlabeled.push_back(draw(unlabeled_pool_, unlabeled_q_));
    return b;
  }

 private:
  int draw(const std::vector<int>& pool, std::vector<int>& queue) {
    if (queue.empty()) {
      queue = pool;
      for (std::size_t i = queue.size(); i > 1; --i)
        std::swap(queue[i - 1], queue[rng_.next_below(static_cast<std::uint32_t>(i))]);
    }
    const int idx = queue.back();
    queue.pop_back();
    return idx;
  }

  std::vector<int> labeled_pool_, unlabeled_pool_;
  std::vector<int> labeled_q_, unlabeled_q_;
  int batch_size_;
  Pcg32 rng_;
};

}  // namespace mcnet
