#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "uncertainty.hpp"

namespace mcnet {

inline double lr_at(const TrainConfig& cfg, long iter) {
  if (cfg.lr_schedule == LrSchedule::constant) return cfg.lr;
  const double frac = static_cast<double>(iter - 1) / static_cast<double>(cfg.iterations);
  return cfg.lr * std::pow(1.0 - frac, 0.9);
}

// theta <- theta - lr * (g + wd * theta)
template <typename T>
void sgd_step(const std::vector<std::pair<std::string, Tensor<T>>>& params, double lr,
              double weight_decay) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw NumericalError("parameter '" + name + "' has no gradient");
    auto& v = t.values();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i])))
        throw NumericalError("non-finite gradient in parameter '" + name + "'");
      v[i] -= static_cast<T>(lr * (static_cast<double>(g[i]) +
                                   weight_decay * static_cast<double>(v[i])));
    }
  }
}

namespace detail {

inline std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string sibling_path(const std::string& checkpoint, const std::string& suffix) {
  std::filesystem::path p(checkpoint);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

}  // namespace detail

template <typename T>
struct BatchTensors {
  Tensor<T> x;        // [B, 1, n, n]
  Tensor<T> y;        // [labeled_count, C, n, n]; undefined when labeled_count == 0
  int labeled_count = 0;
};

// Labeled samples first, each augmented by one op drawn in batch order.
template <typename T>
BatchTensors<T> make_batch_tensors(const Dataset& ds, const BatchSampler::Batch& batch,
                                   int model_classes, Pcg32* aug_rng) {
  std::vector<int> order = batch.labeled;
  order.insert(order.end(), batch.unlabeled.begin(), batch.unlabeled.end());
  const int b = static_cast<int>(order.size());
  const int nl = static_cast<int>(batch.labeled.size());
  const int n = ds.manifest.size;

  BatchTensors<T> out;
  out.labeled_count = nl;
  out.x = Tensor<T>({b, 1, n, n});
  if (nl > 0) out.y = Tensor<T>({nl, model_classes, n, n});

  const std::size_t plane = static_cast<std::size_t>(n) * n;
  for (int i = 0; i < b; ++i) {
    Sample s = ds.samples[order[i]];
    if (aug_rng) s = augment(s, *aug_rng);
    for (std::size_t p = 0; p < plane; ++p)
      out.x.values()[static_cast<std::size_t>(i) * plane + p] = static_cast<T>(s.image[p]);
    if (i < nl) {
      if (s.label.empty()) throw DataError("sample '" + s.id + "' drawn as labeled has no label");
      for (std::size_t p = 0; p < plane; ++p) {
        const int cls = s.label[p];
        if (model_classes == 1) {
          out.y.values()[static_cast<std::size_t>(i) * plane + p] = static_cast<T>(cls ? 1 : 0);
        } else {
          for (int c = 0; c < model_classes; ++c)
            out.y.values()[(static_cast<std::size_t>(i) * model_classes + c) * plane + p] =
                static_cast<T>(c == cls ? 1 : 0);
        }
      }
    }
  }
  return out;
}

// --- evaluation ---------------------------------------------------------

struct EvalRow {
  std::string id;
  double dice = 0, jaccard = 0;
  std::optional<double> hd95, asd;
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  EvalRow mean;  // id == "mean"; hd95/asd averaged over the defined cells
};

inline std::vector<std::uint8_t> binarize_probs(const std::vector<float>& probs, int c,
                                                std::size_t plane) {
  std::vector<std::uint8_t> ids(plane, 0);
  if (c == 1) {
    for (std::size_t p = 0; p < plane; ++p) ids[p] = probs[p] >= 0.5f ? 1 : 0;
  } else {
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      for (int k = 1; k < c; ++k)
        if (probs[static_cast<std::size_t>(k) * plane + p] >
            probs[static_cast<std::size_t>(best) * plane + p])
          best = k;
      ids[p] = static_cast<std::uint8_t>(best);
    }
  }
  return ids;
}

template <typename T>
std::vector<std::uint8_t> predict_sample(Model<T>& model, const Sample& s) {
  const int n = s.size;
  Tensor<T> x({1, 1, n, n});
  for (std::size_t p = 0; p < x.size(); ++p) x.values()[p] = static_cast<T>(s.image[p]);
  Graph<T> g;
  NoGradGuard<T> guard(g);
  Tensor<T> probs = model.forward_head(g, x, false);
  const int c = probs.dim(1);
  std::vector<float> pv(probs.size());
  for (std::size_t i = 0; i < pv.size(); ++i) pv[i] = static_cast<float>(probs.values()[i]);
  return binarize_probs(pv, c, static_cast<std::size_t>(n) * n);
}

template <typename T>
EvalSummary evaluate(Model<T>& model, const Dataset& ds, Split split) {
  const auto& indices = ds.split_indices(split);
  if (indices.empty()) throw DataError("split '" + split_name(split) + "' is empty");
  const int classes = ds.manifest.num_classes;

  EvalSummary out;
  double dice_sum = 0, jac_sum = 0, hd_sum = 0, asd_sum = 0;
  std::size_t hd_n = 0, asd_n = 0;
  for (const int idx : indices) {
    const Sample& s = ds.samples[idx];
    if (s.label.empty()) throw DataError("sample '" + s.id + "' has no label to evaluate against");
    const auto pred = predict_sample(model, s);

    MetricsReport r;
    if (classes <= 2) {
      BinaryMask pm{s.size, s.size, {}}, gm{s.size, s.size, {}};
      pm.v.assign(pred.begin(), pred.end());
      gm.v.assign(s.label.begin(), s.label.end());
      for (auto& v : pm.v) v = v ? 1 : 0;
      for (auto& v : gm.v) v = v ? 1 : 0;
      r = compute_metrics(pm, gm);
    } else {
      r = compute_metrics_multiclass(pred, s.label, s.size, s.size, classes);
    }

    EvalRow row{s.id, r.dice, r.jaccard, r.hd95, r.asd};
    dice_sum += row.dice;
    jac_sum += row.jaccard;
    if (row.hd95) { hd_sum += *row.hd95; ++hd_n; }
    if (row.asd) { asd_sum += *row.asd; ++asd_n; }
    out.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(out.rows.size());
  out.mean.id = "mean";
  out.mean.dice = dice_sum / n;
  out.mean.jaccard = jac_sum / n;
  if (hd_n) out.mean.hd95 = hd_sum / static_cast<double>(hd_n);
  if (asd_n) out.mean.asd = asd_sum / static_cast<double>(asd_n);
  return out;
}

inline void write_eval_csv(const std::string& path, const EvalSummary& summary) {
  if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "id,dice,jaccard,hd95,asd\n";
  auto cell = [](const std::optional<double>& v) { return v ? detail::fmt_g(*v) : std::string(); };
  for (const auto& r : summary.rows)
    out << r.id << ',' << detail::fmt_g(r.dice) << ',' << detail::fmt_g(r.jaccard) << ','
        << cell(r.hd95) << ',' << cell(r.asd) << '\n';
  const auto& m = summary.mean;
  out << m.id << ',' << detail::fmt_g(m.dice) << ',' << detail::fmt_g(m.jaccard) << ','
      << cell(m.hd95) << ',' << cell(m.asd) << '\n';
  if (!out) throw DataError("write failed for '" + path + "'");
}

// --- training ------------------------------------------------------------

struct EvalPoint {
  long iter = 0;
  double val_dice = 0;
  std::optional<double> val_uncertainty;  // absent when the model has < 2 decoders
};

template <typename T = float>
struct TrainResult {
  TrainConfig cfg;
  std::string runlog_path, evallog_path;
  std::vector<LossReport<T>> rows;
  std::vector<EvalPoint> evals;
  long encoder_forwards_training = 0;
  std::size_t trainable_params = 0;
  double wall_seconds = 0;
};

template <typename T>
double mean_val_uncertainty(Model<T>& model, const Dataset& ds) {
  double sum = 0;
  for (const int idx : ds.val) {
    const Sample& s = ds.samples[idx];
    Tensor<T> x({1, 1, s.size, s.size});
    for (std::size_t p = 0; p < x.size(); ++p) x.values()[p] = static_cast<T>(s.image[p]);
    Graph<T> g;
    NoGradGuard<T> guard(g);
    const auto outs = model.forward_all(g, x, false);
    sum += summarize_uncertainty(uncertainty_map(outs, UncertaintyStatistic::variance, 0));
  }
  return sum / static_cast<double>(ds.val.size());
}

template <typename T = float>
TrainResult<T> train(const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  Dataset ds = load_dataset(cfg.dataset);
  if (ds.val.empty()) throw DataError("dataset has no validation split");

  ModelConfig mcfg;
  mcfg.in_channels = 1;
  mcfg.num_classes = ds.manifest.num_classes <= 2 ? 1 : ds.manifest.num_classes;
  mcfg.n_decoders = cfg.n_decoders;
  mcfg.decoder_modes = cfg.decoder_modes;
  Model<T> model = build_model<T>(mcfg, cfg.seed);

  BatchSampler sampler(ds.labeled, ds.unlabeled, cfg.batch_size,
                       Pcg32(cfg.seed, fnv1a64("batch")));
  if (sampler.all_labeled_fallback() && cfg.variant != Variant::supervised)
    std::cerr << "warning: unlabeled pool is empty; drawing all-labeled batches\n";
  Pcg32 aug_rng(cfg.seed, fnv1a64("augment"));

  LossWeights weights;
  weights.lambda = cfg.lambda;
  weights.beta_max = cfg.beta_max;
  weights.ramp_iters = cfg.effective_ramp_iters();
  weights.discrepancy = cfg.discrepancy;
  SharpenConfig scfg;
  scfg.temperature = cfg.T;
  scfg.through_grad = cfg.no_detach;

  TrainResult<T> result;
  result.cfg = cfg;
  result.trainable_params = model.trainable_parameter_count();
  result.runlog_path = detail::sibling_path(cfg.checkpoint, ".runlog.csv");
  result.evallog_path = detail::sibling_path(cfg.checkpoint, ".evallog.csv");

  auto eval_point = [&](long iter) {
    EvalPoint p;
    p.iter = iter;
    p.val_dice = evaluate(model, ds, Split::val).mean.dice;
    if (cfg.n_decoders >= 2) p.val_uncertainty = mean_val_uncertainty(model, ds);
    result.evals.push_back(p);
  };
  eval_point(0);

  const auto params = model.trainable();
  for (long t = 1; t <= cfg.iterations; ++t) {
    const auto batch = sampler.make_batch();
    auto bt = make_batch_tensors<T>(ds, batch, mcfg.num_classes, &aug_rng);

    const long fwd_before = model.encoder_forwards();
    Graph<T> g;
    const auto outs = model.forward_all(g, bt.x, true);
    auto tl = total_loss(g, outs, bt.y, bt.labeled_count, t, cfg.variant, scfg, weights);
    if (!std::isfinite(static_cast<double>(tl.value.item())))
      throw NumericalError("non-finite loss at iteration " + std::to_string(t));
    g.backward(tl.value);
    sgd_step(params, lr_at(cfg, t), cfg.weight_decay);
    result.encoder_forwards_training += model.encoder_forwards() - fwd_before;

    result.rows.push_back(tl.report);
    if (t % cfg.eval_every == 0 || t == cfg.iterations) eval_point(t);
  }

  save_checkpoint(cfg.checkpoint, model);

  {
    std::ofstream log(result.runlog_path, std::ios::trunc);
    if (!log) throw DataError("cannot write '" + result.runlog_path + "'");
    log << "iter";
    for (int i = 1; i <= cfg.n_decoders; ++i) log << ",l_seg_" << i;
    log << ",l_mc,beta,total\n";
    for (const auto& r : result.rows) {
      log << r.iteration;
      for (const auto v : r.l_seg) log << ',' << detail::fmt_g(static_cast<double>(v));
      log << ',' << detail::fmt_g(static_cast<double>(r.l_mc)) << ','
          << detail::fmt_g(static_cast<double>(r.beta)) << ','
          << detail::fmt_g(static_cast<double>(r.total)) << '\n';
    }
  }
  {
    std::ofstream log(result.evallog_path, std::ios::trunc);
    if (!log) throw DataError("cannot write '" + result.evallog_path + "'");
    log << "iter,val_dice,val_uncertainty\n";
    for (const auto& p : result.evals)
      log << p.iter << ',' << detail::fmt_g(p.val_dice) << ','
          << (p.val_uncertainty ? detail::fmt_g(*p.val_uncertainty) : std::string()) << '\n';
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// --- sliding-window inference ---------------------------------------------

template <typename T>
struct ProbMap {
  int c = 0, h = 0, w = 0;
  std::vector<T> values;  // [c, h, w]
};

namespace detail {

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline std::vector<int> window_starts(int total, int patch, int stride) {
  std::vector<int> starts;
  for (int s = 0; s + patch <= total; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() != total - patch) starts.push_back(total - patch);
  return starts;
}

}  // namespace detail

// Overlapping patch logits averaged per pixel by coverage, then activated.
template <typename T>
ProbMap<T> infer_sliding(SubModel<T>& head, const std::vector<float>& image, int h, int w,
                         int patch, int stride) {
  if (h < 1 || w < 1 || static_cast<std::size_t>(h) * w != image.size())
    throw DataError("image dimensions do not match pixel count");
  if (patch < 1 || stride < 1) throw ConfigError("patch and stride must be >= 1");
  if (stride > patch)
    throw ConfigError("stride " + std::to_string(stride) + " exceeds patch " +
                      std::to_string(patch) + " (coverage gaps)");

  const int ph = std::max(h, patch), pw = std::max(w, patch);
  std::vector<float> padded(static_cast<std::size_t>(ph) * pw);
  for (int i = 0; i < ph; ++i)
    for (int j = 0; j < pw; ++j)
      padded[static_cast<std::size_t>(i) * pw + j] =
          image[static_cast<std::size_t>(detail::reflect_index(i, h)) * w +
                detail::reflect_index(j, w)];

  const auto rows = detail::window_starts(ph, patch, stride);
  const auto cols = detail::window_starts(pw, patch, stride);

  int channels = 0;
  std::vector<T> acc;
  std::vector<int> coverage(static_cast<std::size_t>(ph) * pw, 0);
  for (const int r0 : rows)
    for (const int c0 : cols) {
      Tensor<T> x({1, 1, patch, patch});
      for (int i = 0; i < patch; ++i)
        for (int j = 0; j < patch; ++j)
          x.values()[static_cast<std::size_t>(i) * patch + j] =
              static_cast<T>(padded[static_cast<std::size_t>(r0 + i) * pw + (c0 + j)]);
      Graph<T> g;
      NoGradGuard<T> guard(g);
      Tensor<T> logits = head.forward(g, x, false, /*activated=*/false);
      if (channels == 0) {
        channels = logits.dim(1);
        acc.assign(static_cast<std::size_t>(channels) * ph * pw, T(0));
      }
      const std::size_t plane = static_cast<std::size_t>(patch) * patch;
      for (int c = 0; c < channels; ++c)
        for (int i = 0; i < patch; ++i)
          for (int j = 0; j < patch; ++j)
            acc[(static_cast<std::size_t>(c) * ph + (r0 + i)) * pw + (c0 + j)] +=
                logits.values()[static_cast<std::size_t>(c) * plane +
                                static_cast<std::size_t>(i) * patch + j];
      for (int i = 0; i < patch; ++i)
        for (int j = 0; j < patch; ++j)
          ++coverage[static_cast<std::size_t>(r0 + i) * pw + (c0 + j)];
    }

  Tensor<T> mean_logits({1, channels, h, w});
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const std::size_t src = (static_cast<std::size_t>(c) * ph + i) * pw + j;
        mean_logits.values()[(static_cast<std::size_t>(c) * h + i) * w + j] =
            acc[src] / static_cast<T>(coverage[static_cast<std::size_t>(i) * pw + j]);
      }

  Graph<T> g;
  NoGradGuard<T> guard(g);
  Tensor<T> probs =
      channels == 1 ? sigmoid(g, mean_logits) : softmax_channels(g, mean_logits);
  ProbMap<T> out;
  out.c = channels;
  out.h = h;
  out.w = w;
  out.values = probs.values();
  return out;
}

// --- ablation --------------------------------------------------------------

struct AblationRow {
  std::string axis, value;
  std::size_t params = 0;
  double dice = 0, jaccard = 0;
  std::optional<double> hd95, asd;
};

inline TrainConfig apply_axis_value(TrainConfig cfg, const std::string& axis,
                                    const std::string& value) {
  if (axis == "variant") cfg.variant = parse_variant(value);
  else if (axis == "n_decoders") cfg.n_decoders = static_cast<int>(detail::parse_long(axis, value));
  else if (axis == "T") cfg.T = detail::parse_double(axis, value);
  else if (axis == "lambda") cfg.lambda = detail::parse_double(axis, value);
  else if (axis == "discrepancy") {
    if (value == "MSE" || value == "mse") cfg.discrepancy = Discrepancy::mse;
    else if (value == "KL" || value == "kl") cfg.discrepancy = Discrepancy::kl;
    else throw ConfigError("axis 'discrepancy': expected MSE or KL, got '" + value + "'");
  } else {
    throw ConfigError("unknown ablation axis '" + axis +
                      "' (expected variant|n_decoders|T|lambda|discrepancy)");
  }
  std::filesystem::path p(cfg.checkpoint);
  cfg.checkpoint =
      (p.parent_path() / (p.stem().string() + "_" + axis + "_" + value + p.extension().string()))
          .string();
  cfg.validate();
  return cfg;
}

template <typename T = float>
std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::string& axis,
                                      const std::vector<std::string>& values,
                                      const std::string& out_csv) {
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  std::vector<AblationRow> rows;
  for (const auto& value : values) {
    const TrainConfig cfg = apply_axis_value(base, axis, value);
    const auto res = train<T>(cfg);
    Model<T> model = load_checkpoint<T>(cfg.checkpoint);
    Dataset ds = load_dataset(cfg.dataset);
    const auto summary = evaluate(model, ds, Split::test);
    AblationRow row{axis, value, res.trainable_params, summary.mean.dice, summary.mean.jaccard,
                    summary.mean.hd95, summary.mean.asd};
    rows.push_back(std::move(row));
  }

  if (const auto parent = std::filesystem::path(out_csv).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  std::ofstream out(out_csv, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + out_csv + "'");
  out << "axis,value,params,dice,jaccard,hd95,asd\n";
  auto cell = [](const std::optional<double>& v) { return v ? detail::fmt_g(*v) : std::string(); };
  for (const auto& r : rows)
    out << r.axis << ',' << r.value << ',' << r.params << ',' << detail::fmt_g(r.dice) << ','
        << detail::fmt_g(r.jaccard) << ',' << cell(r.hd95) << ',' << cell(r.asd) << '\n';
  return rows;
}

}  // namespace mcnet
