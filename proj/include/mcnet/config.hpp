#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "model.hpp"
#include "objective.hpp"

namespace mcnet {

enum class LrSchedule { constant, poly };

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "poly") return LrSchedule::poly;
  throw ConfigError("unknown lr_schedule '" + s + "' (expected constant|poly)");
}

struct TrainConfig {
  std::string dataset;
  std::uint64_t seed = 1337;
  long iterations = 3000;
  int batch_size = 4;
  double lr = 1e-2;
  double weight_decay = 1e-4;
  LrSchedule lr_schedule = LrSchedule::constant;
  double lambda = 0.5;
  double beta_max = 0.1;
  long ramp_iters = -1;  // -1: use `iterations`
  double T = 0.1;
  int n_decoders = 3;
  std::vector<DecoderMode> decoder_modes;  // empty: default cycle
  Discrepancy discrepancy = Discrepancy::mse;
  Variant variant = Variant::mc;
  long eval_every = 500;
  std::string checkpoint = "checkpoint.mcnf";
  bool no_detach = false;  // CLI flag, not a config key: gradients through pseudo labels

  long effective_ramp_iters() const { return ramp_iters < 0 ? iterations : ramp_iters; }

  void validate() const {
    if (dataset.empty()) throw ConfigError("dataset path not set");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (batch_size < 2 || batch_size % 2 != 0)
      throw ConfigError("batch_size must be a positive even number");
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (lambda < 0 || beta_max < 0) throw ConfigError("lambda and beta_max must be >= 0");
    if (T <= 0) throw ConfigError("T must be positive");
    if (n_decoders < 1) throw ConfigError("n_decoders must be >= 1");
    if (!decoder_modes.empty() && static_cast<int>(decoder_modes.size()) != n_decoders)
      throw ConfigError("decoder_modes must list exactly n_decoders modes");
    if (variant != Variant::supervised && n_decoders < 2)
      throw ConfigError("variant '" + variant_name(variant) + "' needs n_decoders >= 2");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (checkpoint.empty()) throw ConfigError("checkpoint path not set");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long r = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::logic_error&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::logic_error&) {
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::logic_error&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const std::string item =
        trim(comma == std::string::npos ? v.substr(start) : v.substr(start, comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

// Plain `key = value` lines; blank lines and '#' comment lines allowed.
inline std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    kv.emplace_back(key, value);
  }
  return kv;
}

inline TrainConfig parse_train_config(const std::vector<std::pair<std::string, std::string>>& kv,
                                      const std::string& source = "config") {
  TrainConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "dataset") c.dataset = value;
    else if (key == "seed") c.seed = detail::parse_u64(key, value);
    else if (key == "iterations") c.iterations = detail::parse_long(key, value);
    else if (key == "batch_size") c.batch_size = static_cast<int>(detail::parse_long(key, value));
    else if (key == "lr") c.lr = detail::parse_double(key, value);
    else if (key == "weight_decay") c.weight_decay = detail::parse_double(key, value);
    else if (key == "lr_schedule") c.lr_schedule = parse_lr_schedule(value);
    else if (key == "lambda") c.lambda = detail::parse_double(key, value);
    else if (key == "beta_max") c.beta_max = detail::parse_double(key, value);
    else if (key == "ramp_iters") c.ramp_iters = detail::parse_long(key, value);
    else if (key == "T") c.T = detail::parse_double(key, value);
    else if (key == "n_decoders") c.n_decoders = static_cast<int>(detail::parse_long(key, value));
    else if (key == "decoder_modes") {
      c.decoder_modes.clear();
      for (const auto& m : detail::split_list(value)) c.decoder_modes.push_back(parse_decoder_mode(m));
    } else if (key == "discrepancy") {
      if (value == "MSE" || value == "mse") c.discrepancy = Discrepancy::mse;
      else if (value == "KL" || value == "kl") c.discrepancy = Discrepancy::kl;
      else throw ConfigError("key 'discrepancy': expected MSE or KL, got '" + value + "'");
    } else if (key == "variant") c.variant = parse_variant(value);
    else if (key == "eval_every") c.eval_every = detail::parse_long(key, value);
    else if (key == "checkpoint") c.checkpoint = value;
    else throw ConfigError(source + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline GenConfig parse_gen_config(const std::vector<std::pair<std::string, std::string>>& kv,
                                  const std::string& source = "config") {
  GenConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "seed") c.seed = detail::parse_u64(key, value);
    else if (key == "count_train") c.count_train = static_cast<int>(detail::parse_long(key, value));
    else if (key == "count_val") c.count_val = static_cast<int>(detail::parse_long(key, value));
    else if (key == "count_test") c.count_test = static_cast<int>(detail::parse_long(key, value));
    else if (key == "size") c.size = static_cast<int>(detail::parse_long(key, value));
    else if (key == "branch_count_min") c.branch_count_min = static_cast<int>(detail::parse_long(key, value));
    else if (key == "branch_count_max") c.branch_count_max = static_cast<int>(detail::parse_long(key, value));
    else if (key == "branch_width_min") c.branch_width_min = static_cast<int>(detail::parse_long(key, value));
    else if (key == "branch_width_max") c.branch_width_max = static_cast<int>(detail::parse_long(key, value));
    else if (key == "noise_sigma") c.noise_sigma = detail::parse_double(key, value);
    else if (key == "intensity_inhomogeneity") c.intensity_inhomogeneity = detail::parse_double(key, value);
    else if (key == "labeled_fraction") c.labeled_fraction = detail::parse_double(key, value);
    else if (key == "root") c.root = value;
    else throw ConfigError(source + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

}  // namespace mcnet
