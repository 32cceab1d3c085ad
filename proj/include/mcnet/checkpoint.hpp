#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "model.hpp"

namespace mcnet {

// Binary checkpoint: magic "MCNF", version u32, tensor count u32, then per
// tensor: name length u16, name bytes, ndim u8, dims u32 each, values as
// 32-bit floats. All integers and floats little-endian. A synthetic tensor
// named "__config__" stores the architecture so a checkpoint is self-describing.

namespace detail {

inline constexpr char kMagic[4] = {'M', 'C', 'N', 'F'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr const char* kConfigTensor = "__config__";

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot open '" + path + "' for writing");
  }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v & 0xff));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void close() {
    out_.close();
    if (!out_) throw DataError("write to '" + path_ + "' failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open '" + path + "'");
  }
  std::uint8_t u8() {
    int c = in_.get();
    if (c == EOF) fail();
    ++offset_;
    return static_cast<std::uint8_t>(c);
  }
  std::uint16_t u16() {
    std::uint16_t lo = u8(), hi = u8();
    return static_cast<std::uint16_t>(lo | (hi << 8));
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail();
    offset_ += n;
    return s;
  }
  std::size_t offset() const { return offset_; }
  [[noreturn]] void fail() const {
    throw DataError("'" + path_ + "': truncated at byte " + std::to_string(offset_));
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

inline std::vector<float> encode_config(const ModelConfig& cfg) {
  std::vector<float> v = {static_cast<float>(cfg.in_channels),
                          static_cast<float>(cfg.num_classes),
                          static_cast<float>(cfg.base_width),
                          static_cast<float>(cfg.depth),
                          static_cast<float>(cfg.n_decoders),
                          cfg.norm_enabled ? 1.0f : 0.0f,
                          static_cast<float>(cfg.bn_momentum),
                          static_cast<float>(cfg.bn_eps)};
  for (DecoderMode m : cfg.resolved_modes()) v.push_back(static_cast<float>(m));
  return v;
}

inline ModelConfig decode_config(const std::vector<float>& v) {
  if (v.size() < 8) throw DataError("checkpoint: malformed __config__ tensor");
  ModelConfig cfg;
  cfg.in_channels = static_cast<int>(v[0]);
  cfg.num_classes = static_cast<int>(v[1]);
  cfg.base_width = static_cast<int>(v[2]);
  cfg.depth = static_cast<int>(v[3]);
  cfg.n_decoders = static_cast<int>(v[4]);
  cfg.norm_enabled = v[5] != 0.0f;
  cfg.bn_momentum = static_cast<double>(v[6]);
  cfg.bn_eps = static_cast<double>(v[7]);
  if (v.size() != 8 + static_cast<std::size_t>(cfg.n_decoders))
    throw DataError("checkpoint: __config__ decoder mode list truncated");
  for (int i = 0; i < cfg.n_decoders; ++i) {
    const int m = static_cast<int>(v[8 + static_cast<std::size_t>(i)]);
    if (m < 0 || m > 2) throw DataError("checkpoint: bad decoder mode code");
    cfg.decoder_modes.push_back(static_cast<DecoderMode>(m));
  }
  return cfg;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model) {
  namespace fs = std::filesystem;
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);

  detail::ByteWriter w(path);
  w.bytes(detail::kMagic, 4);
  w.u32(detail::kVersion);
  w.u32(static_cast<std::uint32_t>(model.params().size() + 1));

  auto write_tensor = [&w](const std::string& name, const std::vector<int>& shape,
                           const auto& values) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (auto v : values) w.f32(static_cast<float>(v));
  };

  const auto cfg_vec = detail::encode_config(model.config());
  write_tensor(detail::kConfigTensor, {static_cast<int>(cfg_vec.size())}, cfg_vec);
  for (auto& p : model.params()) write_tensor(p.name, p.tensor.shape(), p.tensor.values());
  w.close();
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  detail::ByteReader r(path);
  const std::string magic = r.str(4);
  if (magic != std::string(detail::kMagic, 4))
    throw DataError("'" + path + "': bad magic at byte 0 (not a checkpoint)");
  const std::uint32_t version = r.u32();
  if (version != detail::kVersion)
    throw DataError("'" + path + "': unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  struct Entry {
    std::vector<int> shape;
    std::vector<float> values;
  };
  std::vector<std::pair<std::string, Entry>> entries;
  entries.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t len = r.u16();
    std::string name = r.str(len);
    const std::uint8_t ndim = r.u8();
    Entry e;
    std::size_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim == 0 || dim > (1u << 28)) throw DataError("'" + path + "': bad tensor dim");
      e.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    e.values.resize(numel);
    for (std::size_t i = 0; i < numel; ++i) e.values[i] = r.f32();
    entries.emplace_back(std::move(name), std::move(e));
  }

  const auto cfg_it =
      std::find_if(entries.begin(), entries.end(),
                   [](const auto& kv) { return kv.first == detail::kConfigTensor; });
  if (cfg_it == entries.end())
    throw DataError("'" + path + "': missing __config__ tensor");
  Model<T> model(detail::decode_config(cfg_it->second.values), 0);

  std::size_t used = 1;
  for (auto& p : model.params()) {
    const auto it = std::find_if(entries.begin(), entries.end(),
                                 [&p](const auto& kv) { return kv.first == p.name; });
    if (it == entries.end())
      throw DataError("'" + path + "': missing tensor '" + p.name + "'");
    if (it->second.shape != p.tensor.shape())
      throw DataError("'" + path + "': tensor '" + p.name + "' has shape " +
                      shape_str(it->second.shape) + ", expected " + shape_str(p.tensor.shape()));
    for (std::size_t i = 0; i < p.tensor.size(); ++i)
      p.tensor.values()[i] = static_cast<T>(it->second.values[i]);
    ++used;
  }
  if (used != entries.size())
    throw DataError("'" + path + "': checkpoint holds tensors unknown to this architecture");
  return model;
}

}  // namespace mcnet
