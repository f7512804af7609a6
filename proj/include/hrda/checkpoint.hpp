// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "hrda/model.hpp"

namespace hrda {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) fail("checkpoint: truncated file " + path);
  return v;
}
inline std::int32_t read_i32(std::istream& is, const std::string& path) {
  std::int32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) fail("checkpoint: truncated file " + path);
  return v;
}

}  // namespace detail

// Flat little-endian binary checkpoint: magic, version, model config, then
// every named tensor (name, shape, raw f64 data). Round-trips bit-exactly.
inline void save_params(const NetworkParams& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("checkpoint: cannot open " + path + " for writing");
  os.write("HRDA", 4);
  detail::write_u32(os, 1);
  detail::write_i32(os, p.cfg.in_channels);
  detail::write_i32(os, p.cfg.num_classes);
  detail::write_i32(os, p.cfg.kernel);
  detail::write_u32(os, static_cast<std::uint32_t>(p.cfg.channels.size()));
  for (std::size_t i = 0; i < p.cfg.channels.size(); ++i) {
    detail::write_i32(os, p.cfg.channels[i]);
    detail::write_i32(os, p.cfg.strides[i]);
  }
  auto named = p.named();
  detail::write_u32(os, static_cast<std::uint32_t>(named.size()));
  for (auto& [name, t] : named) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) detail::write_i32(os, t.dim(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(real)));
  }
  if (!os) fail("checkpoint: write failed for " + path);
}

inline NetworkParams load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "HRDA")
    fail("checkpoint: bad magic in " + path);
  std::uint32_t version = detail::read_u32(is, path);
  if (version != 1) fail("checkpoint: unsupported version in " + path);

  ModelConfig cfg;
  cfg.in_channels = detail::read_i32(is, path);
  cfg.num_classes = detail::read_i32(is, path);
  cfg.kernel = detail::read_i32(is, path);
  std::uint32_t blocks = detail::read_u32(is, path);
  cfg.channels.clear();
  cfg.strides.clear();
  for (std::uint32_t i = 0; i < blocks; ++i) {
    cfg.channels.push_back(detail::read_i32(is, path));
    cfg.strides.push_back(detail::read_i32(is, path));
  }
  cfg.validate();

  Rng dummy(0);
  NetworkParams p = NetworkParams::init(cfg, dummy);
  auto named = p.named();
  std::uint32_t count = detail::read_u32(is, path);
  if (count != named.size()) fail("checkpoint: tensor count mismatch in " + path);
  for (auto& [name, t] : named) {
    std::uint32_t len = detail::read_u32(is, path);
    std::string got(len, '\0');
    if (!is.read(got.data(), len)) fail("checkpoint: truncated file " + path);
    if (got != name) fail("checkpoint: expected tensor " + name + ", found " + got + " in " + path);
    std::uint32_t rank = detail::read_u32(is, path);
    if (static_cast<int>(rank) != t.rank()) fail("checkpoint: rank mismatch for " + name);
    for (int d = 0; d < t.rank(); ++d)
      if (detail::read_i32(is, path) != t.dim(d)) fail("checkpoint: shape mismatch for " + name);
    Tensor h = t;
    if (!is.read(reinterpret_cast<char*>(h.data()),
                 static_cast<std::streamsize>(h.size() * sizeof(real))))
      fail("checkpoint: truncated file " + path);
  }
  return p;
}

}  // namespace hrda
