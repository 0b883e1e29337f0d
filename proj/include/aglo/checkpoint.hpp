#pragma once

// Checkpoint container shared by the representation and policy stages:
//
//   magic "AGLOCKPT" | u32 version | str kind | str config-json | u64 seed
//   | u32 tensor-count | { str name | u32 rows | u32 cols | f32[rows*cols] }*
//
// Strings are u32-length-prefixed, tensors row-major, everything little-endian.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "aglo/binary_io.hpp"
#include "aglo/nn.hpp"

namespace aglo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::map<std::string, ad::Mat> tensors;

  std::string serialize() const {
    io::ByteWriter w;
    w.bytes("AGLOCKPT");
    w.u32(kCheckpointVersion);
    w.str(kind);
    w.str(config.dump());
    w.u64(seed);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) {
      w.str(name);
      w.u32(static_cast<std::uint32_t>(m.rows()));
      w.u32(static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
    }
    return w.data();
  }

  static Checkpoint deserialize(std::string_view bytes, const std::string& context) {
    io::ByteReader r(bytes, context);
    if (r.bytes(8, "magic") != "AGLOCKPT") fail(ErrorKind::format_error, context + ": bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
      fail(ErrorKind::format_error, context + ": checkpoint version expected " + std::to_string(kCheckpointVersion) +
                                        ", found " + std::to_string(version));
    Checkpoint c;
    c.kind = r.str("kind");
    const std::string cfg = r.str("config");
    try {
      c.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format_error, context + ": config echo is not valid JSON: " + e.what());
    }
    c.seed = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = r.str("tensor name");
      const std::uint32_t rows = r.u32();
      const std::uint32_t cols = r.u32();
      ad::Mat m(rows, cols);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<double>(r.f32());
      c.tensors.emplace(std::move(name), std::move(m));
    }
    if (!r.done()) fail(ErrorKind::format_error, context + ": trailing bytes after tensors");
    return c;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

  static Checkpoint load(const std::filesystem::path& path) {
    return deserialize(io::read_file(path), path.string());
  }

  void put_params(const std::string& prefix, const ad::ParamStore& store) {
    for (const auto& [name, p] : store) tensors[prefix + name] = p.value;
  }

  /// Copies tensors named `prefix + name` into an already-shaped store.
  void get_params(const std::string& prefix, ad::ParamStore& store) const {
    for (auto& [name, p] : store) {
      auto it = tensors.find(prefix + name);
      if (it == tensors.end()) fail(ErrorKind::format_error, "checkpoint is missing tensor " + prefix + name);
      if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
        fail(ErrorKind::format_error, "checkpoint tensor " + prefix + name + " has the wrong shape");
      p.value = it->second;
    }
  }

  void put_optimizer(const std::string& prefix, const nn::AdamOptimizer& opt) {
    put_params(prefix + "m/", opt.first_moment());
    put_params(prefix + "v/", opt.second_moment());
    ad::Mat steps(1, 1);
    steps(0, 0) = static_cast<double>(opt.steps());
    tensors[prefix + "steps"] = steps;
  }

  void get_optimizer(const std::string& prefix, nn::AdamOptimizer& opt) const {
    get_params(prefix + "m/", opt.first_moment());
    get_params(prefix + "v/", opt.second_moment());
    auto it = tensors.find(prefix + "steps");
    if (it == tensors.end()) fail(ErrorKind::format_error, "checkpoint is missing tensor " + prefix + "steps");
    opt.set_steps(static_cast<long>(it->second(0, 0)));
  }
};

}  // namespace aglo
