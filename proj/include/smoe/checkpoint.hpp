#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "smoe/config.hpp"
#include "smoe/optim.hpp"

namespace smoe {

// Checkpoint container (version 1, documented in docs/formats.md):
//   magic   "SMOECKP1"                          8 bytes
//   u64     config text length, then the RunConfig key=value text
//   i64     optimizer step counter
//   u64     parameter count, then per parameter:
//     u32   name length, then the name bytes
//     i32   rows, i32 cols
//     f64[] value, f64[] adam_m, f64[] adam_v   (little-endian, row-major)
//   u8      trailer: 0 = clean, 1 = training aborted (partial checkpoint)
inline constexpr char kCheckpointMagic[9] = "SMOECKP1";

namespace detail {

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(f.good(), "checkpoint: truncated file");
  return v;
}

inline void write_doubles(std::ofstream& f, const std::vector<double>& v) {
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::ifstream& f, std::vector<double>& v) {
  f.read(reinterpret_cast<char*>(v.data()),
         static_cast<std::streamsize>(v.size() * sizeof(double)));
  require(f.good(), "checkpoint: truncated parameter data");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                            const ParameterStore& store, bool failure_marker = false) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot write checkpoint " + path.string());
  f.write(kCheckpointMagic, 8);
  const std::string config_text = serialize_config(cfg);
  detail::write_pod<std::uint64_t>(f, config_text.size());
  f.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  detail::write_pod<std::int64_t>(f, store.step());
  detail::write_pod<std::uint64_t>(f, store.params().size());
  for (const auto& [name, p] : store.params()) {
    detail::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::int32_t>(f, p.value.rows);
    detail::write_pod<std::int32_t>(f, p.value.cols);
    detail::write_doubles(f, p.value.data);
    detail::write_doubles(f, p.adam_m.data);
    detail::write_doubles(f, p.adam_v.data);
  }
  detail::write_pod<std::uint8_t>(f, failure_marker ? 1 : 0);
  require(f.good(), "checkpoint write failed: " + path.string());
}

struct LoadedCheckpoint {
  RunConfig config;
  bool failure_marker = false;
};

// Restores parameters and optimizer state into a store built from the
// checkpoint's own config; shapes and names must match exactly.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        ParameterStore& store) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot read checkpoint " + path.string());
  char magic[8];
  f.read(magic, 8);
  require(f.good() && std::string(magic, 8) == kCheckpointMagic, "not a checkpoint file");
  const auto cfg_len = detail::read_pod<std::uint64_t>(f);
  std::string config_text(cfg_len, '\0');
  f.read(config_text.data(), static_cast<std::streamsize>(cfg_len));
  require(f.good(), "checkpoint: truncated config");
  LoadedCheckpoint out;
  out.config = parse_config(config_text);
  const auto step = detail::read_pod<std::int64_t>(f);
  const auto n_params = detail::read_pod<std::uint64_t>(f);
  require(n_params == store.params().size(),
          "checkpoint/config mismatch: parameter count differs");
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    require(f.good(), "checkpoint: truncated name");
    require(store.has(name), "checkpoint/config mismatch: unexpected parameter " + name);
    Param& p = store.at(name);
    const auto rows = detail::read_pod<std::int32_t>(f);
    const auto cols = detail::read_pod<std::int32_t>(f);
    require(rows == p.value.rows && cols == p.value.cols,
            "checkpoint/config mismatch: shape of " + name);
    detail::read_doubles(f, p.value.data);
    detail::read_doubles(f, p.adam_m.data);
    detail::read_doubles(f, p.adam_v.data);
  }
  store.set_step(step);
  out.failure_marker = detail::read_pod<std::uint8_t>(f) != 0;
  return out;
}

// Peek at the embedded config without restoring parameters.
inline RunConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot read checkpoint " + path.string());
  char magic[8];
  f.read(magic, 8);
  require(f.good() && std::string(magic, 8) == kCheckpointMagic, "not a checkpoint file");
  const auto cfg_len = detail::read_pod<std::uint64_t>(f);
  std::string config_text(cfg_len, '\0');
  f.read(config_text.data(), static_cast<std::streamsize>(cfg_len));
  require(f.good(), "checkpoint: truncated config");
  return parse_config(config_text);
}

}  // namespace smoe
