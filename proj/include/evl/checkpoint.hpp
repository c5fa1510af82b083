// Versioned binary checkpoints. Layout, all little-endian:
//   magic "HNSY" | u32 version | u32 param count
//   per parameter: u32 name length | name bytes | u32 rank | u64 extents...
//                  | f32 values...
// Values are stored as 32-bit floats regardless of the compute precision.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "evl/nn.hpp"
#include "evl/tensor.hpp"

namespace evl {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr char kCheckpointMagic[4] = {'H', 'N', 'S', 'Y'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_le(std::ofstream& f, T v) {
  // x86-64 is little-endian; raw write matches the format
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw CheckpointError("checkpoint truncated");
  return v;
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const ParamRefs<S>& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint: " + path);
  f.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(f, kCheckpointVersion);
  detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(p->name.size()));
    f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(p->t.rank()));
    for (int i = 0; i < p->t.rank(); ++i)
      detail::write_le<std::uint64_t>(f, static_cast<std::uint64_t>(p->t.dim(i)));
    for (S v : p->t.values()) detail::write_le<float>(f, static_cast<float>(v));
  }
  if (!f) throw CheckpointError("write failed: " + path);
}

template <class S>
void load_checkpoint(const std::string& path, const ParamRefs<S>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic in " + path);
  if (detail::read_le<std::uint32_t>(f) != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version in " + path);
  const auto count = detail::read_le<std::uint32_t>(f);

  std::map<std::string, std::pair<Shape, std::vector<float>>> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_le<std::uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto rank = detail::read_le<std::uint32_t>(f);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r)
      shape.push_back(static_cast<std::int64_t>(detail::read_le<std::uint64_t>(f)));
    std::vector<float> vals(static_cast<std::size_t>(numel_of(shape)));
    for (auto& v : vals) v = detail::read_le<float>(f);
    if (!stored.emplace(std::move(name), std::make_pair(std::move(shape), std::move(vals))).second)
      throw CheckpointError("duplicate parameter in checkpoint");
  }
  if (stored.size() != params.size())
    throw CheckpointError("checkpoint holds " + std::to_string(stored.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
  for (auto* p : params) {
    auto it = stored.find(p->name);
    if (it == stored.end())
      throw CheckpointError("checkpoint missing parameter " + p->name);
    if (it->second.first != p->t.shape())
      throw CheckpointError("shape mismatch for " + p->name);
    auto& dst = p->t.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(it->second.second[i]);
  }
}

}  // namespace evl
