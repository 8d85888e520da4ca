#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "afrcnn/common.hpp"
#include "afrcnn/image.hpp"
#include "afrcnn/nn.hpp"

namespace afrcnn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Raised when stored training state disagrees with the caller (config hash
// mismatch, missing tensors, shape drift); the CLI maps it to exit 3.
class StateMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::uint64_t iteration = 0;  // global iteration across all stages
  std::uint32_t stage = 1;      // 1..3 while training, 4 when complete
  std::string rng_state;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_raw(std::string& buf, T v) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));
}

inline void put_str(std::string& buf, const std::string& s) {
  put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
  buf.append(s);
}

struct Reader {
  const std::uint8_t* p;
  std::size_t n, pos = 0;

  template <typename T>
  T raw() {
    if (pos + sizeof(T) > n) throw StateMismatchError("checkpoint truncated");
    T v;
    std::memcpy(&v, p + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }

  std::string str() {
    const auto len = raw<std::uint32_t>();
    if (pos + len > n) throw StateMismatchError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
};

}  // namespace detail

// Single-file binary: magic, version, meta, then a directory of named
// float32 tensors with explicit shapes.
inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            std::vector<NamedTensor<float>> tensors) {
  std::string buf;
  buf.append("AFCK", 4);
  buf.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_raw<std::uint64_t>(buf, meta.config_hash);
  detail::put_raw<std::uint64_t>(buf, meta.iteration);
  detail::put_raw<std::uint32_t>(buf, meta.stage);
  detail::put_str(buf, meta.rng_state);
  detail::put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (auto& t : tensors) {
    std::vector<int> dims = t.dims;
    if (dims.empty()) dims = {static_cast<int>(t.data->size())};
    std::size_t prod = 1;
    for (const int d : dims) prod *= static_cast<std::size_t>(d);
    if (prod != t.data->size())
      throw std::logic_error("checkpoint: declared shape of " + t.name + " disagrees with data");
    detail::put_str(buf, t.name);
    detail::put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(dims.size()));
    for (const int d : dims) detail::put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    buf.append(reinterpret_cast<const char*>(t.data->data()), t.data->size() * sizeof(float));
  }
  // write-then-rename so an interrupt never leaves a half-written file
  const std::string tmp = path + ".tmp";
  write_file_bytes(tmp, buf.data(), buf.size());
  std::filesystem::rename(tmp, path);
}

inline CheckpointMeta read_checkpoint_header(detail::Reader& r) {
  if (r.n < 5 || std::memcmp(r.p, "AFCK", 4) != 0)
    throw StateMismatchError("not a checkpoint file (bad magic)");
  r.pos = 4;
  const auto version = r.raw<std::uint8_t>();
  if (version != kCheckpointVersion)
    throw StateMismatchError("unsupported checkpoint version " + std::to_string(version));
  CheckpointMeta meta;
  meta.config_hash = r.raw<std::uint64_t>();
  meta.iteration = r.raw<std::uint64_t>();
  meta.stage = r.raw<std::uint32_t>();
  meta.rng_state = r.str();
  return meta;
}

inline CheckpointMeta peek_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  detail::Reader r{bytes.data(), bytes.size()};
  return read_checkpoint_header(r);
}

// Fills the registered tensors by name. Every stored tensor must be wanted
// and every wanted tensor stored, with matching shapes.
inline CheckpointMeta load_checkpoint(const std::string& path,
                                      std::vector<NamedTensor<float>> tensors) {
  const auto bytes = read_file_bytes(path);
  detail::Reader r{bytes.data(), bytes.size()};
  const CheckpointMeta meta = read_checkpoint_header(r);
  const auto count = r.raw<std::uint32_t>();
  std::vector<bool> filled(tensors.size(), false);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.str();
    const auto ndim = r.raw<std::uint32_t>();
    std::size_t prod = 1;
    std::vector<int> dims;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      dims.push_back(static_cast<int>(r.raw<std::uint32_t>()));
      prod *= static_cast<std::size_t>(dims.back());
    }
    if (r.pos + prod * sizeof(float) > r.n) throw StateMismatchError("checkpoint truncated");
    bool matched = false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name != name) continue;
      if (tensors[i].data->size() != prod)
        throw StateMismatchError("tensor " + name + " has stored size " + std::to_string(prod) +
                                 ", expected " + std::to_string(tensors[i].data->size()));
      std::memcpy(tensors[i].data->data(), r.p + r.pos, prod * sizeof(float));
      filled[i] = true;
      matched = true;
      break;
    }
    if (!matched) throw StateMismatchError("checkpoint holds unknown tensor " + name);
    r.pos += prod * sizeof(float);
  }
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (!filled[i]) throw StateMismatchError("checkpoint missing tensor " + tensors[i].name);
  return meta;
}

inline std::uint64_t file_hash(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return fnv1a(bytes.data(), bytes.size());
}

}  // namespace afrcnn
