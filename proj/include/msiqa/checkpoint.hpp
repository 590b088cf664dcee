#pragma once

// Checkpoint archive.
//
// Byte layout (all integers little-endian):
//
//   "MSIQA-CKPT 1\n"                    format-version line
//   u64  metadata length M
//   M    bytes of "key=value\n" lines, keys sorted; '\\' and '\n' inside
//        values are escaped as "\\\\" and "\\n"
//   u64  tensor count N
//   N x {
//     u32  name length K, then K name bytes
//     u8   element width in bytes (4 = IEEE-754 binary32, 8 = binary64)
//     u64  rows, u64 cols
//     rows*cols little-endian elements, row-major
//   }
//
// Model checkpoints store BackboneConfig under "model." keys and parameters by
// name. Training checkpoints add optimizer moments ("optim.m.<name>",
// "optim.v.<name>") and "train.*" keys.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "msiqa/config.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/model.hpp"
#include "msiqa/parameters.hpp"

namespace msiqa {

inline constexpr const char* kCheckpointMagic = "MSIQA-CKPT 1\n";

struct ArchiveTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::uint8_t width = 8;
  std::vector<double> values;  // widened; float32 payloads are exactly representable
};

struct Archive {
  std::map<std::string, std::string> metadata;
  std::vector<ArchiveTensor> tensors;

  [[nodiscard]] const ArchiveTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  [[nodiscard]] const std::string& get(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw ConfigError("checkpoint missing key '" + key + "'");
    return it->second;
  }

  template <typename T>
  void put(const std::string& name, const Matrix<T>& m) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    ArchiveTensor t{name, m.rows, m.cols, static_cast<std::uint8_t>(sizeof(T)), {}};
    t.values.assign(m.data.begin(), m.data.end());
    tensors.push_back(std::move(t));
  }
};

namespace detail {

inline std::string escape_value(const std::string& v) {
  std::string out;
  for (char c : v) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else out += c;
  }
  return out;
}

inline std::string unescape_value(const std::string& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == '\\' && i + 1 < v.size()) {
      ++i;
      out += v[i] == 'n' ? '\n' : v[i];
    } else {
      out += v[i];
    }
  }
  return out;
}

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[nodiscard]] bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("truncated checkpoint '" + source_ + "'");
  }

  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Archive& a) {
  std::string meta;
  for (const auto& [k, v] : a.metadata) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos) {
      throw ContractError("checkpoint key '" + k + "' contains '=' or newline");
    }
    meta += k + "=" + detail::escape_value(v) + "\n";
  }
  std::string buf = kCheckpointMagic;
  detail::put_le<std::uint64_t>(buf, meta.size());
  buf += meta;
  detail::put_le<std::uint64_t>(buf, a.tensors.size());
  for (const auto& t : a.tensors) {
    if (t.values.size() != t.rows * t.cols) throw ContractError("tensor '" + t.name + "' size mismatch");
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    buf.push_back(static_cast<char>(t.width));
    detail::put_le<std::uint64_t>(buf, t.rows);
    detail::put_le<std::uint64_t>(buf, t.cols);
    for (double v : t.values) {
      if (t.width == 4) detail::put_le(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else detail::put_le(buf, std::bit_cast<std::uint64_t>(v));
    }
  }
  return buf;
}

inline Archive deserialize(const std::string& data, const std::string& source = "<memory>") {
  const std::string magic = kCheckpointMagic;
  if (data.compare(0, magic.size(), magic) != 0) {
    throw IoError("'" + source + "' is not a checkpoint (bad format-version line)");
  }
  detail::Reader r(data, source);
  r.bytes(magic.size());
  Archive a;
  const auto meta_len = r.le<std::uint64_t>();
  const std::string meta = r.bytes(meta_len);
  std::size_t start = 0;
  while (start < meta.size()) {
    const auto end = meta.find('\n', start);
    if (end == std::string::npos) throw IoError("unterminated metadata line in '" + source + "'");
    const std::string line = meta.substr(start, end - start);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("bad metadata line '" + line + "' in '" + source + "'");
    a.metadata[line.substr(0, eq)] = detail::unescape_value(line.substr(eq + 1));
    start = end + 1;
  }
  const auto count = r.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    ArchiveTensor t;
    t.name = r.bytes(r.le<std::uint32_t>());
    t.width = static_cast<std::uint8_t>(r.bytes(1)[0]);
    if (t.width != 4 && t.width != 8) throw IoError("tensor '" + t.name + "' has unsupported element width");
    t.rows = r.le<std::uint64_t>();
    t.cols = r.le<std::uint64_t>();
    t.values.resize(t.rows * t.cols);
    for (auto& v : t.values) {
      v = t.width == 4 ? static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>()))
                       : std::bit_cast<double>(r.le<std::uint64_t>());
    }
    a.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("trailing bytes in checkpoint '" + source + "'");
  return a;
}

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    const auto buf = serialize(a);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(data, path.string());
}

/// Adds model config and parameters to an archive.
template <typename T>
void store_model(Archive& a, const BackboneConfig& config, const ModelParameters<T>& params) {
  a.metadata["model.kind"] = "network";
  for (const auto& [k, v] : to_key_values(config)) a.metadata["model." + k] = v;
  for (const auto& e : params.entries()) a.put(e.name, e.value);
}

inline BackboneConfig load_backbone_config(const Archive& a) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : a.metadata) {
    if (k.rfind("model.", 0) == 0 && k != "model.kind") kv[k.substr(6)] = v;
  }
  return backbone_from_key_values(kv);
}

/// Loads parameters for `config`, validating every shape.
template <typename T>
ModelParameters<T> load_parameters(const Archive& a, const BackboneConfig& config) {
  Network<T> net(config);
  ModelParameters<T> p;
  for (const auto& spec : net.parameter_specs()) {
    const auto* t = a.find(spec.name);
    if (!t) throw ConfigError("checkpoint is missing parameter '" + spec.name + "'");
    if (t->rows != spec.rows || t->cols != spec.cols) {
      throw ConfigError("checkpoint parameter '" + spec.name + "' is " + shape_string(t->rows, t->cols) +
                        ", config expects " + shape_string(spec.rows, spec.cols));
    }
    Matrix<T> m(t->rows, t->cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<T>(t->values[i]);
    p.add(spec.name, std::move(m));
  }
  return p;
}

template <typename T>
void save_model(const std::filesystem::path& path, const BackboneConfig& config, const ModelParameters<T>& params) {
  Archive a;
  store_model(a, config, params);
  write_archive(path, a);
}

}  // namespace msiqa
