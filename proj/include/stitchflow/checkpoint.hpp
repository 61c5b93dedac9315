// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat named-tensor archive: an 8-byte magic, a little-endian u32 header
// length, a JSON header listing (name, dtype, shape, offset, nbytes) plus a
// free-form metadata block, then contiguous little-endian tensor payloads.
// Matrices are stored column-major; loads may widen f32 -> f64 but never
// narrow silently.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stitchflow/errors.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'C', 'H', 'K', 'P', 'T', '1'};

struct TensorBlob {
  std::string dtype;  // "f32" or "f64"
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;

  std::int64_t element_count() const {
    std::int64_t n = 1;
    for (const std::int64_t d : shape) n *= d;
    return n;
  }
};

namespace checkpoint_detail {

template <typename S>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<S, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<S, double>, "checkpoint scalars are float or double");
    return "f64";
  }
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw CorruptCheckpoint("unknown tensor dtype '" + dtype + "'");
}

template <typename S>
TensorBlob pack(const S* data, std::int64_t count, std::vector<std::int64_t> shape) {
  TensorBlob blob;
  blob.dtype = dtype_name<S>();
  blob.shape = std::move(shape);
  blob.bytes.resize(static_cast<std::size_t>(count) * sizeof(S));
  std::memcpy(blob.bytes.data(), data, blob.bytes.size());
  return blob;
}

template <typename S>
void unpack(const TensorBlob& blob, const std::string& name, S* out, std::int64_t count) {
  if (blob.element_count() != count) {
    throw CorruptCheckpoint("tensor '" + name + "' holds " + std::to_string(blob.element_count()) +
                            " elements, expected " + std::to_string(count));
  }
  if (blob.dtype == dtype_name<S>()) {
    std::memcpy(out, blob.bytes.data(), blob.bytes.size());
    return;
  }
  if (blob.dtype == "f32" && std::is_same_v<S, double>) {
    const float* src = reinterpret_cast<const float*>(blob.bytes.data());
    for (std::int64_t i = 0; i < count; ++i) out[i] = static_cast<double>(src[i]);
    return;
  }
  throw CorruptCheckpoint("tensor '" + name + "' has dtype " + blob.dtype +
                          "; refusing lossy narrowing to " + dtype_name<S>());
}

}  // namespace checkpoint_detail

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, TensorBlob> tensors;  // sorted: stable file layout

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  template <typename S>
  void put_matrix(const std::string& name, const Mat<S>& m) {
    tensors[name] = checkpoint_detail::pack(m.data(), m.size(), {m.rows(), m.cols()});
  }

  template <typename S>
  void put_vector(const std::string& name, const Vec<S>& v) {
    tensors[name] = checkpoint_detail::pack(v.data(), v.size(), {v.size()});
  }

  const TensorBlob& blob(const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw CorruptCheckpoint("missing tensor '" + name + "'");
    return it->second;
  }

  template <typename S>
  Mat<S> matrix(const std::string& name) const {
    const TensorBlob& b = blob(name);
    if (b.shape.size() != 2) {
      throw CorruptCheckpoint("tensor '" + name + "' is not a matrix");
    }
    Mat<S> m(b.shape[0], b.shape[1]);
    checkpoint_detail::unpack(b, name, m.data(), m.size());
    return m;
  }

  template <typename S>
  Vec<S> vector(const std::string& name) const {
    const TensorBlob& b = blob(name);
    if (b.shape.size() != 1) {
      throw CorruptCheckpoint("tensor '" + name + "' is not a vector");
    }
    Vec<S> v(b.shape[0]);
    checkpoint_detail::unpack(b, name, v.data(), v.size());
    return v;
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["metadata"] = ckpt.metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, blob] : ckpt.tensors) {
    header["tensors"].push_back({{"name", name},
                                 {"dtype", blob.dtype},
                                 {"shape", blob.shape},
                                 {"offset", offset},
                                 {"nbytes", blob.bytes.size()}});
    offset += blob.bytes.size();
  }
  const std::string header_text = header.dump();
  if (header_text.size() > 0xffffffffull) throw CorruptCheckpoint("header too large");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactMissing("save_checkpoint: cannot open " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t len = static_cast<std::uint32_t>(header_text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, blob] : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(blob.bytes.data()),
              static_cast<std::streamsize>(blob.bytes.size()));
  }
  if (!out) throw ArtifactMissing("save_checkpoint: short write to " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactMissing("load_checkpoint: cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (raw.size() < sizeof(kCheckpointMagic) + sizeof(std::uint32_t)) {
    throw CorruptCheckpoint("file too short for checkpoint header: " + path.string());
  }
  if (std::memcmp(raw.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CorruptCheckpoint("bad magic in " + path.string());
  }
  std::uint32_t header_len = 0;
  std::memcpy(&header_len, raw.data() + sizeof(kCheckpointMagic), sizeof(header_len));
  const std::size_t payload_start = sizeof(kCheckpointMagic) + sizeof(std::uint32_t) + header_len;
  if (payload_start > raw.size()) {
    throw CorruptCheckpoint("truncated header in " + path.string());
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.begin() + sizeof(kCheckpointMagic) + sizeof(std::uint32_t),
                                   raw.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("unparseable header: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.metadata = header.at("metadata");
    const std::size_t payload_size = raw.size() - payload_start;
    for (const auto& entry : header.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      TensorBlob blob;
      blob.dtype = entry.at("dtype").get<std::string>();
      blob.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (offset + nbytes > payload_size) {
        throw CorruptCheckpoint("tensor '" + name + "' payload exceeds file size");
      }
      const std::uint64_t expected =
          static_cast<std::uint64_t>(blob.element_count()) *
          checkpoint_detail::dtype_size(blob.dtype);
      if (nbytes != expected) {
        throw CorruptCheckpoint("tensor '" + name + "' byte count disagrees with its shape");
      }
      blob.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(payload_start + offset),
                        raw.begin() + static_cast<std::ptrdiff_t>(payload_start + offset + nbytes));
      ckpt.tensors.emplace(name, std::move(blob));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("malformed header fields: ") + e.what());
  }
  return ckpt;
}

/// Checks one metadata field against an expected value, naming the field.
template <typename T>
void expect_metadata(const Checkpoint& ckpt, const std::string& field, const T& expected) {
  if (!ckpt.metadata.contains(field)) {
    throw CorruptCheckpoint("checkpoint metadata missing field '" + field + "'");
  }
  const T actual = ckpt.metadata.at(field).get<T>();
  if (actual != expected) {
    throw CorruptCheckpoint("checkpoint field '" + field + "' mismatch: saved " +
                            nlohmann::json(actual).dump() + ", expected " +
                            nlohmann::json(expected).dump());
  }
}

}  // namespace stitchflow
