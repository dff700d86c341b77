// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "emm/errors.hpp"
#include "emm/model.hpp"
#include "emm/signature.hpp"
#include "emm/tensor.hpp"

namespace emm {

/// CRC32 (reflected, polynomial 0xEDB88320). Check value: crc32 of the ASCII
/// bytes "123456789" is 0xCBF43926.
inline uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed = 0) {
  uint32_t crc = ~seed;
  for (size_t i = 0; i < n; ++i) {
    crc ^= data[i];
    for (int k = 0; k < 8; ++k) {
      crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
    }
  }
  return ~crc;
}

namespace detail {

class ByteWriter {
public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) {
    buf_.push_back(static_cast<uint8_t>(v));
    buf_.push_back(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  const std::vector<uint8_t>& data() const { return buf_; }
  size_t size() const { return buf_.size(); }

private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
public:
  ByteReader(const uint8_t* data, size_t n) : data_(data), n_(n) {}

  uint8_t u8() { return take(1)[0]; }
  uint16_t u16() {
    const uint8_t* p = take(2);
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
  }
  uint32_t u32() {
    const uint8_t* p = take(4);
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) |
           (static_cast<uint32_t>(p[3]) << 24);
  }
  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | (hi << 32);
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(size_t n) {
    const uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  const uint8_t* take(size_t n) {
    if (pos_ + n > n_) raise(ErrorCode::truncated, "file ends early");
    const uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  size_t remaining() const { return n_ - pos_; }

private:
  const uint8_t* data_;
  size_t n_;
  size_t pos_ = 0;
};

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::data, "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<uint8_t>& bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::data, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorCode::data, "short write to " + path.string());
}

}  // namespace detail

constexpr uint32_t kModelFormatVersion = 1;

/// Concatenated little-endian f64 bytes of every parametric layer's weights
/// then bias, in layer order. This is both the file payload and the byte
/// string the freeze invariant is checked against.
inline std::vector<uint8_t> parameter_payload(const TrainedModel& model) {
  detail::ByteWriter w;
  for (const ModelLayer& l : model.layers) {
    if (!layer_has_params(l.sig.kind)) continue;
    for (size_t i = 0; i < l.weights->value.size(); ++i) w.f64(l.weights->value[i]);
    for (size_t i = 0; i < l.bias->value.size(); ++i) w.f64(l.bias->value[i]);
  }
  return w.data();
}

/// Model file layout, all little-endian: magic "EMM1", version u32, task
/// name (u16 length + bytes), layer count u32, per layer kind u8 + in u32 +
/// out u32, head index u32, f64 payload, crc32 of the payload.
inline void save_model(const TrainedModel& model,
                       const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.bytes("EMM1", 4);
  w.u32(kModelFormatVersion);
  if (model.task.size() > 0xFFFF) raise(ErrorCode::usage, "task name too long");
  w.u16(static_cast<uint16_t>(model.task.size()));
  w.bytes(model.task.data(), model.task.size());
  w.u32(static_cast<uint32_t>(model.layers.size()));
  for (const ModelLayer& l : model.layers) {
    w.u8(static_cast<uint8_t>(l.sig.kind));
    w.u32(l.sig.in_dim);
    w.u32(l.sig.out_dim);
  }
  w.u32(model.head_index);
  std::vector<uint8_t> payload = parameter_payload(model);
  w.bytes(payload.data(), payload.size());
  w.u32(crc32(payload.data(), payload.size()));
  detail::write_file_bytes(path, w.data());
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = detail::read_file_bytes(path);
  detail::ByteReader r(bytes.data(), bytes.size());
  if (r.str(4) != "EMM1") {
    raise(ErrorCode::format, "bad magic in " + path.string());
  }
  uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    raise(ErrorCode::version, "unsupported model format version " +
                                  std::to_string(version) + " in " +
                                  path.string());
  }
  TrainedModel model;
  model.id = path.stem().string();
  model.task = r.str(r.u16());
  uint32_t layer_count = r.u32();
  std::vector<LayerSignature> sigs;
  for (uint32_t i = 0; i < layer_count; ++i) {
    LayerSignature sig;
    sig.kind = layer_kind_from_byte(r.u8());
    sig.in_dim = r.u32();
    sig.out_dim = r.u32();
    if (sig.in_dim == 0 || sig.out_dim == 0) {
      raise(ErrorCode::format, "zero layer dim in " + path.string());
    }
    sigs.push_back(sig);
  }
  model.head_index = r.u32();
  if (model.head_index != kNoHead && model.head_index >= layer_count) {
    raise(ErrorCode::format, "head index out of range in " + path.string());
  }
  size_t payload_start = bytes.size() - r.remaining();
  for (const LayerSignature& sig : sigs) {
    ModelLayer layer;
    layer.sig = sig;
    if (layer_has_params(sig.kind)) {
      Tensor weights({sig.in_dim, sig.out_dim});
      for (size_t i = 0; i < weights.size(); ++i) weights[i] = r.f64();
      Tensor bias({sig.out_dim});
      for (size_t i = 0; i < bias.size(); ++i) bias[i] = r.f64();
      layer.weights = make_leaf(std::move(weights), false);
      layer.bias = make_leaf(std::move(bias), false);
    }
    model.layers.push_back(std::move(layer));
  }
  size_t payload_len = bytes.size() - r.remaining() - payload_start;
  uint32_t stored_crc = r.u32();
  uint32_t actual_crc = crc32(bytes.data() + payload_start, payload_len);
  if (stored_crc != actual_crc) {
    raise(ErrorCode::checksum, "payload checksum mismatch in " + path.string());
  }
  if (model.head_index != kNoHead) {
    check_layer_chain(model.id, sigs);
    for (const ModelLayer& l : model.layers) {
      if (l.weights) {
        l.weights->value.require_finite("weights of " + model.id);
        l.bias->value.require_finite("bias of " + model.id);
      }
    }
  }
  return model;
}

constexpr uint32_t kTensorListVersion = 1;

/// Named tensor list, used for the trainable half of a fused model. Layout:
/// magic "EMT1", version u32, entry count u32, entries (name u16+bytes, rank
/// u8, dims u32 each, f64 values), crc32 of the entry region.
inline void save_tensor_list(
    const std::vector<std::pair<std::string, Tensor>>& entries,
    const std::filesystem::path& path) {
  detail::ByteWriter body;
  for (const auto& [name, tensor] : entries) {
    if (name.size() > 0xFFFF) raise(ErrorCode::usage, "tensor name too long");
    body.u16(static_cast<uint16_t>(name.size()));
    body.bytes(name.data(), name.size());
    body.u8(static_cast<uint8_t>(tensor.rank()));
    for (size_t d : tensor.shape()) body.u32(static_cast<uint32_t>(d));
    for (size_t i = 0; i < tensor.size(); ++i) body.f64(tensor[i]);
  }
  detail::ByteWriter w;
  w.bytes("EMT1", 4);
  w.u32(kTensorListVersion);
  w.u32(static_cast<uint32_t>(entries.size()));
  w.bytes(body.data().data(), body.size());
  w.u32(crc32(body.data().data(), body.size()));
  detail::write_file_bytes(path, w.data());
}

inline std::vector<std::pair<std::string, Tensor>> load_tensor_list(
    const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = detail::read_file_bytes(path);
  detail::ByteReader r(bytes.data(), bytes.size());
  if (r.str(4) != "EMT1") {
    raise(ErrorCode::format, "bad magic in " + path.string());
  }
  uint32_t version = r.u32();
  if (version != kTensorListVersion) {
    raise(ErrorCode::version, "unsupported tensor list version " +
                                  std::to_string(version) + " in " +
                                  path.string());
  }
  uint32_t count = r.u32();
  size_t body_start = bytes.size() - r.remaining();
  std::vector<std::pair<std::string, Tensor>> entries;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    uint8_t rank = r.u8();
    if (rank == 0 || rank > 2) {
      raise(ErrorCode::format, "bad tensor rank in " + path.string());
    }
    std::vector<size_t> shape;
    for (uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    Tensor t(shape);
    for (size_t j = 0; j < t.size(); ++j) t[j] = r.f64();
    entries.emplace_back(std::move(name), std::move(t));
  }
  size_t body_len = bytes.size() - r.remaining() - body_start;
  uint32_t stored_crc = r.u32();
  if (stored_crc != crc32(bytes.data() + body_start, body_len)) {
    raise(ErrorCode::checksum, "checksum mismatch in " + path.string());
  }
  return entries;
}

}  // namespace emm
