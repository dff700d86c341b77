// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "emm/errors.hpp"

namespace emm {

/// Layer kinds understood by the pool. Numeric values are fixed by the model
/// file format and must not be reordered.
enum class LayerKind : uint8_t {
  dense = 0,
  relu = 1,
  sigmoid = 2,
  embedding_concat = 3,
};

inline const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::embedding_concat: return "embedding_concat";
  }
  return "unknown";
}

inline LayerKind layer_kind_from_byte(uint8_t b) {
  if (b > 3) raise(ErrorCode::format, "unknown layer kind byte");
  return static_cast<LayerKind>(b);
}

inline bool layer_has_params(LayerKind kind) {
  return kind == LayerKind::dense || kind == LayerKind::embedding_concat;
}

/// Structural identity of one layer. Two layers are interchangeable for
/// alignment purposes exactly when their signatures compare equal.
struct LayerSignature {
  LayerKind kind = LayerKind::dense;
  uint32_t in_dim = 0;
  uint32_t out_dim = 0;

  bool operator==(const LayerSignature& o) const {
    return kind == o.kind && in_dim == o.in_dim && out_dim == o.out_dim;
  }
  bool operator!=(const LayerSignature& o) const { return !(*this == o); }

  std::string to_string() const {
    return std::string(layer_kind_name(kind)) + "(" + std::to_string(in_dim) +
           "," + std::to_string(out_dim) + ")";
  }
};

inline LayerSignature dense_sig(uint32_t in, uint32_t out) {
  return {LayerKind::dense, in, out};
}
inline LayerSignature relu_sig(uint32_t dim) {
  return {LayerKind::relu, dim, dim};
}
inline LayerSignature sigmoid_sig(uint32_t dim) {
  return {LayerKind::sigmoid, dim, dim};
}
inline LayerSignature embedding_sig(uint32_t vocab, uint32_t dim) {
  return {LayerKind::embedding_concat, vocab, dim};
}

}  // namespace emm
