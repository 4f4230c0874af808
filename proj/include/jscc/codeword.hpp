#pragma once

#include <cstddef>

#include "jscc/tensor.hpp"

namespace jscc {

/// A batch of latent codewords, each item k = C*H*W dimensional.
///
/// Encoder outputs carry `normalized = true` and satisfy ||z_i||^2 <= k for
/// every item. Channel outputs and iterative-decoder iterates reuse the type
/// with `normalized = false`; they are not bounded.
template <typename T>
struct Codeword {
  Tensor<T> values;
  bool normalized = false;

  std::size_t dim() const { return values.shape().item_size(); }
  int batch() const { return values.batch(); }
  const Shape& shape() const { return values.shape(); }
};

}  // namespace jscc
