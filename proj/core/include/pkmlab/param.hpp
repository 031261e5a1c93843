#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pkmlab/tensor.hpp"

namespace pkmlab {

enum class ParamKind {
  kDense,       // gradient in `grad`, updated by dense Adam
  kSparseRows,  // gradient held by the owning layer, updated row-wise
  kBuffer,      // state without gradient (batch-norm running statistics)
};

// Gradient restricted to a subset of rows of a 2-D table.
template <typename T>
struct SparseRowGrad {
  std::vector<std::int64_t> rows;  // ascending, unique
  Tensor<T> values;                // [rows.size() x cols]

  void clear(std::size_t cols) {
    rows.clear();
    values = Tensor<T>({0, cols});
  }
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  ParamKind kind = ParamKind::kDense;
  bool memory = false;  // belongs to a product-key memory (freezable)

  void init(std::string param_name, Shape shape, ParamKind param_kind = ParamKind::kDense) {
    name = std::move(param_name);
    kind = param_kind;
    value = Tensor<T>(shape);
    grad = kind == ParamKind::kDense ? Tensor<T>(shape) : Tensor<T>();
  }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

}  // namespace pkmlab
