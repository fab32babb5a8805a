#pragma once

#include <cmath>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "ewirp/common.hpp"

namespace ewirp {

// Dense shaped array in row-major order. Feature maps use (N,C,H,W),
// vector batches use (N,F). Values are expected to stay finite; forward
// passes check this at their boundaries.
template <class S>
struct Tensor {
  std::vector<int> shape;
  AVec<S> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> sh) : shape(std::move(sh)), v(count(shape)) {}
  Tensor(std::vector<int> sh, S fill) : shape(std::move(sh)), v(count(shape), fill) {}
  Tensor(std::vector<int> sh, AVec<S> values) : shape(std::move(sh)), v(std::move(values)) {
    require(static_cast<i64>(v.size()) == count(shape), "tensor value count ", v.size(),
            " does not match shape product ", count(shape));
  }

  static i64 count(const std::vector<int>& sh) {
    i64 n = 1;
    for (int d : sh) {
      require(d > 0, "tensor dimensions must be positive, got ", d);
      n *= d;
    }
    return n;
  }

  i64 numel() const { return static_cast<i64>(v.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  // (N,C,H,W) accessors.
  S& at(int n, int c, int h, int w) {
    return v[((static_cast<i64>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  S at(int n, int c, int h, int w) const {
    return v[((static_cast<i64>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  // (N,F) accessors.
  S& at(int n, int f) { return v[static_cast<i64>(n) * dim(1) + f]; }
  S at(int n, int f) const { return v[static_cast<i64>(n) * dim(1) + f]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  // Same storage viewed under a new shape with equal element count.
  Tensor reshaped(std::vector<int> sh) const {
    require(count(sh) == numel(), "reshape ", numel(), " elements into incompatible shape");
    Tensor out;
    out.shape = std::move(sh);
    out.v = v;
    return out;
  }

  void fill(S x) { std::fill(v.begin(), v.end(), x); }
};

inline std::string shape_str(const std::vector<int>& sh) {
  std::string s = "(";
  for (size_t i = 0; i < sh.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(sh[i]);
  }
  return s + ")";
}

// Sum with double accumulation; fixed left-to-right order.
template <class S>
double dsum(const std::vector<S>& v) {
  double acc = 0.0;
  for (S x : v) acc += static_cast<double>(x);
  return acc;
}

}  // namespace ewirp
