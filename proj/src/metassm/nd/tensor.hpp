#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "metassm/util/errors.hpp"
#include "metassm/util/rng.hpp"

namespace metassm {

/// Dense row-major matrix. Scalars are 1x1; row vectors 1xN.
template <typename S>
struct TensorT {
  int rows = 0;
  int cols = 0;
  std::vector<S> v;

  TensorT() = default;
  TensorT(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c) {
    if (r < 0 || c < 0) throw DimensionError("negative tensor dimension");
  }

  static TensorT zeros(int r, int c) { return TensorT(r, c); }

  static TensorT full(int r, int c, S val) {
    TensorT t(r, c);
    std::fill(t.v.begin(), t.v.end(), val);
    return t;
  }

  static TensorT scalar(S val) { return full(1, 1, val); }

  static TensorT from(int r, int c, std::initializer_list<S> vals) {
    TensorT t(r, c);
    if (vals.size() != t.v.size())
      throw DimensionError("initializer size does not match tensor shape");
    std::copy(vals.begin(), vals.end(), t.v.begin());
    return t;
  }

  static TensorT randn(int r, int c, RngStream& rng, S stddev = S(1)) {
    TensorT t(r, c);
    for (auto& x : t.v) x = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  S& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  S at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }

  std::size_t size() const { return v.size(); }
  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  bool same_shape(const TensorT& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

using Tensor = TensorT<double>;

}  // namespace metassm
