#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ug/rng.hpp"

namespace ug {

class NumericsError : public std::runtime_error {
 public:
  explicit NumericsError(const std::string& msg) : std::runtime_error(msg) {}
};

inline size_t numel_of(const std::vector<int>& shape) {
  size_t n = 1;
  for (const int d : shape) {
    if (d < 0) throw NumericsError("negative tensor extent");
    n *= static_cast<size_t>(d);
  }
  return n;
}

// Dense row-major tensor. Leading dimensions flatten into rows(); the last
// extent is cols(). Values are expected to stay finite; the tape checks.
template <typename Real>
struct TensorT {
  std::vector<int> shape;
  std::vector<Real> data;

  TensorT() = default;

  explicit TensorT(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), Real(0)) {}

  TensorT(std::vector<int> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape)) throw NumericsError("tensor shape/data size mismatch");
  }

  static TensorT scalar(Real v) { return TensorT({1}, {v}); }

  static TensorT full(std::vector<int> s, Real v) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static TensorT uniform(std::vector<int> s, Real lo, Real hi, RngState& rng) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = static_cast<Real>(rng.uniform(lo, hi));
    return t;
  }

  static TensorT normal(std::vector<int> s, Real mean, Real stddev, RngState& rng) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = mean + stddev * static_cast<Real>(rng.normal());
    return t;
  }

  size_t numel() const { return data.size(); }

  int cols() const {
    if (shape.empty()) throw NumericsError("cols() on rank-0 tensor");
    return shape.back();
  }

  int rows() const {
    const int c = cols();
    return c == 0 ? 0 : static_cast<int>(numel() / static_cast<size_t>(c));
  }

  Real& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  Real at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    // A single accumulation detects any NaN/Inf without branching per element.
    Real acc = 0;
    for (const Real v : data) acc += std::abs(v);
    return std::isfinite(static_cast<double>(acc));
  }

  void fill(Real v) {
    for (auto& x : data) x = v;
  }
};

using Tensor = TensorT<float>;

// A trainable value with an accumulated gradient of the same shape.
template <typename Real>
struct ParameterT {
  std::string name;
  TensorT<Real> value;
  TensorT<Real> grad;
  bool trainable = true;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<Real> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { grad.fill(Real(0)); }
};

using Parameter = ParameterT<float>;

template <typename Real>
void zero_grads(const std::vector<ParameterT<Real>*>& params) {
  for (auto* p : params) p->zero_grad();
}

// Integer matrix for token ids ([rows x cols], row-major).
struct IdMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<int32_t> v;

  IdMatrix() = default;
  IdMatrix(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0) {}

  int32_t& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  int32_t at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  size_t numel() const { return v.size(); }
};

}  // namespace ug
