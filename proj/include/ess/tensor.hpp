#pragma once

#define EIGEN_DONT_PARALLELIZE 1

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ess/errors.hpp"
#include "ess/rng.hpp"

namespace ess {

// Dense row-major tensor. Rank 1 and 2 cover everything the engine needs;
// higher ranks are representable but no op produces them.
template <class Real>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), Real(0)) {}

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, Real v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(Real v) { return full({1}, v); }

  static Tensor of(std::vector<std::size_t> shape, std::vector<Real> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    if (t.data_.size() != checked_numel(t.shape_))
      throw DimensionError("tensor data length does not match shape " + shape_str(t.shape_));
    return t;
  }

  // Uniform(-r, r) with r = 1/sqrt(fan_in).
  static Tensor fan_in_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : t.data_) x = static_cast<Real>(rng.uniform(-r, r));
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  Real operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return {data_.data(), data_.size()}; }
  std::span<const Real> values() const { return {data_.data(), data_.size()}; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (Real x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  void fill(Real v) {
    for (auto& x : data_) x = v;
  }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

  std::string shape_str() const { return shape_str(shape_); }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return s.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<Real> data_;
};

namespace detail {

template <class Real>
using EigenMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Real>
Eigen::Map<const EigenMat<Real>> as_mat(const Tensor<Real>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <class Real>
Eigen::Map<EigenMat<Real>> as_mat(Tensor<Real>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

}  // namespace detail

// C = A * B for rank-2 operands.
template <class Real>
Tensor<Real> matmul_values(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
  Tensor<Real> c({a.rows(), b.cols()});
  detail::as_mat(c).noalias() = detail::as_mat(a) * detail::as_mat(b);
  return c;
}

// C += A * B^T (gradient w.r.t. the left matmul operand).
template <class Real>
void add_matmul_nt(Tensor<Real>& c, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::as_mat(c).noalias() += detail::as_mat(a) * detail::as_mat(b).transpose();
}

// C += A^T * B (gradient w.r.t. the right matmul operand).
template <class Real>
void add_matmul_tn(Tensor<Real>& c, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::as_mat(c).noalias() += detail::as_mat(a).transpose() * detail::as_mat(b);
}

// In-place stable softmax over a contiguous range (max subtraction).
template <class Real>
void softmax_inplace(std::span<Real> x) {
  if (x.empty()) throw DimensionError("softmax of empty input");
  Real mx = x[0];
  for (Real v : x) mx = std::max(mx, v);
  Real sum = 0;
  for (auto& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : x) v /= sum;
}

template <class Real>
std::vector<Real> softmax_values(std::span<const Real> x) {
  std::vector<Real> out(x.begin(), x.end());
  softmax_inplace<Real>(out);
  return out;
}

}  // namespace ess
