#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fpb {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

// Dense row-major tensor of doubles. Value semantics; ops return fresh
// tensors. When checked mode is on (default), constructing a tensor from
// external data rejects NaN/Inf. Results of arithmetic are not re-scanned,
// so overflow inside an optimization loop surfaces as a non-finite
// objective value rather than an exception.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);                           // zero-filled
  Tensor(Shape shape, std::vector<double> data);          // checked

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);

  // Toggles finite-value validation on construction-from-data. Returns the
  // previous setting.
  static bool set_checked(bool on);
  static bool checked();

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t ndim() const { return shape_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors (row-major). Caller guarantees ndim()==2.
  std::size_t rows() const { return shape_[0]; }
  std::size_t cols() const { return shape_[1]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape_eq(shape_, o.shape_); }
  Tensor reshaped(Shape s) const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Elementwise / vector-space helpers used outside the autodiff graph
// (optimizer state, server aggregation, theory checks).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
void axpy(double alpha, const Tensor& x, Tensor& y);  // y += alpha * x
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);      // Euclidean norm of the flattened data
double max_abs(const Tensor& a);

// Row-major matrix product: [m,k] x [k,n] -> [m,n]. 2-D only.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

}  // namespace fpb
