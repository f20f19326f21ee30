#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace autocirc::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 tensor holds one value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  double item() const;

  /// Sub-tensor along the leading axis.
  Tensor slice(std::size_t index) const;
  void set_slice(std::size_t index, const Tensor& value);

  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Throws a numeric error naming `what` if any entry is NaN or infinite.
void check_finite(const Tensor& t, const std::string& what);

enum class ContractMode { kMatmul, kBatchedMatmul };

Tensor contract(const Tensor& a, const Tensor& b, ContractMode mode = ContractMode::kMatmul);

/// Log-probabilities along the trailing axis, computed with max subtraction.
Tensor softmax_logprobs(const Tensor& logits);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h);

enum class Activation { kRelu, kGelu, kIdentity };

double activate(Activation kind, double x);
double activate_grad(Activation kind, double x);

}  // namespace autocirc::num
