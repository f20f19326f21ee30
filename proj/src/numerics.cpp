#include "autocirc/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "autocirc/error.hpp"

namespace autocirc::num {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(data_.size() == shape_size(shape_), ErrorKind::kDimension,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_string(shape_));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& row : rows) {
    require(row.size() == n, ErrorKind::kDimension, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  require(data_.size() == 1, ErrorKind::kDimension,
          "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::slice(std::size_t index) const {
  require(!shape_.empty() && index < shape_[0], ErrorKind::kDimension,
          "slice index out of range for shape " + shape_string(shape_));
  Shape rest(shape_.begin() + 1, shape_.end());
  const std::size_t stride = shape_size(rest);
  std::vector<double> data(data_.begin() + static_cast<std::ptrdiff_t>(index * stride),
                           data_.begin() + static_cast<std::ptrdiff_t>((index + 1) * stride));
  return Tensor(std::move(rest), std::move(data));
}

void Tensor::set_slice(std::size_t index, const Tensor& value) {
  require(!shape_.empty() && index < shape_[0], ErrorKind::kDimension, "set_slice out of range");
  const Shape rest(shape_.begin() + 1, shape_.end());
  require(value.shape() == rest, ErrorKind::kDimension,
          "set_slice shape " + shape_string(value.shape()) + " vs " + shape_string(rest));
  std::copy(value.data_.begin(), value.data_.end(),
            data_.begin() + static_cast<std::ptrdiff_t>(index * value.size()));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::kDimension,
          "max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void check_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) fail(ErrorKind::kNumeric, "non-finite value in " + what);
}

namespace {

void matmul_into(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  }
}

}  // namespace

Tensor contract(const Tensor& a, const Tensor& b, ContractMode mode) {
  if (mode == ContractMode::kMatmul) {
    require(a.rank() == 2 && b.rank() == 2, ErrorKind::kDimension,
            "matmul needs rank-2 operands, got " + shape_string(a.shape()) + " and " +
                shape_string(b.shape()));
    require(a.extent(1) == b.extent(0), ErrorKind::kDimension,
            "matmul inner extents differ: " + shape_string(a.shape()) + " x " +
                shape_string(b.shape()));
    Tensor out({a.extent(0), b.extent(1)});
    matmul_into(a.data().data(), b.data().data(), out.data().data(), a.extent(0), a.extent(1),
                b.extent(1));
    return out;
  }
  require(a.rank() == 3 && b.rank() == 3, ErrorKind::kDimension,
          "batched matmul needs rank-3 operands");
  require(a.extent(0) == b.extent(0), ErrorKind::kDimension, "batched matmul batch extents differ");
  require(a.extent(2) == b.extent(1), ErrorKind::kDimension,
          "batched matmul inner extents differ: " + shape_string(a.shape()) + " x " +
              shape_string(b.shape()));
  const std::size_t batch = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  Tensor out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    matmul_into(a.data().data() + i * m * k, b.data().data() + i * k * n,
                out.data().data() + i * m * n, m, k, n);
  }
  return out;
}

Tensor softmax_logprobs(const Tensor& logits) {
  require(logits.rank() >= 1, ErrorKind::kDimension, "softmax_logprobs needs rank >= 1");
  const std::size_t v = logits.shape().back();
  require(v > 0, ErrorKind::kDimension, "softmax_logprobs over an empty axis");
  check_finite(logits, "softmax_logprobs input");
  Tensor out(logits.shape());
  const std::size_t rows = logits.size() / v;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.data().data() + r * v;
    double* y = out.data().data() + r * v;
    double mx = x[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < v; ++j) y[j] = x[j] - lz;
  }
  return out;
}

Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h) {
  require(h > 0.0, ErrorKind::kUsage, "finite difference step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      fail(ErrorKind::kNumeric, "finite difference probe produced a non-finite value at index " +
                                    std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::kRelu:
      return x > 0.0 ? x : 0.0;
    case Activation::kGelu:
      return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
    case Activation::kIdentity:
      return x;
  }
  return x;
}

double activate_grad(Activation kind, double x) {
  switch (kind) {
    case Activation::kRelu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::kGelu: {
      const double inner = kGeluC * (x + 0.044715 * x * x * x);
      const double t = std::tanh(inner);
      const double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    }
    case Activation::kIdentity:
      return 1.0;
  }
  return 1.0;
}

}  // namespace autocirc::num
