#include "tsdp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tsdp {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data length " +
                                std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) +
                                " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::size_t Tensor::row_size() const {
  if (shape_.empty()) return 1;
  return shape_[0] == 0 ? 0 : data_.size() / shape_[0];
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw std::out_of_range("slice_rows out of range");
  }
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t rs = row_size();
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(begin * rs),
                        data_.begin() + static_cast<std::ptrdiff_t>(end * rs));
  return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  Shape s = shape_;
  s[0] = rows.size();
  const std::size_t rs = row_size();
  std::vector<double> d;
  d.reserve(rows.size() * rs);
  for (std::size_t r : rows) {
    if (r >= shape_[0]) throw std::out_of_range("gather_rows index");
    d.insert(d.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * rs),
             data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * rs));
  }
  return Tensor(std::move(s), std::move(d));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != s.size() ||
        !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
      throw std::invalid_argument("concat_rows: trailing dims differ");
    }
    rows += p.dim(0);
  }
  s[0] = rows;
  std::vector<double> d;
  d.reserve(shape_numel(s));
  for (const auto& p : parts) d.insert(d.end(), p.vec().begin(), p.vec().end());
  return Tensor(std::move(s), std::move(d));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("max_abs_diff: shape mismatch");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace tsdp
