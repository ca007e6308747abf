#include "layercache/tensor.hpp"

#include <cmath>
#include <sstream>

#include "layercache/errors.hpp"

namespace layercache {

std::size_t tensor::product(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

std::string tensor::shape_str(const std::vector<std::size_t>& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ", ";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

tensor::tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(product(shape_), 0.0f) {}

tensor::tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_)) {
    throw shape_error("tensor: " + std::to_string(data_.size()) +
                      " values do not fill shape " + shape_str(shape_));
  }
}

std::size_t tensor::rows() const { return shape_.empty() ? 0 : shape_[0]; }

std::size_t tensor::row_size() const {
  if (shape_.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t i = 1; i < shape_.size(); ++i) n *= shape_[i];
  return n;
}

tensor tensor::select_rows(const std::vector<std::size_t>& idx) const {
  const std::size_t rs = row_size();
  std::vector<std::size_t> out_shape = shape_;
  if (out_shape.empty()) throw shape_error("select_rows: tensor has no batch dim");
  out_shape[0] = idx.size();
  tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows()) {
      throw shape_error("select_rows: row " + std::to_string(idx[i]) +
                        " out of range for " + shape_str());
    }
    const float* src = row(idx[i]);
    std::copy(src, src + rs, out.row(i));
  }
  return out;
}

std::vector<std::size_t> tensor::sample_shape() const {
  if (shape_.empty()) return {};
  return std::vector<std::size_t>(shape_.begin() + 1, shape_.end());
}

bool tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string tensor::shape_str() const { return shape_str(shape_); }

}  // namespace layercache
