#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace layercache {

// dense float32 tensor, row-major, leading dimension is the batch where one exists
class tensor {
 public:
  tensor() = default;
  explicit tensor(std::vector<std::size_t> shape);  // zero-filled
  tensor(std::vector<std::size_t> shape, std::vector<float> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& values() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // leading-dimension helpers
  std::size_t rows() const;      // shape[0], 0 for rank-0
  std::size_t row_size() const;  // product of trailing dims

  float* row(std::size_t r) { return data_.data() + r * row_size(); }
  const float* row(std::size_t r) const { return data_.data() + r * row_size(); }

  // new tensor holding the given rows, in the given order
  tensor select_rows(const std::vector<std::size_t>& idx) const;

  // per-sample shape: shape without the leading batch dim
  std::vector<std::size_t> sample_shape() const;

  bool all_finite() const;
  std::string shape_str() const;

  static std::size_t product(const std::vector<std::size_t>& dims);
  static std::string shape_str(const std::vector<std::size_t>& dims);

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

}  // namespace layercache
