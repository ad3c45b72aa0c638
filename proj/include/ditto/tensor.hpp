#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ditto {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& dims);
std::string shape_string(const Shape& dims);

// Real-valued tensor, row-major. Payloads are 32-bit to match the trace format.
struct Tensor {
  Shape dims;
  std::vector<float> values;

  Tensor() = default;
  Tensor(Shape d, std::vector<float> v);
  explicit Tensor(Shape d);

  std::size_t size() const { return values.size(); }
  bool operator==(const Tensor&) const = default;
};

}  // namespace ditto
