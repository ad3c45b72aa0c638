#include "ditto/tensor.hpp"

#include <functional>
#include <numeric>
#include <sstream>

#include "ditto/error.hpp"

namespace ditto {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::NonFinite: return "non-finite value";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::Overflow: return "overflow";
    case ErrorCode::ScaleMismatch: return "scale mismatch";
    case ErrorCode::MissingPrevious: return "missing previous-step state";
    case ErrorCode::ContextChanged: return "context changed";
    case ErrorCode::Capacity: return "capacity exceeded";
    case ErrorCode::CyclicGraph: return "cyclic graph";
    case ErrorCode::Format: return "format error";
    case ErrorCode::Io: return "i/o error";
    case ErrorCode::Incompatible: return "incompatible configuration";
    case ErrorCode::InvariantViolation: return "invariant violation";
  }
  return "unknown";
}

std::size_t element_count(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape d, std::vector<float> v) : dims(std::move(d)), values(std::move(v)) {
  if (element_count(dims) != values.size())
    throw Error(ErrorCode::ShapeMismatch, "tensor dims " + shape_string(dims) + " hold " +
                                              std::to_string(element_count(dims)) +
                                              " elements, got " + std::to_string(values.size()));
}

Tensor::Tensor(Shape d) : dims(std::move(d)), values(element_count(dims), 0.0f) {}

}  // namespace ditto
