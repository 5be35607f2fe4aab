#include "dyrep/tensor.hpp"

#include <sstream>

namespace dyrep {

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace dyrep
