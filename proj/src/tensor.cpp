#include "avih/tensor.hpp"

#include <cmath>
#include <limits>

namespace avih {

bool all_finite(const Tensor& t) {
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

double min_value(const Tensor& t) {
    double m = std::numeric_limits<double>::infinity();
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) m = std::min(m, p[i]);
    return m;
}

double max_value(const Tensor& t) {
    double m = -std::numeric_limits<double>::infinity();
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) m = std::max(m, p[i]);
    return m;
}

}  // namespace avih
