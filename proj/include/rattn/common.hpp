#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rattn {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << "]";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

// Global switch for post-op finiteness scans. The benchmark path turns it off;
// everything else keeps it on so NaN/Inf surfaces at the op that produced it.
inline std::atomic<bool>& finite_checks() {
    static std::atomic<bool> on{true};
    return on;
}

template <class T>
void check_finite(const char* op, const T* p, int64_t n) {
    if (!finite_checks().load(std::memory_order_relaxed)) return;
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(p[i]))) {
            throw std::runtime_error(std::string(op) + ": non-finite value at flat index " +
                                     std::to_string(i));
        }
    }
}

}  // namespace rattn
