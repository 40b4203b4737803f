#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnsim {

// Thrown for malformed configs and infeasible launch parameters; the CLI maps
// it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class OpKind : int { Prefill = 0, Decode = 1 };

inline const char* op_name(OpKind op) {
    return op == OpKind::Prefill ? "prefill" : "decode";
}

// Half-open interval of key/value positions.
struct Interval {
    long begin = 0;
    long end = 0;

    long length() const { return end - begin; }
    bool empty() const { return end <= begin; }
    bool operator==(const Interval&) const = default;
};

template <typename L, typename R>
constexpr L ceil_div(L x, R y) {
    return (x + static_cast<L>(y) - 1) / static_cast<L>(y);
}

// Dense row-major matrix. Small helper, not a linear-algebra library.
template <typename Real>
struct Mat {
    long rows = 0;
    long cols = 0;
    std::vector<Real> data;

    Mat() = default;
    Mat(long r, long c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, Real(0)) {}

    Real& operator()(long r, long c) { return data[static_cast<size_t>(r) * cols + c]; }
    const Real& operator()(long r, long c) const { return data[static_cast<size_t>(r) * cols + c]; }

    Real* row(long r) { return data.data() + static_cast<size_t>(r) * cols; }
    const Real* row(long r) const { return data.data() + static_cast<size_t>(r) * cols; }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

using Matd = Mat<double>;
using Matf = Mat<float>;

struct ModelShape {
    int num_q_heads = 32;
    int num_kv_heads = 4;
    int head_dim = 128;
    double scale = 11.313708498984761;  // softmax divisor, sqrt(head_dim) by default

    int group_size() const { return num_q_heads / num_kv_heads; }

    void validate() const {
        if (num_q_heads < 1 || num_kv_heads < 1 || head_dim < 1)
            throw std::invalid_argument("ModelShape: head counts and head_dim must be >= 1");
        if (num_q_heads % num_kv_heads != 0)
            throw std::invalid_argument("ModelShape: num_q_heads must be divisible by num_kv_heads");
        if (!(scale > 0.0))
            throw std::invalid_argument("ModelShape: scale must be positive");
    }
};

}  // namespace attnsim
