#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "attnalign/errors.hpp"
#include "attnalign/rng.hpp"

namespace attnalign {

/// Dense row-major tensor of 64-bit floats. No strided views, no
/// broadcasting beyond scalars; every operation returns a fresh tensor.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor ones(std::vector<std::size_t> shape) { return full(std::move(shape), 1.0); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_[axis]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << "x";
            os << shape[i];
        }
        os << "]";
        return os.str();
    }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("zero dimension in shape " + shape_string(shape));
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             Tensor::shape_string(a.shape()) + " vs " +
                             Tensor::shape_string(b.shape()));
    }
}

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    return out;
}

/// Natural log; every element must be strictly positive.
inline Tensor log(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(out[i] > 0.0)) {
            throw DomainError("log: nonpositive element " + std::to_string(out[i]) +
                              " at flat index " + std::to_string(i));
        }
        out[i] = std::log(out[i]);
    }
    return out;
}

// ---- reductions ----

inline double sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return s;
}

inline double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.size()); }

inline double max(const Tensor& a) {
    double m = a[0];
    for (std::size_t i = 1; i < a.size(); ++i) m = std::max(m, a[i]);
    return m;
}

namespace detail {

enum class ReduceOp { Sum, Mean, Max };

inline Tensor reduce(const Tensor& a, const std::vector<std::size_t>& axes, bool keep_dims,
                     ReduceOp op) {
    const auto& shape = a.shape();
    std::vector<bool> reduced(shape.size(), false);
    for (std::size_t axis : axes) {
        if (axis >= shape.size()) {
            throw DimensionError("reduce: axis " + std::to_string(axis) +
                                 " out of range for shape " + Tensor::shape_string(shape));
        }
        reduced[axis] = true;
    }

    std::vector<std::size_t> out_shape;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (!reduced[i]) out_shape.push_back(shape[i]);
        else if (keep_dims) out_shape.push_back(1);
    }
    if (out_shape.empty()) out_shape.push_back(1);

    std::size_t reduced_count = 1;
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (reduced[i]) reduced_count *= shape[i];

    Tensor out(out_shape);
    if (op == ReduceOp::Max) std::fill(out.values().begin(), out.values().end(), -HUGE_VAL);

    // Walk the full index space in row-major order; accumulation order over
    // the reduced axes is therefore fixed.
    std::vector<std::size_t> idx(shape.size(), 0);
    for (std::size_t flat = 0; flat < a.size(); ++flat) {
        std::size_t out_flat = 0;
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (reduced[i]) continue;
            out_flat = out_flat * shape[i] + idx[i];
        }
        double& slot = out[out_flat];
        if (op == ReduceOp::Max) slot = std::max(slot, a[flat]);
        else slot += a[flat];

        for (std::size_t i = shape.size(); i-- > 0;) {
            if (++idx[i] < shape[i]) break;
            idx[i] = 0;
        }
    }

    if (op == ReduceOp::Mean) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] /= static_cast<double>(reduced_count);
    }
    return out;
}

} // namespace detail

inline Tensor reduce_sum(const Tensor& a, const std::vector<std::size_t>& axes,
                         bool keep_dims = false) {
    return detail::reduce(a, axes, keep_dims, detail::ReduceOp::Sum);
}

inline Tensor reduce_mean(const Tensor& a, const std::vector<std::size_t>& axes,
                          bool keep_dims = false) {
    return detail::reduce(a, axes, keep_dims, detail::ReduceOp::Mean);
}

inline Tensor reduce_max(const Tensor& a, const std::vector<std::size_t>& axes,
                         bool keep_dims = false) {
    return detail::reduce(a, axes, keep_dims, detail::ReduceOp::Max);
}

// ---- pooling ----

/// Non-overlapping k x k window average over a 2-D tensor.
inline Tensor avg_pool2d(const Tensor& a, std::size_t k) {
    if (a.rank() != 2) {
        throw DimensionError("avg_pool2d: expected rank-2 input, got " +
                             Tensor::shape_string(a.shape()));
    }
    const std::size_t h = a.dim(0), w = a.dim(1);
    if (k == 0 || h % k != 0 || w % k != 0) {
        throw DimensionError("avg_pool2d: dims " + Tensor::shape_string(a.shape()) +
                             " not divisible by window " + std::to_string(k));
    }
    Tensor out({h / k, w / k});
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t oh = 0; oh < h / k; ++oh) {
        for (std::size_t ow = 0; ow < w / k; ++ow) {
            double s = 0.0;
            for (std::size_t dy = 0; dy < k; ++dy)
                for (std::size_t dx = 0; dx < k; ++dx)
                    s += a.at2(oh * k + dy, ow * k + dx);
            out.at2(oh, ow) = s * inv;
        }
    }
    return out;
}

// ---- gradient oracle ----

/// Central-difference gradient of a scalar function, the reference every
/// backward pass in this project is checked against.
template <typename F>
Tensor finite_diff_gradient(F&& f, const Tensor& x, double h = 1e-5) {
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(probe);
        probe[i] = orig - h;
        const double fm = f(probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

/// Fill with uniform draws from [lo, hi) using the given stream.
inline Tensor random_uniform(std::vector<std::size_t> shape, SeededRng& rng, double lo = 0.0,
                             double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

} // namespace attnalign
