#pragma once
// Dense row-major tensor. 64-bit scalars by default; the whole numerics
// stack is templated on the scalar type so 32-bit variants are available.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pointcsp {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw Error("negative dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), T(0)) {}
    TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw Error("tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }
    static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
    static TensorT full(Shape s, T v) {
        TensorT t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    // dims for the common matrix view: rows = all leading dims, cols = last
    int64_t rows() const { return shape.empty() ? 0 : numel() / shape.back(); }
    int64_t cols() const { return shape.empty() ? 0 : shape.back(); }

    T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    T at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    T item() const {
        if (numel() != 1) throw Error("item() on non-scalar tensor of shape " + shape_str(shape));
        return data[0];
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<double>;

template <typename T>
TensorT<T> tensor_from(Shape s, std::initializer_list<T> vals) {
    return TensorT<T>(std::move(s), std::vector<T>(vals));
}

}  // namespace pointcsp
