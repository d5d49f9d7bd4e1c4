#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meg/errors.hpp"
#include "meg/rng.hpp"

namespace meg {

using real = double;

// Dense (batch, channel, height, width) shape. Values are stored row-major
// with w fastest.
struct Shape {
    int b = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return int64_t(b) * c * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const {
        return "(" + std::to_string(b) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

// Dense real tensor with an optional gradient buffer of identical length.
// Storage is double; checkpoints serialize as f32 (see checkpoint.hpp).
struct Tensor {
    Shape shape;
    std::vector<real> v;
    std::vector<real> g; // empty unless gradients were requested

    Tensor() = default;
    explicit Tensor(Shape s) : shape(s), v(size_t(s.numel()), 0.0) {}

    static Tensor zeros(Shape s) { return Tensor(s); }

    static Tensor full(Shape s, real value) {
        Tensor t(s);
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor from(Shape s, std::vector<real> values) {
        if (int64_t(values.size()) != s.numel())
            throw ShapeError("tensor init: " + std::to_string(values.size()) +
                             " values for shape " + s.str());
        Tensor t;
        t.shape = s;
        t.v = std::move(values);
        return t;
    }

    static Tensor uniform(Shape s, Rng& rng, real lo, real hi) {
        Tensor t(s);
        for (auto& x : t.v) x = rng.uniform(lo, hi);
        return t;
    }

    int64_t numel() const { return shape.numel(); }

    int64_t index(int b, int c, int h, int w) const {
        return ((int64_t(b) * shape.c + c) * shape.h + h) * shape.w + w;
    }
    real& at(int b, int c, int h, int w) { return v[size_t(index(b, c, h, w))]; }
    real at(int b, int c, int h, int w) const { return v[size_t(index(b, c, h, w))]; }

    void alloc_grad() { g.assign(v.size(), 0.0); }
    bool has_grad() const { return !g.empty(); }

    // Snap every value to the nearest f32. Trained parameters live on the
    // f32 grid at all times so that f32 checkpoints round-trip bit-exactly.
    void snap_f32() {
        for (auto& x : v) x = real(float(x));
    }
};

// Named tensor as it appears in a parameter set / checkpoint manifest.
struct ParamTensor {
    Tensor t;
    std::string name;
    bool trainable = true;
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (!(a == b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.str() +
                         " vs " + b.str());
}

} // namespace meg
