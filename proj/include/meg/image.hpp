#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meg/errors.hpp"

namespace meg {

// Interleaved row-major images, channel fastest: data[(i*w + j)*c + ch].

struct ImageU8 {
    int h = 0, w = 0, c = 0;
    std::vector<uint8_t> data;

    ImageU8() = default;
    ImageU8(int h_, int w_, int c_)
        : h(h_), w(w_), c(c_), data(size_t(h_) * w_ * c_, 0) {}

    uint8_t& at(int i, int j, int ch) {
        return data[(size_t(i) * w + j) * c + ch];
    }
    uint8_t at(int i, int j, int ch) const {
        return data[(size_t(i) * w + j) * c + ch];
    }
    bool same_dims(const ImageU8& o) const {
        return h == o.h && w == o.w && c == o.c;
    }
};

struct ImageF {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;

    ImageF() = default;
    ImageF(int h_, int w_, int c_)
        : h(h_), w(w_), c(c_), data(size_t(h_) * w_ * c_, 0.0) {}

    double& at(int i, int j, int ch) {
        return data[(size_t(i) * w + j) * c + ch];
    }
    double at(int i, int j, int ch) const {
        return data[(size_t(i) * w + j) * c + ch];
    }
    bool same_dims(const ImageF& o) const {
        return h == o.h && w == o.w && c == o.c;
    }
};

inline ImageF to_float(const ImageU8& im, double scale = 1.0 / 255.0) {
    ImageF out(im.h, im.w, im.c);
    for (size_t i = 0; i < im.data.size(); ++i)
        out.data[i] = double(im.data[i]) * scale;
    return out;
}

} // namespace meg
