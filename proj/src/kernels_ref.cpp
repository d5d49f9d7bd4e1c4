#include "meg/kernels.hpp"

#include <limits>

// Serial naive implementations. These are the oracles the fast kernels are
// checked against, so keep them obviously correct: no blocking, no reordering.

namespace meg::ref {

void gemm(Trans ta, Trans tb, int m, int n, int k, const real* a,
          const real* b, real* c, bool accumulate) {
    auto A = [&](int i, int j) {
        return ta == Trans::N ? a[int64_t(i) * k + j] : a[int64_t(j) * m + i];
    };
    auto B = [&](int i, int j) {
        return tb == Trans::N ? b[int64_t(i) * n + j] : b[int64_t(j) * k + i];
    };
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            real s = 0.0;
            for (int p = 0; p < k; ++p) s += A(i, p) * B(p, j);
            real& out = c[int64_t(i) * n + j];
            out = accumulate ? out + s : s;
        }
    }
}

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias,
                    int stride, int pad, Tensor& y) {
    const ConvDims d = conv_dims(x.shape, w.shape, stride, pad);
    y = Tensor({d.b, d.cout, d.ho, d.wo});
    for (int b = 0; b < d.b; ++b)
        for (int co = 0; co < d.cout; ++co)
            for (int oh = 0; oh < d.ho; ++oh)
                for (int ow = 0; ow < d.wo; ++ow) {
                    real s = bias ? bias->v[size_t(co)] : 0.0;
                    for (int ci = 0; ci < d.cin; ++ci)
                        for (int kh = 0; kh < d.k; ++kh)
                            for (int kw = 0; kw < d.k; ++kw) {
                                const int ih = oh * d.stride - d.pad + kh;
                                const int iw = ow * d.stride - d.pad + kw;
                                if (ih < 0 || ih >= d.h || iw < 0 || iw >= d.w)
                                    continue;
                                s += x.at(b, ci, ih, iw) * w.at(co, ci, kh, kw);
                            }
                    y.at(b, co, oh, ow) = s;
                }
}

void maxpool2d_forward(const Tensor& x, int k, int stride, int pad, Tensor& y,
                       std::vector<int64_t>& argmax) {
    const int ho = (x.shape.h + 2 * pad - k) / stride + 1;
    const int wo = (x.shape.w + 2 * pad - k) / stride + 1;
    y = Tensor({x.shape.b, x.shape.c, ho, wo});
    argmax.assign(size_t(y.numel()), -1);
    for (int b = 0; b < x.shape.b; ++b)
        for (int c = 0; c < x.shape.c; ++c)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    real best = -std::numeric_limits<real>::infinity();
                    int64_t besti = -1;
                    for (int kh = 0; kh < k; ++kh)
                        for (int kw = 0; kw < k; ++kw) {
                            const int ih = oh * stride - pad + kh;
                            const int iw = ow * stride - pad + kw;
                            if (ih < 0 || ih >= x.shape.h) continue;
                            if (iw < 0 || iw >= x.shape.w) continue;
                            if (x.at(b, c, ih, iw) > best) {
                                best = x.at(b, c, ih, iw);
                                besti = x.index(b, c, ih, iw);
                            }
                        }
                    y.at(b, c, oh, ow) = best;
                    argmax[size_t(y.index(b, c, oh, ow))] = besti;
                }
}

void channel_mean_var(const Tensor& x, std::vector<real>& mean,
                      std::vector<real>& var) {
    const int C = x.shape.c;
    const int64_t n = int64_t(x.shape.b) * x.shape.h * x.shape.w;
    mean.assign(size_t(C), 0.0);
    var.assign(size_t(C), 0.0);
    for (int c = 0; c < C; ++c) {
        real s = 0.0;
        for (int b = 0; b < x.shape.b; ++b)
            for (int h = 0; h < x.shape.h; ++h)
                for (int w = 0; w < x.shape.w; ++w) s += x.at(b, c, h, w);
        const real m = s / real(n);
        real sq = 0.0;
        for (int b = 0; b < x.shape.b; ++b)
            for (int h = 0; h < x.shape.h; ++h)
                for (int w = 0; w < x.shape.w; ++w) {
                    const real dv = x.at(b, c, h, w) - m;
                    sq += dv * dv;
                }
        mean[size_t(c)] = m;
        var[size_t(c)] = sq / real(n);
    }
}

} // namespace meg::ref
