#include "meg/kernels.hpp"

#include <Eigen/Dense>

#include <limits>

namespace meg {

ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad) {
    if (w.h != w.w)
        throw ShapeError("conv2d: kernel must be square, got " + w.str());
    if (x.c != w.c)
        throw ShapeError("conv2d: input channels " + std::to_string(x.c) +
                         " != kernel input channels " + std::to_string(w.c));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (pad < 0) throw ShapeError("conv2d: padding must be >= 0");
    ConvDims d;
    d.b = x.b; d.cin = x.c; d.h = x.h; d.w = x.w;
    d.cout = w.b; d.k = w.h;
    d.stride = stride; d.pad = pad;
    d.ho = (x.h + 2 * pad - w.h) / stride + 1;
    d.wo = (x.w + 2 * pad - w.w) / stride + 1;
    if (d.ho < 1 || d.wo < 1)
        throw ShapeError("conv2d: kernel " + w.str() + " does not fit input " +
                         x.str() + " with stride " + std::to_string(stride) +
                         " pad " + std::to_string(pad));
    return d;
}

namespace kern {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

void gemm(Trans ta, Trans tb, int m, int n, int k, const real* a,
          const real* b, real* c, bool accumulate) {
    MMap cm(c, m, n);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) cm.noalias() += lhs * rhs;
        else cm.noalias() = lhs * rhs;
    };
    if (ta == Trans::N && tb == Trans::N)
        run(CMap(a, m, k), CMap(b, k, n));
    else if (ta == Trans::N && tb == Trans::T)
        run(CMap(a, m, k), CMap(b, n, k).transpose());
    else if (ta == Trans::T && tb == Trans::N)
        run(CMap(a, k, m).transpose(), CMap(b, k, n));
    else
        run(CMap(a, k, m).transpose(), CMap(b, n, k).transpose());
}

// col is (cin*k*k) x (ho*wo), one batch item. Rows for a fixed ci are
// disjoint, so the ci loop parallelizes without races.
static void im2col(const Tensor& x, const ConvDims& d, int b, real* col) {
    const int n = d.ho * d.wo;
    #pragma omp parallel for schedule(static)
    for (int ci = 0; ci < d.cin; ++ci) {
        for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
                real* row = col + (int64_t(ci) * d.k * d.k + kh * d.k + kw) * n;
                for (int oh = 0; oh < d.ho; ++oh) {
                    const int ih = oh * d.stride - d.pad + kh;
                    for (int ow = 0; ow < d.wo; ++ow) {
                        const int iw = ow * d.stride - d.pad + kw;
                        row[oh * d.wo + ow] =
                            (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w)
                                ? x.at(b, ci, ih, iw)
                                : 0.0;
                    }
                }
            }
        }
    }
}

static void col2im_acc(const real* col, const ConvDims& d, int b, Tensor& dx) {
    const int n = d.ho * d.wo;
    #pragma omp parallel for schedule(static)
    for (int ci = 0; ci < d.cin; ++ci) {
        for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
                const real* row = col + (int64_t(ci) * d.k * d.k + kh * d.k + kw) * n;
                for (int oh = 0; oh < d.ho; ++oh) {
                    const int ih = oh * d.stride - d.pad + kh;
                    if (ih < 0 || ih >= d.h) continue;
                    for (int ow = 0; ow < d.wo; ++ow) {
                        const int iw = ow * d.stride - d.pad + kw;
                        if (iw < 0 || iw >= d.w) continue;
                        dx.at(b, ci, ih, iw) += row[oh * d.wo + ow];
                    }
                }
            }
        }
    }
}

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias,
                    int stride, int pad, Tensor& y) {
    const ConvDims d = conv_dims(x.shape, w.shape, stride, pad);
    y = Tensor({d.b, d.cout, d.ho, d.wo});
    const int n = d.ho * d.wo;
    const int kk = d.cin * d.k * d.k;
    std::vector<real> col(size_t(kk) * n);
    for (int b = 0; b < d.b; ++b) {
        im2col(x, d, b, col.data());
        gemm(Trans::N, Trans::N, d.cout, n, kk, w.v.data(), col.data(),
             &y.v[size_t(b) * d.cout * n], false);
    }
    if (bias) {
        if (int64_t(bias->numel()) != d.cout)
            throw ShapeError("conv2d: bias length " +
                             std::to_string(bias->numel()) + " != cout " +
                             std::to_string(d.cout));
        #pragma omp parallel for collapse(2) schedule(static)
        for (int b = 0; b < d.b; ++b)
            for (int co = 0; co < d.cout; ++co) {
                real* yp = &y.v[(size_t(b) * d.cout + co) * n];
                const real bv = bias->v[size_t(co)];
                for (int i = 0; i < n; ++i) yp[i] += bv;
            }
    }
}

void conv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad,
                     const Tensor& dy, Tensor* dx, Tensor* dw, Tensor* db) {
    const ConvDims d = conv_dims(x.shape, w.shape, stride, pad);
    const int n = d.ho * d.wo;
    const int kk = d.cin * d.k * d.k;

    std::vector<real> col(size_t(kk) * n);
    std::vector<real> colg;
    if (dx) colg.resize(size_t(kk) * n);

    for (int b = 0; b < d.b; ++b) {
        const real* dyb = &dy.v[size_t(b) * d.cout * n];
        if (dw) {
            im2col(x, d, b, col.data());
            // dw += dy_b (cout x n) * col^T (n x kk)
            gemm(Trans::N, Trans::T, d.cout, kk, n, dyb, col.data(),
                 dw->v.data(), true);
        }
        if (dx) {
            // colg = w^T (kk x cout) * dy_b (cout x n)
            gemm(Trans::T, Trans::N, kk, n, d.cout, w.v.data(), dyb,
                 colg.data(), false);
            col2im_acc(colg.data(), d, b, *dx);
        }
    }
    if (db) {
        #pragma omp parallel for schedule(static)
        for (int co = 0; co < d.cout; ++co) {
            real s = 0.0;
            for (int b = 0; b < d.b; ++b) {
                const real* dyp = &dy.v[(size_t(b) * d.cout + co) * n];
                for (int i = 0; i < n; ++i) s += dyp[i];
            }
            db->v[size_t(co)] += s;
        }
    }
}

void maxpool2d_forward(const Tensor& x, int k, int stride, int pad, Tensor& y,
                       std::vector<int64_t>& argmax) {
    if (k < 1 || stride < 1 || pad < 0)
        throw ShapeError("maxpool2d: bad window/stride/pad");
    const int ho = (x.shape.h + 2 * pad - k) / stride + 1;
    const int wo = (x.shape.w + 2 * pad - k) / stride + 1;
    if (ho < 1 || wo < 1)
        throw ShapeError("maxpool2d: window does not fit input " + x.shape.str());
    y = Tensor({x.shape.b, x.shape.c, ho, wo});
    argmax.assign(size_t(y.numel()), -1);
    #pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < x.shape.b; ++b) {
        for (int c = 0; c < x.shape.c; ++c) {
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    real best = -std::numeric_limits<real>::infinity();
                    int64_t besti = -1;
                    for (int kh = 0; kh < k; ++kh) {
                        const int ih = oh * stride - pad + kh;
                        if (ih < 0 || ih >= x.shape.h) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const int iw = ow * stride - pad + kw;
                            if (iw < 0 || iw >= x.shape.w) continue;
                            const real val = x.at(b, c, ih, iw);
                            if (val > best) {
                                best = val;
                                besti = x.index(b, c, ih, iw);
                            }
                        }
                    }
                    y.at(b, c, oh, ow) = best;
                    argmax[size_t(y.index(b, c, oh, ow))] = besti;
                }
            }
        }
    }
}

void maxpool2d_backward(const std::vector<int64_t>& argmax, const Tensor& dy,
                        Tensor& dx) {
    // Serial: distinct outputs may share an argmax cell.
    for (size_t i = 0; i < argmax.size(); ++i)
        if (argmax[i] >= 0) dx.v[size_t(argmax[i])] += dy.v[i];
}

void channel_mean_var(const Tensor& x, std::vector<real>& mean,
                      std::vector<real>& var) {
    const int C = x.shape.c;
    const int64_t n = int64_t(x.shape.b) * x.shape.h * x.shape.w;
    mean.assign(size_t(C), 0.0);
    var.assign(size_t(C), 0.0);
    const int hw = x.shape.h * x.shape.w;
    #pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        real s = 0.0;
        for (int b = 0; b < x.shape.b; ++b) {
            const real* p = &x.v[(size_t(b) * C + c) * hw];
            for (int i = 0; i < hw; ++i) s += p[i];
        }
        const real m = s / real(n);
        real sq = 0.0;
        for (int b = 0; b < x.shape.b; ++b) {
            const real* p = &x.v[(size_t(b) * C + c) * hw];
            for (int i = 0; i < hw; ++i) {
                const real dv = p[i] - m;
                sq += dv * dv;
            }
        }
        mean[size_t(c)] = m;
        var[size_t(c)] = sq / real(n);
    }
}

} // namespace kern

} // namespace meg
