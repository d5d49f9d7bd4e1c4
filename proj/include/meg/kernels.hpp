#pragma once

#include <cstdint>
#include <vector>

#include "meg/tensor.hpp"

// Heavy data-parallel primitives. meg::kern is the production path
// (OpenMP loops over disjoint output slabs + Eigen GEMM); meg::ref is the
// serial naive implementation kept as a test oracle and benchmark baseline.
//
// Every kern routine computes each output element with a fixed serial
// accumulation order, so results are bit-identical for any thread count.

namespace meg {

enum class Trans { N, T };

struct ConvDims {
    int b, cin, h, w;   // input
    int cout, k;        // kernel (square)
    int stride, pad;
    int ho, wo;         // output spatial dims
};

// Validates x/w compatibility and computes output dims.
ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad);

namespace kern {

// C (m x n, row-major) = op(A) * op(B), optionally accumulating into C.
// op(A) is m x k, op(B) is k x n; transposed operands are stored as their
// untransposed row-major layouts (BLAS convention).
void gemm(Trans ta, Trans tb, int m, int n, int k, const real* a,
          const real* b, real* c, bool accumulate);

// Cross-correlation (no kernel flip). bias may be null; its length is cout.
void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias,
                    int stride, int pad, Tensor& y);

// Any of dx/dw/db may be null to skip that gradient. Non-null outputs are
// accumulated into (callers zero them beforehand).
void conv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad,
                     const Tensor& dy, Tensor* dx, Tensor* dw, Tensor* db);

// argmax records the linear index into x of each selected element.
void maxpool2d_forward(const Tensor& x, int k, int stride, int pad, Tensor& y,
                       std::vector<int64_t>& argmax);
void maxpool2d_backward(const std::vector<int64_t>& argmax, const Tensor& dy,
                        Tensor& dx);

// Per-channel mean and biased variance over (B, H, W).
void channel_mean_var(const Tensor& x, std::vector<real>& mean,
                      std::vector<real>& var);

} // namespace kern

namespace ref {

void gemm(Trans ta, Trans tb, int m, int n, int k, const real* a,
          const real* b, real* c, bool accumulate);

// The quintuple-loop reference conv.
void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias,
                    int stride, int pad, Tensor& y);

void maxpool2d_forward(const Tensor& x, int k, int stride, int pad, Tensor& y,
                       std::vector<int64_t>& argmax);

void channel_mean_var(const Tensor& x, std::vector<real>& mean,
                      std::vector<real>& var);

} // namespace ref

} // namespace meg
