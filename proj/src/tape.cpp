#include "meg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace meg {

namespace {
constexpr real kBnEps = 1e-5;
constexpr real kBnMomentum = 0.1;
constexpr real kFocalClamp = 1e-12;
constexpr int64_t kOmpMin = 1 << 14; // below this, threading overhead dominates
} // namespace

Var Tape::param(const ParamTensor& p) {
    auto it = param_nodes_.find(&p.t);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = push_ext(&p.t, p.trainable);
    param_nodes_[&p.t] = v.id;
    return v;
}

Var Tape::find(const ParamTensor& p) const {
    auto it = param_nodes_.find(&p.t);
    return it == param_nodes_.end() ? Var{} : Var{it->second};
}

Var Tape::push_ext(const Tensor* t, bool needs) {
    Node n;
    n.ext = t;
    n.needs = needs;
    n.shape = t->shape;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
}

Var Tape::push_owned(Tensor t, bool needs) {
    Node n;
    n.shape = t.shape;
    n.owned = std::move(t);
    n.needs = needs;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
}

Tensor& Tape::grad_buf(Var v) {
    Node& n = nodes_[size_t(v.id)];
    if (!n.grad_ready) {
        n.grad = Tensor::zeros(n.shape);
        n.grad_ready = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) {
    return grad_buf(v); // zero for nodes the sweep never touched
}

void Tape::backward(Var loss) {
    if (consumed_)
        throw StaleGraphError(
            "backward called twice on one tape; record a new forward pass");
    if (shape(loss).numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " +
                         shape(loss).str());
    consumed_ = true;
    grad_buf(loss).v[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Var Tape::conv2d(Var x, Var w, Var bias, int stride, int padding) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const Tensor* bv = bias.valid() ? &val(bias) : nullptr;
    Tensor y;
    kern::conv2d_forward(xv, wv, bv, stride, padding, y);
    bool need = needs(x) || needs(w) || (bias.valid() && needs(bias));
    Var out = push_owned(std::move(y), need);
    if (need) {
        add_step([this, x, w, bias, out, stride, padding]() {
            const Tensor& dy = grad_buf(out);
            Tensor* dx = needs(x) ? &grad_buf(x) : nullptr;
            Tensor* dw = needs(w) ? &grad_buf(w) : nullptr;
            Tensor* db = (bias.valid() && needs(bias)) ? &grad_buf(bias) : nullptr;
            kern::conv2d_backward(val(x), val(w), stride, padding, dy, dx, dw, db);
        });
    }
    return out;
}

Var Tape::batchnorm2d(Var x, Var gamma, Var beta, Tensor* running_mean,
                      Tensor* running_var, Mode mode) {
    const Tensor& xv = val(x);
    const int C = xv.shape.c;
    if (val(gamma).numel() != C || val(beta).numel() != C)
        throw ShapeError("batchnorm2d: gamma/beta length must equal channels " +
                         std::to_string(C));
    if (int64_t(running_mean->numel()) != C || int64_t(running_var->numel()) != C)
        throw ShapeError("batchnorm2d: running stats length mismatch");

    std::vector<real> mean(size_t(C), 0.0), var(size_t(C), 0.0);
    if (mode == Mode::Train) {
        kern::channel_mean_var(xv, mean, var);
        const int64_t n = int64_t(xv.shape.b) * xv.shape.h * xv.shape.w;
        const real unbias = n > 1 ? real(n) / real(n - 1) : 1.0;
        for (int c = 0; c < C; ++c) {
            running_mean->v[size_t(c)] =
                (1.0 - kBnMomentum) * running_mean->v[size_t(c)] +
                kBnMomentum * mean[size_t(c)];
            running_var->v[size_t(c)] =
                (1.0 - kBnMomentum) * running_var->v[size_t(c)] +
                kBnMomentum * var[size_t(c)] * unbias;
        }
        running_mean->snap_f32();
        running_var->snap_f32();
    } else {
        for (int c = 0; c < C; ++c) {
            mean[size_t(c)] = running_mean->v[size_t(c)];
            var[size_t(c)] = running_var->v[size_t(c)];
        }
    }

    Tensor y(xv.shape);
    const int hw = xv.shape.h * xv.shape.w;
    const Tensor& gv = val(gamma);
    const Tensor& betav = val(beta);
    #pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < xv.shape.b; ++b)
        for (int c = 0; c < C; ++c) {
            const real m = mean[size_t(c)];
            const real inv = 1.0 / std::sqrt(var[size_t(c)] + kBnEps);
            const real g = gv.v[size_t(c)];
            const real bt = betav.v[size_t(c)];
            const real* xp = &xv.v[(size_t(b) * C + c) * hw];
            real* yp = &y.v[(size_t(b) * C + c) * hw];
            for (int i = 0; i < hw; ++i) yp[i] = g * (xp[i] - m) * inv + bt;
        }

    bool need = needs(x) || needs(gamma) || needs(beta);
    Var out = push_owned(std::move(y), need);
    if (need) {
        add_step([this, x, gamma, beta, out, mean, var, mode]() {
            const Tensor& xv2 = val(x);
            const Tensor& dy = grad_buf(out);
            const int C2 = xv2.shape.c;
            const int hw2 = xv2.shape.h * xv2.shape.w;
            const int64_t n = int64_t(xv2.shape.b) * hw2;
            const bool train = mode == Mode::Train;

            std::vector<real> sum_dy(size_t(C2), 0.0), sum_dyxh(size_t(C2), 0.0);
            #pragma omp parallel for schedule(static)
            for (int c = 0; c < C2; ++c) {
                const real m = mean[size_t(c)];
                const real inv = 1.0 / std::sqrt(var[size_t(c)] + kBnEps);
                real sd = 0.0, sx = 0.0;
                for (int b = 0; b < xv2.shape.b; ++b) {
                    const real* xp = &xv2.v[(size_t(b) * C2 + c) * hw2];
                    const real* dp = &dy.v[(size_t(b) * C2 + c) * hw2];
                    for (int i = 0; i < hw2; ++i) {
                        sd += dp[i];
                        sx += dp[i] * (xp[i] - m) * inv;
                    }
                }
                sum_dy[size_t(c)] = sd;
                sum_dyxh[size_t(c)] = sx;
            }
            if (needs(gamma)) {
                Tensor& dg = grad_buf(gamma);
                for (int c = 0; c < C2; ++c) dg.v[size_t(c)] += sum_dyxh[size_t(c)];
            }
            if (needs(beta)) {
                Tensor& db = grad_buf(beta);
                for (int c = 0; c < C2; ++c) db.v[size_t(c)] += sum_dy[size_t(c)];
            }
            if (needs(x)) {
                Tensor& dx = grad_buf(x);
                const Tensor& gv2 = val(gamma);
                #pragma omp parallel for collapse(2) schedule(static)
                for (int b = 0; b < xv2.shape.b; ++b)
                    for (int c = 0; c < C2; ++c) {
                        const real m = mean[size_t(c)];
                        const real inv = 1.0 / std::sqrt(var[size_t(c)] + kBnEps);
                        const real g = gv2.v[size_t(c)];
                        const real* xp = &xv2.v[(size_t(b) * C2 + c) * hw2];
                        const real* dp = &dy.v[(size_t(b) * C2 + c) * hw2];
                        real* op = &dx.v[(size_t(b) * C2 + c) * hw2];
                        if (train) {
                            const real mdy = sum_dy[size_t(c)] / real(n);
                            const real mdyxh = sum_dyxh[size_t(c)] / real(n);
                            for (int i = 0; i < hw2; ++i) {
                                const real xh = (xp[i] - m) * inv;
                                op[i] += g * inv * (dp[i] - mdy - xh * mdyxh);
                            }
                        } else {
                            for (int i = 0; i < hw2; ++i) op[i] += g * inv * dp[i];
                        }
                    }
            }
        });
    }
    return out;
}

Var Tape::relu(Var x) {
    const Tensor& xv = val(x);
    Tensor y(xv.shape);
    const int64_t n = xv.numel();
    #pragma omp parallel for schedule(static) if (n > kOmpMin)
    for (int64_t i = 0; i < n; ++i)
        y.v[size_t(i)] = xv.v[size_t(i)] > 0.0 ? xv.v[size_t(i)] : 0.0;
    Var out = push_owned(std::move(y), needs(x));
    if (needs(x)) {
        add_step([this, x, out, n]() {
            const Tensor& xv2 = val(x);
            const Tensor& dy = grad_buf(out);
            Tensor& dx = grad_buf(x);
            #pragma omp parallel for schedule(static) if (n > kOmpMin)
            for (int64_t i = 0; i < n; ++i)
                if (xv2.v[size_t(i)] > 0.0) dx.v[size_t(i)] += dy.v[size_t(i)];
        });
    }
    return out;
}

Var Tape::sigmoid(Var x) {
    const Tensor& xv = val(x);
    Tensor y(xv.shape);
    const int64_t n = xv.numel();
    #pragma omp parallel for schedule(static) if (n > kOmpMin)
    for (int64_t i = 0; i < n; ++i)
        y.v[size_t(i)] = 1.0 / (1.0 + std::exp(-xv.v[size_t(i)]));
    Var out = push_owned(std::move(y), needs(x));
    if (needs(x)) {
        add_step([this, x, out, n]() {
            const Tensor& s = val(out);
            const Tensor& dy = grad_buf(out);
            Tensor& dx = grad_buf(x);
            #pragma omp parallel for schedule(static) if (n > kOmpMin)
            for (int64_t i = 0; i < n; ++i) {
                const real sv = s.v[size_t(i)];
                dx.v[size_t(i)] += dy.v[size_t(i)] * sv * (1.0 - sv);
            }
        });
    }
    return out;
}

Var Tape::softmax_lastdim(Var x) {
    const Tensor& xv = val(x);
    const int64_t rows = int64_t(xv.shape.b) * xv.shape.c * xv.shape.h;
    const int cols = xv.shape.w;
    Tensor y(xv.shape);
    #pragma omp parallel for schedule(static) if (rows * cols > kOmpMin)
    for (int64_t r = 0; r < rows; ++r) {
        const real* xp = &xv.v[size_t(r * cols)];
        real* yp = &y.v[size_t(r * cols)];
        real mx = xp[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xp[j]);
        real s = 0.0;
        for (int j = 0; j < cols; ++j) {
            yp[j] = std::exp(xp[j] - mx);
            s += yp[j];
        }
        const real inv = 1.0 / s;
        for (int j = 0; j < cols; ++j) yp[j] *= inv;
    }
    Var out = push_owned(std::move(y), needs(x));
    if (needs(x)) {
        add_step([this, x, out, rows, cols]() {
            const Tensor& s = val(out);
            const Tensor& dy = grad_buf(out);
            Tensor& dx = grad_buf(x);
            #pragma omp parallel for schedule(static) if (rows * cols > kOmpMin)
            for (int64_t r = 0; r < rows; ++r) {
                const real* sp = &s.v[size_t(r * cols)];
                const real* gp = &dy.v[size_t(r * cols)];
                real* op = &dx.v[size_t(r * cols)];
                real dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += gp[j] * sp[j];
                for (int j = 0; j < cols; ++j) op[j] += sp[j] * (gp[j] - dot);
            }
        });
    }
    return out;
}

Var Tape::maxpool2d(Var x, int k, int stride, int padding) {
    Tensor y;
    auto argmax = std::make_shared<std::vector<int64_t>>();
    kern::maxpool2d_forward(val(x), k, stride, padding, y, *argmax);
    Var out = push_owned(std::move(y), needs(x));
    if (needs(x)) {
        add_step([this, x, out, argmax]() {
            kern::maxpool2d_backward(*argmax, grad_buf(out), grad_buf(x));
        });
    }
    return out;
}

Var Tape::global_avg_pool(Var x) {
    const Tensor& xv = val(x);
    const int hw = xv.shape.h * xv.shape.w;
    Tensor y({xv.shape.b, xv.shape.c, 1, 1});
    #pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < xv.shape.b; ++b)
        for (int c = 0; c < xv.shape.c; ++c) {
            const real* xp = &xv.v[(size_t(b) * xv.shape.c + c) * hw];
            real s = 0.0;
            for (int i = 0; i < hw; ++i) s += xp[i];
            y.at(b, c, 0, 0) = s / real(hw);
        }
    Var out = push_owned(std::move(y), needs(x));
    if (needs(x)) {
        add_step([this, x, out, hw]() {
            const Tensor& dy = grad_buf(out);
            Tensor& dx = grad_buf(x);
            const Shape s = dx.shape;
            #pragma omp parallel for collapse(2) schedule(static)
            for (int b = 0; b < s.b; ++b)
                for (int c = 0; c < s.c; ++c) {
                    const real g = dy.at(b, c, 0, 0) / real(hw);
                    real* op = &dx.v[(size_t(b) * s.c + c) * hw];
                    for (int i = 0; i < hw; ++i) op[i] += g;
                }
        });
    }
    return out;
}

Var Tape::fully_connected(Var x, Var w, Var bias) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const int B = xv.shape.b;
    const int F = int(xv.numel() / B);
    const int K = wv.shape.b;
    if (int64_t(wv.numel()) != int64_t(K) * F)
        throw ShapeError("fully_connected: weight " + wv.shape.str() +
                         " does not match " + std::to_string(F) + " features");
    const Tensor* bv = bias.valid() ? &val(bias) : nullptr;
    if (bv && int64_t(bv->numel()) != K)
        throw ShapeError("fully_connected: bias length mismatch");

    Tensor y({B, K, 1, 1});
    kern::gemm(Trans::N, Trans::T, B, K, F, xv.v.data(), wv.v.data(),
               y.v.data(), false);
    if (bv)
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < K; ++j) y.v[size_t(b) * K + j] += bv->v[size_t(j)];

    bool need = needs(x) || needs(w) || (bias.valid() && needs(bias));
    Var out = push_owned(std::move(y), need);
    if (need) {
        add_step([this, x, w, bias, out, B, F, K]() {
            const Tensor& dy = grad_buf(out);
            if (needs(x))
                kern::gemm(Trans::N, Trans::N, B, F, K, dy.v.data(),
                           val(w).v.data(), grad_buf(x).v.data(), true);
            if (needs(w))
                kern::gemm(Trans::T, Trans::N, K, F, B, dy.v.data(),
                           val(x).v.data(), grad_buf(w).v.data(), true);
            if (bias.valid() && needs(bias)) {
                Tensor& db = grad_buf(bias);
                for (int b = 0; b < B; ++b)
                    for (int j = 0; j < K; ++j)
                        db.v[size_t(j)] += dy.v[size_t(b) * K + j];
            }
        });
    }
    return out;
}

Var Tape::dropout(Var x, real rate, Mode mode, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ConfigError("dropout: rate must be in [0,1), got " +
                          std::to_string(rate));
    const Tensor& xv = val(x);
    const int64_t n = xv.numel();
    if (mode == Mode::Eval || rate == 0.0) {
        Tensor y = xv; // identity, bit-exact
        Var out = push_owned(std::move(y), needs(x));
        if (needs(x)) {
            add_step([this, x, out, n]() {
                const Tensor& dy = grad_buf(out);
                Tensor& dx = grad_buf(x);
                for (int64_t i = 0; i < n; ++i) dx.v[size_t(i)] += dy.v[size_t(i)];
            });
        }
        return out;
    }
    auto mask = std::make_shared<std::vector<uint8_t>>(size_t(n));
    const real scale = 1.0 / (1.0 - rate);
    Tensor y(xv.shape);
    for (int64_t i = 0; i < n; ++i) {
        const bool keep = rng.uniform() >= rate;
        (*mask)[size_t(i)] = keep;
        y.v[size_t(i)] = keep ? xv.v[size_t(i)] * scale : 0.0;
    }
    Var out = push_owned(std::move(y), needs(x));
    if (needs(x)) {
        add_step([this, x, out, mask, scale, n]() {
            const Tensor& dy = grad_buf(out);
            Tensor& dx = grad_buf(x);
            for (int64_t i = 0; i < n; ++i)
                if ((*mask)[size_t(i)]) dx.v[size_t(i)] += dy.v[size_t(i)] * scale;
        });
    }
    return out;
}

Var Tape::add(Var x, Var y) {
    const Tensor& a = val(x);
    const Tensor& b = val(y);
    check_same_shape(a.shape, b.shape, "add");
    Tensor out(a.shape);
    const int64_t n = a.numel();
    #pragma omp parallel for schedule(static) if (n > kOmpMin)
    for (int64_t i = 0; i < n; ++i)
        out.v[size_t(i)] = a.v[size_t(i)] + b.v[size_t(i)];
    Var o = push_owned(std::move(out), needs(x) || needs(y));
    if (needs(x) || needs(y)) {
        add_step([this, x, y, o, n]() {
            const Tensor& dy = grad_buf(o);
            for (Var v : {x, y})
                if (needs(v)) {
                    Tensor& d = grad_buf(v);
                    for (int64_t i = 0; i < n; ++i) d.v[size_t(i)] += dy.v[size_t(i)];
                }
        });
    }
    return o;
}

Var Tape::mul(Var x, Var y) {
    const Tensor& a = val(x);
    const Tensor& b = val(y);
    check_same_shape(a.shape, b.shape, "mul");
    Tensor out(a.shape);
    const int64_t n = a.numel();
    #pragma omp parallel for schedule(static) if (n > kOmpMin)
    for (int64_t i = 0; i < n; ++i)
        out.v[size_t(i)] = a.v[size_t(i)] * b.v[size_t(i)];
    Var o = push_owned(std::move(out), needs(x) || needs(y));
    if (needs(x) || needs(y)) {
        add_step([this, x, y, o, n]() {
            const Tensor& dy = grad_buf(o);
            if (needs(x)) {
                Tensor& d = grad_buf(x);
                const Tensor& other = val(y);
                for (int64_t i = 0; i < n; ++i)
                    d.v[size_t(i)] += dy.v[size_t(i)] * other.v[size_t(i)];
            }
            if (needs(y)) {
                Tensor& d = grad_buf(y);
                const Tensor& other = val(x);
                for (int64_t i = 0; i < n; ++i)
                    d.v[size_t(i)] += dy.v[size_t(i)] * other.v[size_t(i)];
            }
        });
    }
    return o;
}

Var Tape::abs_diff(Var x, Var y) {
    const Tensor& a = val(x);
    const Tensor& b = val(y);
    check_same_shape(a.shape, b.shape, "abs_diff");
    Tensor out(a.shape);
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i)
        out.v[size_t(i)] = std::abs(a.v[size_t(i)] - b.v[size_t(i)]);
    Var o = push_owned(std::move(out), needs(x) || needs(y));
    if (needs(x) || needs(y)) {
        add_step([this, x, y, o, n]() {
            const Tensor& dy = grad_buf(o);
            const Tensor& a2 = val(x);
            const Tensor& b2 = val(y);
            for (int64_t i = 0; i < n; ++i) {
                const real d = a2.v[size_t(i)] - b2.v[size_t(i)];
                const real s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (needs(x)) grad_buf(x).v[size_t(i)] += dy.v[size_t(i)] * s;
                if (needs(y)) grad_buf(y).v[size_t(i)] -= dy.v[size_t(i)] * s;
            }
        });
    }
    return o;
}

Var Tape::mul_scalar_param(Var x, Var scalar) {
    const Tensor& a = val(x);
    if (val(scalar).numel() != 1)
        throw ShapeError("mul_scalar_param: scalar must have one element");
    const real s = val(scalar).v[0];
    Tensor out(a.shape);
    const int64_t n = a.numel();
    #pragma omp parallel for schedule(static) if (n > kOmpMin)
    for (int64_t i = 0; i < n; ++i) out.v[size_t(i)] = a.v[size_t(i)] * s;
    Var o = push_owned(std::move(out), needs(x) || needs(scalar));
    if (needs(x) || needs(scalar)) {
        add_step([this, x, scalar, o, n]() {
            const Tensor& dy = grad_buf(o);
            if (needs(x)) {
                const real s2 = val(scalar).v[0];
                Tensor& d = grad_buf(x);
                for (int64_t i = 0; i < n; ++i) d.v[size_t(i)] += dy.v[size_t(i)] * s2;
            }
            if (needs(scalar)) {
                const Tensor& a2 = val(x);
                real acc = 0.0;
                for (int64_t i = 0; i < n; ++i)
                    acc += dy.v[size_t(i)] * a2.v[size_t(i)];
                grad_buf(scalar).v[0] += acc;
            }
        });
    }
    return o;
}

Var Tape::mul_bcast_channel(Var x, Var attn) {
    const Tensor& a = val(x);
    const Tensor& m = val(attn);
    if (m.shape.c != 1 || m.shape.b != a.shape.b || m.shape.h != a.shape.h ||
        m.shape.w != a.shape.w)
        throw ShapeError("mul_bcast_channel: attention " + m.shape.str() +
                         " does not broadcast over " + a.shape.str());
    Tensor out(a.shape);
    const int hw = a.shape.h * a.shape.w;
    #pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < a.shape.b; ++b)
        for (int c = 0; c < a.shape.c; ++c) {
            const real* xp = &a.v[(size_t(b) * a.shape.c + c) * hw];
            const real* mp = &m.v[size_t(b) * hw];
            real* op = &out.v[(size_t(b) * a.shape.c + c) * hw];
            for (int i = 0; i < hw; ++i) op[i] = xp[i] * mp[i];
        }
    Var o = push_owned(std::move(out), needs(x) || needs(attn));
    if (needs(x) || needs(attn)) {
        add_step([this, x, attn, o, hw]() {
            const Tensor& dy = grad_buf(o);
            const Tensor& a2 = val(x);
            const Tensor& m2 = val(attn);
            const Shape s = a2.shape;
            if (needs(x)) {
                Tensor& d = grad_buf(x);
                #pragma omp parallel for collapse(2) schedule(static)
                for (int b = 0; b < s.b; ++b)
                    for (int c = 0; c < s.c; ++c) {
                        const real* gp = &dy.v[(size_t(b) * s.c + c) * hw];
                        const real* mp = &m2.v[size_t(b) * hw];
                        real* op = &d.v[(size_t(b) * s.c + c) * hw];
                        for (int i = 0; i < hw; ++i) op[i] += gp[i] * mp[i];
                    }
            }
            if (needs(attn)) {
                Tensor& d = grad_buf(attn);
                #pragma omp parallel for schedule(static)
                for (int b = 0; b < s.b; ++b) {
                    real* op = &d.v[size_t(b) * hw];
                    for (int c = 0; c < s.c; ++c) {
                        const real* gp = &dy.v[(size_t(b) * s.c + c) * hw];
                        const real* xp = &a2.v[(size_t(b) * s.c + c) * hw];
                        for (int i = 0; i < hw; ++i) op[i] += gp[i] * xp[i];
                    }
                }
            }
        });
    }
    return o;
}

// Horizontal neighbour differences, zero in the last column.
Var Tape::grad_x(Var x) {
    const Tensor& a = val(x);
    Tensor out(a.shape);
    const Shape s = a.shape;
    #pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c)
            for (int i = 0; i < s.h; ++i) {
                for (int j = 0; j < s.w - 1; ++j)
                    out.at(b, c, i, j) =
                        std::abs(a.at(b, c, i, j + 1) - a.at(b, c, i, j));
                out.at(b, c, i, s.w - 1) = 0.0;
            }
    Var o = push_owned(std::move(out), needs(x));
    if (needs(x)) {
        add_step([this, x, o]() {
            const Tensor& a2 = val(x);
            const Tensor& dy = grad_buf(o);
            Tensor& dx = grad_buf(x);
            const Shape s2 = a2.shape;
            for (int b = 0; b < s2.b; ++b)
                for (int c = 0; c < s2.c; ++c)
                    for (int i = 0; i < s2.h; ++i)
                        for (int j = 0; j < s2.w - 1; ++j) {
                            const real d =
                                a2.at(b, c, i, j + 1) - a2.at(b, c, i, j);
                            const real sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                            const real g = dy.at(b, c, i, j) * sg;
                            dx.at(b, c, i, j + 1) += g;
                            dx.at(b, c, i, j) -= g;
                        }
        });
    }
    return o;
}

Var Tape::grad_y(Var x) {
    const Tensor& a = val(x);
    Tensor out(a.shape);
    const Shape s = a.shape;
    #pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c) {
            for (int i = 0; i < s.h - 1; ++i)
                for (int j = 0; j < s.w; ++j)
                    out.at(b, c, i, j) =
                        std::abs(a.at(b, c, i + 1, j) - a.at(b, c, i, j));
            for (int j = 0; j < s.w; ++j) out.at(b, c, s.h - 1, j) = 0.0;
        }
    Var o = push_owned(std::move(out), needs(x));
    if (needs(x)) {
        add_step([this, x, o]() {
            const Tensor& a2 = val(x);
            const Tensor& dy = grad_buf(o);
            Tensor& dx = grad_buf(x);
            const Shape s2 = a2.shape;
            for (int b = 0; b < s2.b; ++b)
                for (int c = 0; c < s2.c; ++c)
                    for (int i = 0; i < s2.h - 1; ++i)
                        for (int j = 0; j < s2.w; ++j) {
                            const real d =
                                a2.at(b, c, i + 1, j) - a2.at(b, c, i, j);
                            const real sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                            const real g = dy.at(b, c, i, j) * sg;
                            dx.at(b, c, i + 1, j) += g;
                            dx.at(b, c, i, j) -= g;
                        }
        });
    }
    return o;
}

Var Tape::attn_scores(Var q, Var k) {
    const Tensor& qv = val(q);
    const Tensor& kv = val(k);
    check_same_shape(qv.shape, kv.shape, "attn_scores");
    const int B = qv.shape.b;
    const int C = qv.shape.c;
    const int N = qv.shape.h * qv.shape.w;
    Tensor e({B, 1, N, N});
    #pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b)
        kern::gemm(Trans::T, Trans::N, N, N, C, &qv.v[size_t(b) * C * N],
                   &kv.v[size_t(b) * C * N], &e.v[size_t(b) * N * N], false);
    Var o = push_owned(std::move(e), needs(q) || needs(k));
    if (needs(q) || needs(k)) {
        add_step([this, q, k, o, B, C, N]() {
            const Tensor& de = grad_buf(o);
            const Tensor& qv2 = val(q);
            const Tensor& kv2 = val(k);
            if (needs(q)) {
                Tensor& dq = grad_buf(q);
                #pragma omp parallel for schedule(static)
                for (int b = 0; b < B; ++b)
                    kern::gemm(Trans::N, Trans::T, C, N, N,
                               &kv2.v[size_t(b) * C * N], &de.v[size_t(b) * N * N],
                               &dq.v[size_t(b) * C * N], true);
            }
            if (needs(k)) {
                Tensor& dk = grad_buf(k);
                #pragma omp parallel for schedule(static)
                for (int b = 0; b < B; ++b)
                    kern::gemm(Trans::N, Trans::N, C, N, N,
                               &qv2.v[size_t(b) * C * N], &de.v[size_t(b) * N * N],
                               &dk.v[size_t(b) * C * N], true);
            }
        });
    }
    return o;
}

Var Tape::attn_apply(Var v, Var e) {
    const Tensor& vv = val(v);
    const Tensor& ev = val(e);
    const int B = vv.shape.b;
    const int C = vv.shape.c;
    const int N = vv.shape.h * vv.shape.w;
    if (ev.shape.b != B || ev.shape.c != 1 || ev.shape.h != N || ev.shape.w != N)
        throw ShapeError("attn_apply: attention " + ev.shape.str() +
                         " does not match value " + vv.shape.str());
    Tensor y(vv.shape);
    #pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b)
        kern::gemm(Trans::N, Trans::T, C, N, N, &vv.v[size_t(b) * C * N],
                   &ev.v[size_t(b) * N * N], &y.v[size_t(b) * C * N], false);
    Var o = push_owned(std::move(y), needs(v) || needs(e));
    if (needs(v) || needs(e)) {
        add_step([this, v, e, o, B, C, N]() {
            const Tensor& dy = grad_buf(o);
            const Tensor& vv2 = val(v);
            const Tensor& ev2 = val(e);
            if (needs(v)) {
                Tensor& dv = grad_buf(v);
                #pragma omp parallel for schedule(static)
                for (int b = 0; b < B; ++b)
                    kern::gemm(Trans::N, Trans::N, C, N, N,
                               &dy.v[size_t(b) * C * N], &ev2.v[size_t(b) * N * N],
                               &dv.v[size_t(b) * C * N], true);
            }
            if (needs(e)) {
                Tensor& de = grad_buf(e);
                #pragma omp parallel for schedule(static)
                for (int b = 0; b < B; ++b)
                    kern::gemm(Trans::T, Trans::N, N, N, C,
                               &dy.v[size_t(b) * C * N], &vv2.v[size_t(b) * C * N],
                               &de.v[size_t(b) * N * N], true);
            }
        });
    }
    return o;
}

Var Tape::reshape(Var x, Shape s) {
    const Tensor& a = val(x);
    if (s.numel() != a.numel())
        throw ShapeError("reshape: cannot view " + a.shape.str() + " as " +
                         s.str());
    Tensor out = a;
    out.shape = s;
    out.g.clear();
    Var o = push_owned(std::move(out), needs(x));
    if (needs(x)) {
        add_step([this, x, o]() {
            const Tensor& dy = grad_buf(o);
            Tensor& dx = grad_buf(x);
            for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i];
        });
    }
    return o;
}

Var Tape::sum(Var x) {
    const Tensor& a = val(x);
    real s = 0.0;
    for (real v : a.v) s += v;
    Tensor out({1, 1, 1, 1});
    out.v[0] = s;
    Var o = push_owned(std::move(out), needs(x));
    if (needs(x)) {
        add_step([this, x, o]() {
            const real g = grad_buf(o).v[0];
            Tensor& dx = grad_buf(x);
            for (auto& v : dx.v) v += g;
        });
    }
    return o;
}

Var Tape::focal_loss(Var probs, const std::vector<int>& targets, real gamma) {
    const Tensor& p = val(probs);
    const int B = p.shape.b;
    const int K = int(p.numel() / B);
    if (int(targets.size()) != B)
        throw ShapeError("focal_loss: " + std::to_string(targets.size()) +
                         " targets for batch " + std::to_string(B));
    for (int t : targets)
        if (t < 0 || t >= K)
            throw ConfigError("focal_loss: target class " + std::to_string(t) +
                              " outside [0," + std::to_string(K) + ")");
    real loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const real pt = std::max(p.v[size_t(b) * K + targets[size_t(b)]], kFocalClamp);
        loss += -std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    loss /= real(B);
    Tensor out({1, 1, 1, 1});
    out.v[0] = loss;
    Var o = push_owned(std::move(out), needs(probs));
    if (needs(probs)) {
        auto tg = std::make_shared<std::vector<int>>(targets);
        add_step([this, probs, o, tg, gamma, B, K]() {
            const real g = grad_buf(o).v[0];
            const Tensor& p2 = val(probs);
            Tensor& dp = grad_buf(probs);
            for (int b = 0; b < B; ++b) {
                const size_t idx = size_t(b) * K + (*tg)[size_t(b)];
                const real pt = p2.v[idx];
                if (pt < kFocalClamp) continue; // clamped region, zero slope
                const real om = 1.0 - pt;
                // d/dp of -(1-p)^g ln p = g (1-p)^{g-1} ln p - (1-p)^g / p
                const real t1 = (gamma == 0.0 || om <= 0.0)
                                    ? 0.0
                                    : gamma * std::pow(om, gamma - 1.0) * std::log(pt);
                const real t2 = std::pow(om, gamma) / pt;
                dp.v[idx] += g * (t1 - t2) / real(B);
            }
        });
    }
    return o;
}

} // namespace meg
