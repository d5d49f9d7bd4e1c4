#include "meg/blocks.hpp"

#include <cmath>

namespace meg {

namespace {

// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
Tensor kaiming_uniform(Shape s, Rng& rng) {
    const double fan_in = double(s.c) * s.h * s.w;
    const double bound = std::sqrt(6.0 / fan_in);
    Tensor t = Tensor::uniform(s, rng, -bound, bound);
    t.snap_f32();
    return t;
}

ParamTensor named(Tensor t, std::string name, bool trainable = true) {
    return ParamTensor{std::move(t), std::move(name), trainable};
}

BatchNormParams make_bn_params(int channels, const std::string& prefix) {
    const Shape s{1, channels, 1, 1};
    BatchNormParams bn;
    bn.gamma = named(Tensor::full(s, 1.0), prefix + ".gamma");
    bn.beta = named(Tensor::zeros(s), prefix + ".beta");
    bn.running_mean = named(Tensor::zeros(s), prefix + ".running_mean", false);
    bn.running_var = named(Tensor::full(s, 1.0), prefix + ".running_var", false);
    return bn;
}

} // namespace

GradientAttentionParams make_gab_params(int channels, Rng& rng,
                                        const std::string& prefix) {
    GradientAttentionParams p;
    p.w_g = named(kaiming_uniform({1, channels, 3, 3}, rng), prefix + ".wg");
    p.b_g = named(Tensor::zeros({1, 1, 1, 1}), prefix + ".bg");
    return p;
}

ResidualAttentionParams make_rab_params(int c_in, int c_out, int stride,
                                        bool with_self_attention,
                                        double dropout_rate, Rng& rng,
                                        const std::string& prefix) {
    if (stride != 1 && stride != 2)
        throw ConfigError("residual block stride must be 1 or 2, got " +
                          std::to_string(stride));
    ResidualAttentionParams p;
    p.stride = stride;
    p.conv1 = named(kaiming_uniform({c_out, c_in, 3, 3}, rng), prefix + ".conv1.w");
    p.bn1 = make_bn_params(c_out, prefix + ".bn1");
    p.conv2 = named(kaiming_uniform({c_out, c_out, 3, 3}, rng), prefix + ".conv2.w");
    p.bn2 = make_bn_params(c_out, prefix + ".bn2");
    if (c_in != c_out || stride != 1)
        p.shortcut = named(kaiming_uniform({c_out, c_in, 1, 1}, rng),
                           prefix + ".shortcut.w");
    if (with_self_attention) {
        if (c_out % 8 != 0)
            throw ConfigError("self-attention needs channels divisible by 8, got " +
                              std::to_string(c_out));
        SelfAttentionParams a;
        a.wq = named(kaiming_uniform({c_out / 8, c_out, 1, 1}, rng),
                     prefix + ".attn.wq");
        a.wk = named(kaiming_uniform({c_out / 8, c_out, 1, 1}, rng),
                     prefix + ".attn.wk");
        a.wv = named(kaiming_uniform({c_out, c_out, 1, 1}, rng),
                     prefix + ".attn.wv");
        a.gamma = named(Tensor::zeros({1, 1, 1, 1}), prefix + ".attn.gamma");
        a.dropout_rate = dropout_rate;
        p.attn = std::move(a);
    }
    return p;
}

Var batchnorm(Tape& t, Var x, BatchNormParams& bn, Mode mode) {
    return t.batchnorm2d(x, t.param(bn.gamma), t.param(bn.beta),
                         &bn.running_mean.t, &bn.running_var.t, mode);
}

GabOut gab_forward(Tape& t, Var x, const GradientAttentionParams& p) {
    const Shape xs = t.shape(x);
    if (p.w_g.t.shape.c != xs.c)
        throw ShapeError("gradient attention: kernel expects " +
                         std::to_string(p.w_g.t.shape.c) + " channels, input has " +
                         std::to_string(xs.c));
    auto [gx, gy] = t.gradient_maps(x);
    Var combined = t.add(gx, gy);
    Var pre = t.conv2d(combined, t.param(p.w_g), t.param(p.b_g), 1, 1);
    Var attn = t.sigmoid(pre);
    Var y = t.mul_bcast_channel(x, attn);
    return GabOut{y, attn};
}

Var residual_transform(Tape& t, Var x, ResidualAttentionParams& p, Mode mode) {
    Var h = t.conv2d(x, t.param(p.conv1), Var{}, p.stride, 1);
    h = batchnorm(t, h, p.bn1, mode);
    h = t.relu(h);
    h = t.conv2d(h, t.param(p.conv2), Var{}, 1, 1);
    return batchnorm(t, h, p.bn2, mode);
}

Var residual_forward(Tape& t, Var x, ResidualAttentionParams& p, Mode mode) {
    Var f = residual_transform(t, x, p, mode);
    Var sc = p.shortcut ? t.conv2d(x, t.param(*p.shortcut), Var{}, p.stride, 0)
                        : x;
    if (!(t.shape(sc) == t.shape(f)))
        throw std::logic_error("residual block: shortcut " + t.shape(sc).str() +
                               " vs transform " + t.shape(f).str() +
                               "; construction should make this impossible");
    return t.add(sc, f);
}

Var self_attention(Tape& t, Var x_res, const SelfAttentionParams& p, Rng& rng,
                   Mode mode, bool strict_literal) {
    Var q = t.conv2d(x_res, t.param(p.wq), Var{}, 1, 0);
    Var k = t.conv2d(x_res, t.param(p.wk), Var{}, 1, 0);
    Var v = t.conv2d(x_res, t.param(p.wv), Var{}, 1, 0);
    Var e = t.softmax_lastdim(t.attn_scores(q, k));
    Var att = t.mul_scalar_param(t.attn_apply(v, e), t.param(p.gamma));
    Var y_attn = strict_literal ? att : t.add(att, x_res);
    return t.dropout(t.relu(y_attn), p.dropout_rate, mode, rng);
}

} // namespace meg
