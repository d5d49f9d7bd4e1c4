#pragma once

#include <optional>
#include <string>

#include "meg/tape.hpp"

namespace meg {

// Gating layer that highlights intensity transitions: sigmoid of a learned
// 3x3 convolution over summed horizontal/vertical absolute differences,
// multiplied back onto the input.
struct GradientAttentionParams {
    ParamTensor w_g; // (1, C, 3, 3)
    ParamTensor b_g; // scalar bias
};

struct BatchNormParams {
    ParamTensor gamma, beta;               // trainable
    ParamTensor running_mean, running_var; // buffers
};

struct SelfAttentionParams {
    ParamTensor wq, wk;  // 1x1 convs to C/8 channels, bias-free
    ParamTensor wv;      // 1x1 conv to C channels, bias-free
    ParamTensor gamma;   // learnable scalar, initialized to zero
    double dropout_rate = 0.3;
};

// Two 3x3 conv+BN stages with a shortcut, optionally followed by spatial
// self-attention over the flattened H*W axis.
struct ResidualAttentionParams {
    ParamTensor conv1; // (C_out, C_in, 3, 3), carries the block stride
    BatchNormParams bn1;
    ParamTensor conv2; // (C_out, C_out, 3, 3)
    BatchNormParams bn2;
    std::optional<ParamTensor> shortcut; // (C_out, C_in, 1, 1) iff dims change
    std::optional<SelfAttentionParams> attn;
    int stride = 1;
};

GradientAttentionParams make_gab_params(int channels, Rng& rng,
                                        const std::string& prefix);

ResidualAttentionParams make_rab_params(int c_in, int c_out, int stride,
                                        bool with_self_attention,
                                        double dropout_rate, Rng& rng,
                                        const std::string& prefix);

Var batchnorm(Tape& t, Var x, BatchNormParams& bn, Mode mode);

struct GabOut {
    Var y;    // gated input
    Var attn; // single-channel attention map in (0,1)
};
GabOut gab_forward(Tape& t, Var x, const GradientAttentionParams& p);

// x_res = shortcut(x) + BN2(Conv2(ReLU(BN1(Conv1(x)))))
Var residual_forward(Tape& t, Var x, ResidualAttentionParams& p, Mode mode);

// The two-conv transformation alone (no shortcut add); used by the
// residual-connection ablation.
Var residual_transform(Tape& t, Var x, ResidualAttentionParams& p, Mode mode);

// SAGAN-style self-attention over x_res. With strict_literal the output is
// Dropout(ReLU(gamma * V E^T)); otherwise the residual add is included:
// Dropout(ReLU(gamma * V E^T + x_res)). gamma starts at zero, so the default
// wiring makes the block an identity-plus-ReLU at initialization.
Var self_attention(Tape& t, Var x_res, const SelfAttentionParams& p, Rng& rng,
                   Mode mode, bool strict_literal = false);

} // namespace meg
