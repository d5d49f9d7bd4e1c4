#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "meg/blocks.hpp"

namespace meg {

struct MegaNetConfig {
    int input_size = 224; // square input, 112 is the reduced-resolution knob
    int input_channels = 3;
    int num_classes = 3;
    int stem_channels = 64;
    std::vector<int> block_channels = {64, 128, 256};
    std::vector<int> block_strides = {1, 2, 2};
    int num_blocks = 3;
    bool enable_gab = true;
    bool enable_self_attention = true;
    bool enable_residual = true;
    bool strict_literal_attention = false;
    double dropout_rate = 0.3;

    void validate() const;
};

struct MegaNetParams {
    MegaNetConfig config;
    std::optional<GradientAttentionParams> gab;
    ParamTensor stem_conv; // (stem_channels, input_channels, 7, 7), bias-free
    BatchNormParams stem_bn;
    std::vector<ResidualAttentionParams> blocks;
    ParamTensor fc_w; // (K, C_last, 1, 1)
    ParamTensor fc_b; // (1, K, 1, 1)

    // Stable order; defines the checkpoint manifest layout.
    std::vector<ParamTensor*> all_params();
    std::vector<ParamTensor*> trainable_params();
};

// Deterministic initialization: Kaiming-uniform convs, BN gamma=1 beta=0,
// attention gamma=0, Xavier-uniform FC. All values land on the f32 grid.
MegaNetParams build_meganet(const MegaNetConfig& config, uint64_t seed);

// Optional record of (stage, shape) pairs for shape-contract tests.
using ForwardTrace = std::vector<std::pair<std::string, Shape>>;

// Records the full pipeline on the tape and returns the probability output
// of shape (B, K, 1, 1). Training mode needs an RNG for dropout and updates
// BN running statistics; eval runs without either side effect.
Var meganet_forward(Tape& t, MegaNetParams& params, Var x, Mode mode, Rng& rng,
                    ForwardTrace* trace = nullptr);

// Convenience inference wrapper (records and discards a tape).
Tensor meganet_infer(MegaNetParams& params, const Tensor& x, Mode mode,
                     Rng* rng = nullptr);

// Checkpoint directory: manifest.json + weights.bin (little-endian f32 in
// manifest order) + config.json.
void save_checkpoint(MegaNetParams& params, const std::string& dir);
MegaNetParams load_checkpoint(const std::string& dir);

nlohmann::json config_to_json(const MegaNetConfig& c);
MegaNetConfig config_from_json(const nlohmann::json& j);

} // namespace meg
