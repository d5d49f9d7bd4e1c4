#pragma once

#include <optional>
#include <string>
#include <vector>

#include "meg/image.hpp"

namespace meg {

// One clip: ordered frames plus annotations. Frames hold intensities in
// [0,1]; apex_index is 1-based within [1, T] when present.
struct FrameSequence {
    std::vector<ImageF> frames;
    std::optional<int> apex_index;
    std::string subject_id;
    int label = -1;
    std::string clip_id;

    int frame_count() const { return int(frames.size()); }
};

// Apex-centred rank-pooling weights for a clip of length T.
struct CoefficientVector {
    std::vector<int> alphas;
    int apex = 0;
    int length = 0;
};

struct MestiImage {
    ImageF raw;   // pooled map, unnormalized
    ImageU8 view; // min-max normalized displayable image
    struct Meta {
        int t = 0;
        int a = 0;
        std::string clip_id;
        std::string encoder; // "mesti" | "dynamic"
    } meta;
};

// Closed-form piecewise coefficients:
//   alpha_t = 2t - a - 1        for 1 <= t <= a
//   alpha_t = T - 2t + a + 1    for a <  t <= T
CoefficientVector compute_alpha(int total_frames, int apex);

// Brute-force pairwise oracle: enumerates the ordered within-segment frame
// pairs ranked by apex distance and accumulates the hinge subgradient of the
// ranking objective at d = 0. Kept as a production op so tests and the
// acceptance suite can cross-check compute_alpha against it.
std::vector<int> alpha_oracle(int total_frames, int apex);

// Annotated apex when present, otherwise the middle frame ceil(T/2).
int resolve_apex(const FrameSequence& seq);

// Global (all channels jointly) affine min-max to [0,255]; an all-constant
// map becomes uniform 128.
ImageU8 normalize_view(const ImageF& raw);

// Apex-centred spatio-temporal pooling: raw(p) = sum_t alpha_t * frame_t(p),
// single pass with one accumulator image.
MestiImage encode_mesti(const FrameSequence& seq);

// Classic baseline with coefficients 2t - T - 1.
MestiImage encode_dynamic_image(const FrameSequence& seq);

} // namespace meg
