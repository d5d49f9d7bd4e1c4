#include "meg/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace meg {

namespace {

void check_apex_range(int total_frames, int apex) {
    if (total_frames < 1)
        throw ShapeError("coefficients: need at least one frame, got " +
                         std::to_string(total_frames));
    if (apex < 1 || apex > total_frames)
        throw ApexError("apex " + std::to_string(apex) + " outside [1," +
                        std::to_string(total_frames) + "]");
}

// Shared accumulation loop so the two encoders are bit-identical whenever
// their coefficients agree.
MestiImage pool_frames(const FrameSequence& seq, const std::vector<int>& alphas,
                       int apex, const char* encoder_name) {
    if (seq.frames.empty())
        throw ShapeError("encode: empty frame sequence");
    const ImageF& first = seq.frames.front();
    for (const ImageF& f : seq.frames)
        if (!f.same_dims(first))
            throw ShapeError("encode: frame dimensions differ within clip '" +
                             seq.clip_id + "'");

    MestiImage out;
    out.raw = ImageF(first.h, first.w, first.c);
    for (size_t t = 0; t < seq.frames.size(); ++t) {
        const double a = double(alphas[t]);
        if (a == 0.0) continue;
        const auto& src = seq.frames[t].data;
        for (size_t p = 0; p < src.size(); ++p) out.raw.data[p] += a * src[p];
    }
    out.view = normalize_view(out.raw);
    out.meta.t = seq.frame_count();
    out.meta.a = apex;
    out.meta.clip_id = seq.clip_id;
    out.meta.encoder = encoder_name;
    return out;
}

} // namespace

CoefficientVector compute_alpha(int total_frames, int apex) {
    check_apex_range(total_frames, apex);
    CoefficientVector cv;
    cv.apex = apex;
    cv.length = total_frames;
    cv.alphas.resize(size_t(total_frames));
    for (int t = 1; t <= total_frames; ++t)
        cv.alphas[size_t(t - 1)] = t <= apex
                                       ? 2 * t - apex - 1
                                       : total_frames - 2 * t + apex + 1;
    return cv;
}

std::vector<int> alpha_oracle(int total_frames, int apex) {
    check_apex_range(total_frames, apex);
    std::vector<int> alpha(size_t(total_frames), 0);

    // At d = 0 every frame score S(.|d) = <d, psi> is zero, so each pairwise
    // hinge max{0, 1 - S(better) + S(worse)} evaluates to 1 and is active,
    // and the quadratic regularizer's gradient lambda*d vanishes. Each
    // ordered pair therefore contributes psi(better) - psi(worse) to the
    // pooled direction, i.e. +1/-1 to the per-frame coefficients.
    const double score = 0.0; // S(t|0) for every t
    const bool hinge_active = 1.0 - score + score > 0.0;

    // Rising segment [1, a]: frames later in time are closer to the apex.
    for (int t = 1; t <= apex; ++t)
        for (int q = t + 1; q <= apex; ++q)
            if (hinge_active) {
                alpha[size_t(q - 1)] += 1;
                alpha[size_t(t - 1)] -= 1;
            }
    // Falling segment (a, T]: frames earlier in time are closer to the apex.
    for (int t = apex + 1; t <= total_frames; ++t)
        for (int q = t + 1; q <= total_frames; ++q)
            if (hinge_active) {
                alpha[size_t(t - 1)] += 1;
                alpha[size_t(q - 1)] -= 1;
            }
    return alpha;
}

int resolve_apex(const FrameSequence& seq) {
    if (seq.apex_index) return *seq.apex_index;
    return (seq.frame_count() + 1) / 2; // ceil(T/2)
}

ImageU8 normalize_view(const ImageF& raw) {
    ImageU8 view(raw.h, raw.w, raw.c);
    if (raw.data.empty()) return view;
    const auto [mn_it, mx_it] = std::minmax_element(raw.data.begin(), raw.data.end());
    const double mn = *mn_it, mx = *mx_it;
    if (mx == mn) {
        std::fill(view.data.begin(), view.data.end(), uint8_t(128));
        return view;
    }
    const double scale = 255.0 / (mx - mn);
    for (size_t p = 0; p < raw.data.size(); ++p)
        view.data[p] = uint8_t(std::lround((raw.data[p] - mn) * scale));
    return view;
}

MestiImage encode_mesti(const FrameSequence& seq) {
    if (seq.frames.empty())
        throw ShapeError("encode_mesti: empty frame sequence");
    const int apex = resolve_apex(seq);
    const CoefficientVector cv = compute_alpha(seq.frame_count(), apex);
    return pool_frames(seq, cv.alphas, apex, "mesti");
}

MestiImage encode_dynamic_image(const FrameSequence& seq) {
    if (seq.frames.empty())
        throw ShapeError("encode_dynamic_image: empty frame sequence");
    const int T = seq.frame_count();
    std::vector<int> alphas(size_t(T), 0);
    for (int t = 1; t <= T; ++t) alphas[size_t(t - 1)] = 2 * t - T - 1;
    return pool_frames(seq, alphas, resolve_apex(seq), "dynamic");
}

} // namespace meg
