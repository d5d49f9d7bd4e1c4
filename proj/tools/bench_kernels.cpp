// Benchmarks the production kernels against the serial reference
// implementations and reports the elementwise agreement alongside timings.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "meg/kernels.hpp"

using namespace meg;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const std::vector<real>& a, const std::vector<real>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void row(const char* name, double ref_ms, double fast_ms, double diff) {
    std::printf("%-28s %10.3f %10.3f %9.2fx %12.3e\n", name, ref_ms, fast_ms,
                ref_ms / fast_ms, diff);
}

} // namespace

int main() {
    Rng rng(42);
    std::printf("%-28s %10s %10s %10s %12s\n", "kernel", "ref ms", "fast ms",
                "speedup", "max |diff|");

    // conv2d forward at the three network block shapes
    struct ConvCase {
        const char* name;
        Shape x, w;
        int stride, pad, reps;
    };
    const ConvCase conv_cases[] = {
        {"conv 7x7 s2 (stem)", {4, 3, 112, 112}, {64, 3, 7, 7}, 2, 3, 3},
        {"conv 3x3 s1 (block1)", {4, 64, 28, 28}, {64, 64, 3, 3}, 1, 1, 3},
        {"conv 3x3 s2 (block2)", {4, 64, 28, 28}, {128, 64, 3, 3}, 2, 1, 3},
    };
    for (const auto& c : conv_cases) {
        Tensor x = Tensor::uniform(c.x, rng, -1.0, 1.0);
        Tensor w = Tensor::uniform(c.w, rng, -0.5, 0.5);
        Tensor y_ref, y_fast;
        const double ms_ref = time_ms(
            [&]() { ref::conv2d_forward(x, w, nullptr, c.stride, c.pad, y_ref); },
            c.reps);
        const double ms_fast = time_ms(
            [&]() { kern::conv2d_forward(x, w, nullptr, c.stride, c.pad, y_fast); },
            c.reps);
        row(c.name, ms_ref, ms_fast, max_abs_diff(y_ref.v, y_fast.v));
    }

    // gemm at the attention shapes
    struct GemmCase {
        const char* name;
        int m, n, k, reps;
    };
    const GemmCase gemm_cases[] = {
        {"gemm QtK (784x784x8)", 784, 784, 8, 10},
        {"gemm VEt (64x784x784)", 64, 784, 784, 10},
        {"gemm square 256", 256, 256, 256, 10},
    };
    for (const auto& g : gemm_cases) {
        std::vector<real> a(size_t(g.m) * g.k), b(size_t(g.k) * g.n);
        std::vector<real> c_ref(size_t(g.m) * g.n, 0.0), c_fast(c_ref);
        for (auto& v : a) v = rng.uniform(-1.0, 1.0);
        for (auto& v : b) v = rng.uniform(-1.0, 1.0);
        const double ms_ref = time_ms(
            [&]() {
                ref::gemm(Trans::N, Trans::N, g.m, g.n, g.k, a.data(), b.data(),
                          c_ref.data(), false);
            },
            g.reps);
        const double ms_fast = time_ms(
            [&]() {
                kern::gemm(Trans::N, Trans::N, g.m, g.n, g.k, a.data(), b.data(),
                           c_fast.data(), false);
            },
            g.reps);
        row(g.name, ms_ref, ms_fast, max_abs_diff(c_ref, c_fast));
    }

    // pooling and batch statistics
    {
        Tensor x = Tensor::uniform({4, 64, 56, 56}, rng, -1.0, 1.0);
        Tensor y_ref, y_fast;
        std::vector<int64_t> am_ref, am_fast;
        const double ms_ref = time_ms(
            [&]() { ref::maxpool2d_forward(x, 3, 2, 1, y_ref, am_ref); }, 10);
        const double ms_fast = time_ms(
            [&]() { kern::maxpool2d_forward(x, 3, 2, 1, y_fast, am_fast); }, 10);
        row("maxpool 3x3 s2", ms_ref, ms_fast, max_abs_diff(y_ref.v, y_fast.v));

        std::vector<real> m_ref, v_ref, m_fast, v_fast;
        const double sm_ref =
            time_ms([&]() { ref::channel_mean_var(x, m_ref, v_ref); }, 10);
        const double sm_fast =
            time_ms([&]() { kern::channel_mean_var(x, m_fast, v_fast); }, 10);
        row("bn channel stats", sm_ref, sm_fast,
            std::max(max_abs_diff(m_ref, m_fast), max_abs_diff(v_ref, v_fast)));
    }
    return 0;
}
