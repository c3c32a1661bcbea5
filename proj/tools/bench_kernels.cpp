// Throughput comparison of the Reference (serial) and Parallel (OpenMP)
// kernel backends on the shapes the model actually runs.
#include <chrono>
#include <cstdio>
#include <vector>

#include "rpm/kernels.hpp"
#include "rpm/rng.hpp"
#include "rpm/tensor.hpp"

using namespace rpm;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename F>
double time_best_of(F&& fn, int reps) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = Clock::now();
        fn();
        best = std::min(best, seconds_since(t0));
    }
    return best;
}

struct Case {
    const char* name;
    double gflop;
    std::function<void()> run;
};

}  // namespace

int main() {
    Rng rng(1);
    auto rand_vec = [&](std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.gauss();
        return v;
    };

    // GEMM at the conv-lowering shape of the 64x64 content encoder's second
    // layer: [32, 512] x [512, 256].
    const int M = 32, K = 512, N = 256;
    auto a = rand_vec(static_cast<std::size_t>(M) * K);
    auto b = rand_vec(static_cast<std::size_t>(K) * N);
    std::vector<double> c(static_cast<std::size_t>(M) * N);

    // Batched convolution: 16 cells through conv2 of the content encoder.
    const int Bn = 16, Ci = 32, H = 32, W = 32, Co = 32, kk = 4;
    auto x = rand_vec(static_cast<std::size_t>(Bn) * Ci * H * W);
    auto w = rand_vec(static_cast<std::size_t>(Co) * Ci * kk * kk);
    const int Ho = kernels::conv_out_dim(H, kk, 2, 1);
    std::vector<double> y(static_cast<std::size_t>(Bn) * Co * Ho * Ho);
    std::vector<double> dy = rand_vec(y.size());
    std::vector<double> dx(x.size());
    std::vector<double> dw(w.size()), db(Co);

    std::vector<Case> cases;
    cases.push_back({"gemm_nn 32x512x256 (x40)", 40 * 2.0 * M * K * N / 1e9, [&] {
                         for (int i = 0; i < 40; ++i)
                             kernels::gemm_nn(M, N, K, a.data(), K, b.data(), N, c.data(), N,
                                              false);
                     }});
    cases.push_back({"conv2d fwd 16x32x32x32", 2.0 * Bn * Co * Ho * Ho * Ci * kk * kk / 1e9, [&] {
                         kernels::conv2d_forward(x.data(), Bn, Ci, H, W, w.data(), Co, kk, kk, 2,
                                                 1, nullptr, y.data());
                     }});
    cases.push_back({"conv2d bwd-input", 2.0 * Bn * Co * Ho * Ho * Ci * kk * kk / 1e9, [&] {
                         std::fill(dx.begin(), dx.end(), 0.0);
                         kernels::conv2d_backward_input(dy.data(), Bn, Ci, H, W, w.data(), Co, kk,
                                                        kk, 2, 1, dx.data());
                     }});
    cases.push_back({"conv2d bwd-params", 2.0 * Bn * Co * Ho * Ho * Ci * kk * kk / 1e9, [&] {
                         std::fill(dw.begin(), dw.end(), 0.0);
                         std::fill(db.begin(), db.end(), 0.0);
                         kernels::conv2d_backward_params(dy.data(), x.data(), Bn, Ci, H, W, Co, kk,
                                                         kk, 2, 1, dw.data(), db.data());
                     }});

    std::printf("%-28s %12s %12s %8s\n", "kernel", "serial", "parallel", "speedup");
    for (auto& cs : cases) {
        double ts, tp;
        {
            kernels::BackendGuard g(kernels::Backend::Reference);
            ts = time_best_of(cs.run, 3);
        }
        {
            kernels::BackendGuard g(kernels::Backend::Parallel);
            tp = time_best_of(cs.run, 3);
        }
        std::printf("%-28s %9.1f ms %9.1f ms %7.2fx   (%.2f -> %.2f GFLOP/s)\n", cs.name,
                    ts * 1e3, tp * 1e3, ts / tp, cs.gflop / ts, cs.gflop / tp);
    }
    return 0;
}
