#include "rpm/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "rpm/common.hpp"

namespace rpm::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::Parallel};

// Tiny workloads stay on the serial path: the fork/join cost of an OpenMP
// region dwarfs the loop body below roughly a million flops.
constexpr double kParallelFlopCutoff = 1e6;

bool parallel(double flops) {
    return flops >= kParallelFlopCutoff &&
           g_backend.load(std::memory_order_relaxed) == Backend::Parallel;
}
}  // namespace

Backend backend() { return g_backend.load(std::memory_order_relaxed); }
void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }

int conv_out_dim(int in, int k, int stride, int pad) {
    const int out = (in + 2 * pad - k) / stride + 1;
    if (out <= 0) throw ContractError("conv output dimension is not positive");
    return out;
}

int convt_out_dim(int in, int k, int stride, int pad) {
    const int out = (in - 1) * stride - 2 * pad + k;
    if (out <= 0) throw ContractError("transposed conv output dimension is not positive");
    return out;
}

// ---------------------------------------------------------------------------
// GEMM. One inner routine per layout; each output element accumulates over k
// in ascending order in both backends.
// ---------------------------------------------------------------------------

namespace {

inline void gemm_nn_row(int i, int N, int K, const double* A, int lda, const double* B, int ldb,
                        double* C, int ldc, bool accumulate) {
    double* c = C + static_cast<std::size_t>(i) * ldc;
    if (!accumulate) std::fill(c, c + N, 0.0);
    const double* a = A + static_cast<std::size_t>(i) * lda;
    for (int k = 0; k < K; ++k) {
        const double av = a[k];
        const double* b = B + static_cast<std::size_t>(k) * ldb;
        for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
}

inline void gemm_tn_row(int i, int N, int K, const double* A, int lda, const double* B, int ldb,
                        double* C, int ldc, bool accumulate) {
    double* c = C + static_cast<std::size_t>(i) * ldc;
    if (!accumulate) std::fill(c, c + N, 0.0);
    for (int k = 0; k < K; ++k) {
        const double av = A[static_cast<std::size_t>(k) * lda + i];
        const double* b = B + static_cast<std::size_t>(k) * ldb;
        for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
}

inline void gemm_nt_row(int i, int N, int K, const double* A, int lda, const double* B, int ldb,
                        double* C, int ldc, bool accumulate) {
    double* c = C + static_cast<std::size_t>(i) * ldc;
    const double* a = A + static_cast<std::size_t>(i) * lda;
    int j = 0;
    // Four independent dot products per pass share the a[k] loads; each
    // output element still accumulates in ascending k order.
    for (; j + 4 <= N; j += 4) {
        const double* b0 = B + static_cast<std::size_t>(j) * ldb;
        const double* b1 = b0 + ldb;
        const double* b2 = b1 + ldb;
        const double* b3 = b2 + ldb;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            s0 += av * b0[k];
            s1 += av * b1[k];
            s2 += av * b2[k];
            s3 += av * b3[k];
        }
        c[j] = accumulate ? c[j] + s0 : s0;
        c[j + 1] = accumulate ? c[j + 1] + s1 : s1;
        c[j + 2] = accumulate ? c[j + 2] + s2 : s2;
        c[j + 3] = accumulate ? c[j + 3] + s3 : s3;
    }
    for (; j < N; ++j) {
        const double* b = B + static_cast<std::size_t>(j) * ldb;
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += a[k] * b[k];
        c[j] = accumulate ? c[j] + acc : acc;
    }
}

}  // namespace

void gemm_nn(int M, int N, int K, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate) {
    if (parallel(2.0 * M * N * K)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < M; ++i) gemm_nn_row(i, N, K, A, lda, B, ldb, C, ldc, accumulate);
    } else {
        for (int i = 0; i < M; ++i) gemm_nn_row(i, N, K, A, lda, B, ldb, C, ldc, accumulate);
    }
}

void gemm_tn(int M, int N, int K, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate) {
    if (parallel(2.0 * M * N * K)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < M; ++i) gemm_tn_row(i, N, K, A, lda, B, ldb, C, ldc, accumulate);
    } else {
        for (int i = 0; i < M; ++i) gemm_tn_row(i, N, K, A, lda, B, ldb, C, ldc, accumulate);
    }
}

void gemm_nt(int M, int N, int K, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate) {
    if (parallel(2.0 * M * N * K)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < M; ++i) gemm_nt_row(i, N, K, A, lda, B, ldb, C, ldc, accumulate);
    } else {
        for (int i = 0; i < M; ++i) gemm_nt_row(i, N, K, A, lda, B, ldb, C, ldc, accumulate);
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

void im2col(const double* img, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* col) {
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* dst = col + ((static_cast<std::size_t>(c) * kh + ki) * kw + kj) * out_plane;
                const double* src = img + static_cast<std::size_t>(c) * plane;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        dst[static_cast<std::size_t>(oh) * Wo + ow] =
                            (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                ? src[static_cast<std::size_t>(ih) * W + iw]
                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* img, bool accumulate) {
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
    // Gather per image element: iterate the kernel offsets that could have
    // produced this element and sum in fixed (ki, kj) order.
    auto gather_channel = [&](int c) {
        double* dst = img + static_cast<std::size_t>(c) * plane;
        for (int ih = 0; ih < H; ++ih) {
            for (int iw = 0; iw < W; ++iw) {
                double acc = accumulate ? dst[static_cast<std::size_t>(ih) * W + iw] : 0.0;
                for (int ki = 0; ki < kh; ++ki) {
                    const int oh_num = ih + pad - ki;
                    if (oh_num < 0 || oh_num % stride != 0) continue;
                    const int oh = oh_num / stride;
                    if (oh >= Ho) continue;
                    for (int kj = 0; kj < kw; ++kj) {
                        const int ow_num = iw + pad - kj;
                        if (ow_num < 0 || ow_num % stride != 0) continue;
                        const int ow = ow_num / stride;
                        if (ow >= Wo) continue;
                        acc += col[((static_cast<std::size_t>(c) * kh + ki) * kw + kj) * out_plane +
                                   static_cast<std::size_t>(oh) * Wo + ow];
                    }
                }
                dst[static_cast<std::size_t>(ih) * W + iw] = acc;
            }
        }
    };
    if (parallel(2.0 * C * H * W * kh * kw)) {
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) gather_channel(c);
    } else {
        for (int c = 0; c < C; ++c) gather_channel(c);
    }
}

// ---------------------------------------------------------------------------
// Convolution drivers
// ---------------------------------------------------------------------------

void conv2d_forward(const double* x, int N, int Ci, int H, int W,
                    const double* w, int Co, int kh, int kw, int stride, int pad,
                    const double* b, double* y) {
    const int Ho = conv_out_dim(H, kh, stride, pad);
    const int Wo = conv_out_dim(W, kw, stride, pad);
    const std::size_t in_sz = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t out_sz = static_cast<std::size_t>(Co) * Ho * Wo;
    const std::size_t col_rows = static_cast<std::size_t>(Ci) * kh * kw;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;

    auto run_sample = [&](int n, std::vector<double>& col) {
        im2col(x + n * in_sz, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        double* yn = y + n * out_sz;
        // y_n[Co, Ho*Wo] = w[Co, col_rows] * col
        for (int i = 0; i < Co; ++i)
            gemm_nn_row(i, static_cast<int>(out_plane), static_cast<int>(col_rows),
                        w, static_cast<int>(col_rows), col.data(), static_cast<int>(out_plane),
                        yn, static_cast<int>(out_plane), false);
        if (b) {
            for (int c = 0; c < Co; ++c) {
                double* p = yn + static_cast<std::size_t>(c) * out_plane;
                const double bv = b[c];
                for (std::size_t k = 0; k < out_plane; ++k) p[k] += bv;
            }
        }
    };

    if (parallel(2.0 * N * col_rows * out_plane)) {
#pragma omp parallel
        {
            std::vector<double> col(col_rows * out_plane);
#pragma omp for schedule(static)
            for (int n = 0; n < N; ++n) run_sample(n, col);
        }
    } else {
        std::vector<double> col(col_rows * out_plane);
        for (int n = 0; n < N; ++n) run_sample(n, col);
    }
}

void conv2d_backward_input(const double* dy, int N, int Ci, int H, int W,
                           const double* w, int Co, int kh, int kw, int stride, int pad,
                           double* dx_accum) {
    const int Ho = conv_out_dim(H, kh, stride, pad);
    const int Wo = conv_out_dim(W, kw, stride, pad);
    const std::size_t in_sz = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t out_sz = static_cast<std::size_t>(Co) * Ho * Wo;
    const std::size_t col_rows = static_cast<std::size_t>(Ci) * kh * kw;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;

    auto run_sample = [&](int n, std::vector<double>& col) {
        // col = w^T[col_rows, Co] * dy_n[Co, out_plane]
        const double* dyn = dy + n * out_sz;
        for (int i = 0; i < static_cast<int>(col_rows); ++i)
            gemm_tn_row(i, static_cast<int>(out_plane), Co, w, static_cast<int>(col_rows),
                        dyn, static_cast<int>(out_plane), col.data(),
                        static_cast<int>(out_plane), false);
        // Inline serial col2im: dx slices are disjoint across n, so the
        // sample loop carries the parallelism.
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        double* dst0 = dx_accum + n * in_sz;
        for (int c = 0; c < Ci; ++c) {
            double* dst = dst0 + static_cast<std::size_t>(c) * plane;
            for (int ih = 0; ih < H; ++ih) {
                for (int iw = 0; iw < W; ++iw) {
                    double acc = dst[static_cast<std::size_t>(ih) * W + iw];
                    for (int ki = 0; ki < kh; ++ki) {
                        const int oh_num = ih + pad - ki;
                        if (oh_num < 0 || oh_num % stride != 0) continue;
                        const int oh = oh_num / stride;
                        if (oh >= Ho) continue;
                        for (int kj = 0; kj < kw; ++kj) {
                            const int ow_num = iw + pad - kj;
                            if (ow_num < 0 || ow_num % stride != 0) continue;
                            const int ow = ow_num / stride;
                            if (ow >= Wo) continue;
                            acc += col[((static_cast<std::size_t>(c) * kh + ki) * kw + kj) * out_plane +
                                       static_cast<std::size_t>(oh) * Wo + ow];
                        }
                    }
                    dst[static_cast<std::size_t>(ih) * W + iw] = acc;
                }
            }
        }
    };

    if (parallel(2.0 * N * col_rows * out_plane)) {
#pragma omp parallel
        {
            std::vector<double> col(col_rows * out_plane);
#pragma omp for schedule(static)
            for (int n = 0; n < N; ++n) run_sample(n, col);
        }
    } else {
        std::vector<double> col(col_rows * out_plane);
        for (int n = 0; n < N; ++n) run_sample(n, col);
    }
}

void conv2d_backward_params(const double* dy, const double* x, int N, int Ci, int H, int W,
                            int Co, int kh, int kw, int stride, int pad,
                            double* dw_accum, double* db_accum) {
    const int Ho = conv_out_dim(H, kh, stride, pad);
    const int Wo = conv_out_dim(W, kw, stride, pad);
    const std::size_t in_sz = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t out_sz = static_cast<std::size_t>(Co) * Ho * Wo;
    const std::size_t col_rows = static_cast<std::size_t>(Ci) * kh * kw;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;

    std::vector<double> col(col_rows * out_plane);
    // Samples accumulate in ascending order; the gemm is parallel across
    // output rows, so the per-element order is n-major and deterministic.
    for (int n = 0; n < N; ++n) {
        im2col(x + n * in_sz, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        const double* dyn = dy + n * out_sz;
        // dw[Co, col_rows] += dy_n[Co, out_plane] * col^T[out_plane, col_rows]
        gemm_nt(Co, static_cast<int>(col_rows), static_cast<int>(out_plane),
                dyn, static_cast<int>(out_plane), col.data(), static_cast<int>(out_plane),
                dw_accum, static_cast<int>(col_rows), true);
        if (db_accum) {
            for (int c = 0; c < Co; ++c) {
                const double* p = dyn + static_cast<std::size_t>(c) * out_plane;
                double acc = 0.0;
                for (std::size_t k = 0; k < out_plane; ++k) acc += p[k];
                db_accum[c] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Transposed convolution: y geometry is the conv "input" side.
// ---------------------------------------------------------------------------

void convt2d_forward(const double* x, int N, int Ci, int H, int W,
                     const double* w, int Co, int kh, int kw, int stride, int pad,
                     const double* b, double* y) {
    const int Ho = convt_out_dim(H, kh, stride, pad);
    const int Wo = convt_out_dim(W, kw, stride, pad);
    const std::size_t in_sz = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t out_sz = static_cast<std::size_t>(Co) * Ho * Wo;
    const std::size_t col_rows = static_cast<std::size_t>(Co) * kh * kw;
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;

    auto run_sample = [&](int n, std::vector<double>& col) {
        const double* xn = x + n * in_sz;
        // col[col_rows, H*W] = w^T[col_rows, Ci] * x_n[Ci, H*W]
        gemm_tn(static_cast<int>(col_rows), static_cast<int>(in_plane), Ci,
                w, static_cast<int>(col_rows), xn, static_cast<int>(in_plane),
                col.data(), static_cast<int>(in_plane), false);
        double* yn = y + n * out_sz;
        std::fill(yn, yn + out_sz, 0.0);
        col2im(col.data(), Co, Ho, Wo, kh, kw, stride, pad, H, W, yn, true);
        if (b) {
            for (int c = 0; c < Co; ++c) {
                double* p = yn + static_cast<std::size_t>(c) * (static_cast<std::size_t>(Ho) * Wo);
                const double bv = b[c];
                for (std::size_t k = 0; k < static_cast<std::size_t>(Ho) * Wo; ++k) p[k] += bv;
            }
        }
    };

    // col2im itself may parallelize over channels; parallelizing over samples
    // here would nest regions, so samples run sequentially in both backends.
    std::vector<double> col(col_rows * in_plane);
    for (int n = 0; n < N; ++n) run_sample(n, col);
}

void convt2d_backward_input(const double* dy, int N, int Ci, int H, int W,
                            const double* w, int Co, int kh, int kw, int stride, int pad,
                            double* dx_accum) {
    const int Ho = convt_out_dim(H, kh, stride, pad);
    const int Wo = convt_out_dim(W, kw, stride, pad);
    const std::size_t in_sz = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t out_sz = static_cast<std::size_t>(Co) * Ho * Wo;
    const std::size_t col_rows = static_cast<std::size_t>(Co) * kh * kw;
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;

    auto run_sample = [&](int n, std::vector<double>& col) {
        im2col(dy + n * out_sz, Co, Ho, Wo, kh, kw, stride, pad, H, W, col.data());
        // dx_n[Ci, H*W] += w[Ci, col_rows] * col
        double* dxn = dx_accum + n * in_sz;
        for (int i = 0; i < Ci; ++i)
            gemm_nn_row(i, static_cast<int>(in_plane), static_cast<int>(col_rows),
                        w, static_cast<int>(col_rows), col.data(), static_cast<int>(in_plane),
                        dxn, static_cast<int>(in_plane), true);
    };

    if (parallel(2.0 * N * col_rows * in_plane)) {
#pragma omp parallel
        {
            std::vector<double> col(col_rows * in_plane);
#pragma omp for schedule(static)
            for (int n = 0; n < N; ++n) run_sample(n, col);
        }
    } else {
        std::vector<double> col(col_rows * in_plane);
        for (int n = 0; n < N; ++n) run_sample(n, col);
    }
}

void convt2d_backward_params(const double* dy, const double* x, int N, int Ci, int H, int W,
                             int Co, int kh, int kw, int stride, int pad,
                             double* dw_accum, double* db_accum) {
    const int Ho = convt_out_dim(H, kh, stride, pad);
    const int Wo = convt_out_dim(W, kw, stride, pad);
    const std::size_t in_sz = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t out_sz = static_cast<std::size_t>(Co) * Ho * Wo;
    const std::size_t col_rows = static_cast<std::size_t>(Co) * kh * kw;
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;

    std::vector<double> col(col_rows * in_plane);
    for (int n = 0; n < N; ++n) {
        im2col(dy + n * out_sz, Co, Ho, Wo, kh, kw, stride, pad, H, W, col.data());
        // dw[Ci, col_rows] += x_n[Ci, H*W] * col^T
        gemm_nt(Ci, static_cast<int>(col_rows), static_cast<int>(in_plane),
                x + n * in_sz, static_cast<int>(in_plane), col.data(),
                static_cast<int>(in_plane), dw_accum, static_cast<int>(col_rows), true);
        if (db_accum) {
            const double* dyn = dy + n * out_sz;
            for (int c = 0; c < Co; ++c) {
                const double* p = dyn + static_cast<std::size_t>(c) * (static_cast<std::size_t>(Ho) * Wo);
                double acc = 0.0;
                for (std::size_t k = 0; k < static_cast<std::size_t>(Ho) * Wo; ++k) acc += p[k];
                db_accum[c] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

void bn_group_stats(const double* x, int N, int C, int HW, int group,
                    double* mean, double* var) {
    if (group <= 0 || N % group != 0) throw ContractError("bn group must divide batch");
    const int num_groups = N / group;
    const std::size_t sample_sz = static_cast<std::size_t>(C) * HW;
    const double inv_m = 1.0 / (static_cast<double>(group) * HW);

    auto stat_one = [&](int gc) {
        const int g = gc / C;
        const int c = gc % C;
        double s = 0.0;
        for (int n = g * group; n < (g + 1) * group; ++n) {
            const double* p = x + n * sample_sz + static_cast<std::size_t>(c) * HW;
            for (int k = 0; k < HW; ++k) s += p[k];
        }
        const double mu = s * inv_m;
        double v = 0.0;
        for (int n = g * group; n < (g + 1) * group; ++n) {
            const double* p = x + n * sample_sz + static_cast<std::size_t>(c) * HW;
            for (int k = 0; k < HW; ++k) {
                const double d = p[k] - mu;
                v += d * d;
            }
        }
        mean[gc] = mu;
        var[gc] = v * inv_m;
    };

    const int total = num_groups * C;
    if (parallel(2.0 * N * C * HW)) {
#pragma omp parallel for schedule(static)
        for (int gc = 0; gc < total; ++gc) stat_one(gc);
    } else {
        for (int gc = 0; gc < total; ++gc) stat_one(gc);
    }
}

void bn_batch_stats(const double* x, int N, int C, int HW, double* mean, double* var) {
    bn_group_stats(x, N, C, HW, N, mean, var);
}

void bn_apply(const double* x, int N, int C, int HW, int group,
              const double* mean, const double* invstd,
              const double* gamma, const double* beta, double* y) {
    const std::size_t sample_sz = static_cast<std::size_t>(C) * HW;
    auto apply_sample = [&](int n) {
        const int g = n / group;
        for (int c = 0; c < C; ++c) {
            const double mu = mean[g * C + c];
            const double is = invstd[g * C + c];
            const double ga = gamma[c];
            const double be = beta[c];
            const double* p = x + n * sample_sz + static_cast<std::size_t>(c) * HW;
            double* q = y + n * sample_sz + static_cast<std::size_t>(c) * HW;
            for (int k = 0; k < HW; ++k) q[k] = ga * ((p[k] - mu) * is) + be;
        }
    };
    if (parallel(2.0 * N * C * HW)) {
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) apply_sample(n);
    } else {
        for (int n = 0; n < N; ++n) apply_sample(n);
    }
}

void bn_backward(const double* x, const double* dy, int N, int C, int HW, int group,
                 const double* mean, const double* invstd, const double* gamma,
                 double* dx, double* dgamma_accum, double* dbeta_accum) {
    const int num_groups = N / group;
    const std::size_t sample_sz = static_cast<std::size_t>(C) * HW;
    const double m = static_cast<double>(group) * HW;

    auto bwd_one = [&](int gc) {
        const int g = gc / C;
        const int c = gc % C;
        const double mu = mean[gc];
        const double is = invstd[gc];
        const double ga = gamma[c];
        // Reductions over the group in fixed order.
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = g * group; n < (g + 1) * group; ++n) {
            const double* px = x + n * sample_sz + static_cast<std::size_t>(c) * HW;
            const double* pd = dy + n * sample_sz + static_cast<std::size_t>(c) * HW;
            for (int k = 0; k < HW; ++k) {
                sum_dy += pd[k];
                sum_dy_xhat += pd[k] * (px[k] - mu) * is;
            }
        }
        for (int n = g * group; n < (g + 1) * group; ++n) {
            const double* px = x + n * sample_sz + static_cast<std::size_t>(c) * HW;
            const double* pd = dy + n * sample_sz + static_cast<std::size_t>(c) * HW;
            double* pq = dx + n * sample_sz + static_cast<std::size_t>(c) * HW;
            for (int k = 0; k < HW; ++k) {
                const double xhat = (px[k] - mu) * is;
                pq[k] += ga * is * (pd[k] - sum_dy / m - xhat * sum_dy_xhat / m);
            }
        }
        return std::pair<double, double>{sum_dy_xhat, sum_dy};
    };

    const int total = num_groups * C;
    std::vector<double> part_dg(static_cast<std::size_t>(total));
    std::vector<double> part_db(static_cast<std::size_t>(total));
    if (parallel(4.0 * N * C * HW)) {
#pragma omp parallel for schedule(static)
        for (int gc = 0; gc < total; ++gc) {
            auto [dg, db] = bwd_one(gc);
            part_dg[gc] = dg;
            part_db[gc] = db;
        }
    } else {
        for (int gc = 0; gc < total; ++gc) {
            auto [dg, db] = bwd_one(gc);
            part_dg[gc] = dg;
            part_db[gc] = db;
        }
    }
    // dgamma/dbeta reduced over groups in ascending order.
    for (int g = 0; g < num_groups; ++g) {
        for (int c = 0; c < C; ++c) {
            dgamma_accum[c] += part_dg[static_cast<std::size_t>(g) * C + c];
            dbeta_accum[c] += part_db[static_cast<std::size_t>(g) * C + c];
        }
    }
}

}  // namespace rpm::kernels
