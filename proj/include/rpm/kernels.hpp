#pragma once

#include <cstddef>

// Low-level data-parallel kernels. Every kernel has two backends selected at
// runtime: Reference (plain serial loops, kept as the correctness baseline)
// and Parallel (OpenMP). Both compute each output element with the same
// per-element accumulation order, so results agree to rounding regardless of
// thread count; tests compare the backends and tools/bench_kernels.cpp
// measures the speedup.
namespace rpm::kernels {

enum class Backend { Reference, Parallel };

Backend backend();
void set_backend(Backend b);

// Scoped backend override for tests.
class BackendGuard {
public:
    explicit BackendGuard(Backend b) : prev_(backend()) { set_backend(b); }
    ~BackendGuard() { set_backend(prev_); }

private:
    Backend prev_;
};

// C[M,N] (+)= A[M,K] * B[K,N], row-major, leading dims = row strides.
void gemm_nn(int M, int N, int K, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate);
// C[M,N] (+)= A^T * B with A stored [K,M].
void gemm_tn(int M, int N, int K, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate);
// C[M,N] (+)= A * B^T with B stored [N,K].
void gemm_nt(int M, int N, int K, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate);

// Lowers conv windows of img[C,H,W] into col[C*kh*kw, Ho*Wo].
void im2col(const double* img, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* col);
// Adjoint of im2col: accumulates col[C*kh*kw, Ho*Wo] back into img[C,H,W].
// Gather formulation: each image element sums its contributions in a fixed
// order, so the parallel backend is race-free and deterministic.
void col2im(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* img, bool accumulate);

// Batched convolution driver: x[N,Ci,H,W], w[Co,Ci,kh,kw], b[Co] (may be null),
// y[N,Co,Ho,Wo].
void conv2d_forward(const double* x, int N, int Ci, int H, int W,
                    const double* w, int Co, int kh, int kw, int stride, int pad,
                    const double* b, double* y);
void conv2d_backward_input(const double* dy, int N, int Ci, int H, int W,
                           const double* w, int Co, int kh, int kw, int stride, int pad,
                           double* dx_accum);
void conv2d_backward_params(const double* dy, const double* x, int N, int Ci, int H, int W,
                            int Co, int kh, int kw, int stride, int pad,
                            double* dw_accum, double* db_accum);

// Transposed convolution: x[N,Ci,H,W], w[Ci,Co,kh,kw], y[N,Co,Ho,Wo] with
// Ho = (H-1)*stride - 2*pad + kh.
void convt2d_forward(const double* x, int N, int Ci, int H, int W,
                     const double* w, int Co, int kh, int kw, int stride, int pad,
                     const double* b, double* y);
void convt2d_backward_input(const double* dy, int N, int Ci, int H, int W,
                            const double* w, int Co, int kh, int kw, int stride, int pad,
                            double* dx_accum);
void convt2d_backward_params(const double* dy, const double* x, int N, int Ci, int H, int W,
                             int Co, int kh, int kw, int stride, int pad,
                             double* dw_accum, double* db_accum);

// Group batch-norm statistics: x[N,C,HW] with N divisible by group; one
// (mean, var) pair per (group, channel). var is the population variance.
void bn_group_stats(const double* x, int N, int C, int HW, int group,
                    double* mean, double* var);
// Per-channel stats over the whole batch (used for running averages).
void bn_batch_stats(const double* x, int N, int C, int HW, double* mean, double* var);
// y = gamma[c] * (x - mean[g,c]) * invstd[g,c] + beta[c]
void bn_apply(const double* x, int N, int C, int HW, int group,
              const double* mean, const double* invstd,
              const double* gamma, const double* beta, double* y);
// Backward pass for group batch-norm; accumulates into dgamma/dbeta.
void bn_backward(const double* x, const double* dy, int N, int C, int HW, int group,
                 const double* mean, const double* invstd, const double* gamma,
                 double* dx, double* dgamma_accum, double* dbeta_accum);

int conv_out_dim(int in, int k, int stride, int pad);
int convt_out_dim(int in, int k, int stride, int pad);

}  // namespace rpm::kernels
