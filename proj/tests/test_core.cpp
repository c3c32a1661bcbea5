#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "rpm/graph.hpp"
#include "rpm/kernels.hpp"
#include "rpm/nn.hpp"
#include "rpm/rng.hpp"
#include "rpm/smallmat.hpp"
#include "rpm/tensor.hpp"

using namespace rpm;
using ad::Graph;
using ad::Param;
using ad::Var;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.gauss();
    return t;
}

// Central finite differences of a scalar-valued rebuildable function with
// respect to one Param. The function must rebuild its graph from scratch.
double max_rel_fd_error(Param& p, const std::function<double()>& value,
                        const std::function<void()>& compute_grad, double h = 1e-6) {
    compute_grad();
    Tensor analytic = p.grad;
    double max_err = 0.0;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double orig = p.value[i];
        p.value[i] = orig + h;
        const double fp = value();
        p.value[i] = orig - h;
        const double fm = value();
        p.value[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max({1e-7, std::abs(fd), std::abs(analytic[i])});
        max_err = std::max(max_err, std::abs(fd - analytic[i]) / denom);
    }
    return max_err;
}

}  // namespace

TEST_CASE("rng determinism and stream derivation") {
    Rng a = Rng::derive(42, "test", 7);
    Rng b = Rng::derive(42, "test", 7);
    Rng c = Rng::derive(42, "test", 8);
    bool all_eq = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const double va = a.uniform();
        all_eq = all_eq && va == b.uniform();
        any_diff = any_diff || va != c.uniform();
    }
    CHECK(all_eq);
    CHECK(any_diff);
}

TEST_CASE("rng gauss moments") {
    Rng rng(123);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.gauss();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("rng state save/load round trip") {
    Rng a(99);
    for (int i = 0; i < 7; ++i) a.gauss();  // leaves a cached value half the time
    auto st = a.save_state();
    Rng b;
    b.load_state(st);
    for (int i = 0; i < 50; ++i) CHECK(a.gauss() == b.gauss());
}

TEST_CASE("gemm backends agree") {
    Rng rng(1);
    const int M = 17, N = 23, K = 31;
    Tensor A = random_tensor({M, K}, rng);
    Tensor B = random_tensor({K, N}, rng);
    Tensor Bt = random_tensor({N, K}, rng);
    Tensor At = random_tensor({K, M}, rng);

    Tensor c_ref({M, N}), c_par({M, N});
    {
        kernels::BackendGuard g(kernels::Backend::Reference);
        kernels::gemm_nn(M, N, K, A.data(), K, B.data(), N, c_ref.data(), N, false);
    }
    {
        kernels::BackendGuard g(kernels::Backend::Parallel);
        kernels::gemm_nn(M, N, K, A.data(), K, B.data(), N, c_par.data(), N, false);
    }
    CHECK(max_abs_diff(c_ref, c_par) < 1e-12);

    {
        kernels::BackendGuard g(kernels::Backend::Reference);
        kernels::gemm_nt(M, N, K, A.data(), K, Bt.data(), K, c_ref.data(), N, false);
    }
    {
        kernels::BackendGuard g(kernels::Backend::Parallel);
        kernels::gemm_nt(M, N, K, A.data(), K, Bt.data(), K, c_par.data(), N, false);
    }
    CHECK(max_abs_diff(c_ref, c_par) < 1e-12);

    {
        kernels::BackendGuard g(kernels::Backend::Reference);
        kernels::gemm_tn(M, N, K, At.data(), M, B.data(), N, c_ref.data(), N, false);
    }
    {
        kernels::BackendGuard g(kernels::Backend::Parallel);
        kernels::gemm_tn(M, N, K, At.data(), M, B.data(), N, c_par.data(), N, false);
    }
    CHECK(max_abs_diff(c_ref, c_par) < 1e-12);
}

TEST_CASE("gemm against naive oracle") {
    Rng rng(2);
    const int M = 5, N = 7, K = 9;
    Tensor A = random_tensor({M, K}, rng);
    Tensor B = random_tensor({K, N}, rng);
    Tensor C({M, N});
    kernels::gemm_nn(M, N, K, A.data(), K, B.data(), N, C.data(), N, false);
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double s = 0;
            for (int k = 0; k < K; ++k) s += A.at2(i, k) * B.at2(k, j);
            CHECK(C.at2(i, j) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("conv2d forward matches direct convolution") {
    Rng rng(3);
    const int N = 2, Ci = 3, H = 6, W = 5, Co = 4, k = 3, stride = 2, pad = 1;
    Tensor x = random_tensor({N, Ci, H, W}, rng);
    Tensor w = random_tensor({Co, Ci, k, k}, rng);
    Tensor b = random_tensor({Co}, rng);
    const int Ho = kernels::conv_out_dim(H, k, stride, pad);
    const int Wo = kernels::conv_out_dim(W, k, stride, pad);
    Tensor y({N, Co, Ho, Wo});
    kernels::conv2d_forward(x.data(), N, Ci, H, W, w.data(), Co, k, k, stride, pad, b.data(),
                            y.data());
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double s = b[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ki = 0; ki < k; ++ki)
                            for (int kj = 0; kj < k; ++kj) {
                                const int ih = oh * stride - pad + ki;
                                const int iw = ow * stride - pad + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                s += x[((static_cast<std::size_t>(n) * Ci + ci) * H + ih) * W + iw] *
                                     w[((static_cast<std::size_t>(co) * Ci + ci) * k + ki) * k + kj];
                            }
                    const double got = y[((static_cast<std::size_t>(n) * Co + co) * Ho + oh) * Wo + ow];
                    CHECK(got == doctest::Approx(s).epsilon(1e-12));
                }
}

TEST_CASE("conv backends agree on forward and backward") {
    Rng rng(4);
    const int N = 3, Ci = 4, H = 8, W = 8, Co = 5, k = 4, stride = 2, pad = 1;
    Tensor x = random_tensor({N, Ci, H, W}, rng);
    Tensor w = random_tensor({Co, Ci, k, k}, rng);
    const int Ho = kernels::conv_out_dim(H, k, stride, pad);
    const int Wo = kernels::conv_out_dim(W, k, stride, pad);
    Tensor dy = random_tensor({N, Co, Ho, Wo}, rng);

    Tensor y1({N, Co, Ho, Wo}), y2({N, Co, Ho, Wo});
    Tensor dx1({N, Ci, H, W}), dx2({N, Ci, H, W});
    Tensor dw1({Co, Ci, k, k}), dw2({Co, Ci, k, k});
    Tensor db1({Co}), db2({Co});
    {
        kernels::BackendGuard g(kernels::Backend::Reference);
        kernels::conv2d_forward(x.data(), N, Ci, H, W, w.data(), Co, k, k, stride, pad, nullptr, y1.data());
        kernels::conv2d_backward_input(dy.data(), N, Ci, H, W, w.data(), Co, k, k, stride, pad, dx1.data());
        kernels::conv2d_backward_params(dy.data(), x.data(), N, Ci, H, W, Co, k, k, stride, pad, dw1.data(), db1.data());
    }
    {
        kernels::BackendGuard g(kernels::Backend::Parallel);
        kernels::conv2d_forward(x.data(), N, Ci, H, W, w.data(), Co, k, k, stride, pad, nullptr, y2.data());
        kernels::conv2d_backward_input(dy.data(), N, Ci, H, W, w.data(), Co, k, k, stride, pad, dx2.data());
        kernels::conv2d_backward_params(dy.data(), x.data(), N, Ci, H, W, Co, k, k, stride, pad, dw2.data(), db2.data());
    }
    CHECK(max_abs_diff(y1, y2) < 1e-12);
    CHECK(max_abs_diff(dx1, dx2) < 1e-12);
    CHECK(max_abs_diff(dw1, dw2) < 1e-12);
    CHECK(max_abs_diff(db1, db2) < 1e-12);
}

TEST_CASE("graph: elementwise and reduction gradients vs finite differences") {
    Rng rng(5);
    Param p("p", random_tensor({4, 3}, rng, 0.5));
    auto value = [&]() {
        Graph g;
        Var x = g.param(p);
        Var y = g.sum(g.mul(g.tanh_(x), g.exp_(g.mul_scalar(x, 0.3))));
        return g.scalar_val(y);
    };
    auto grad = [&]() {
        p.zero_grad();
        Graph g;
        Var x = g.param(p);
        Var y = g.sum(g.mul(g.tanh_(x), g.exp_(g.mul_scalar(x, 0.3))));
        g.backward(y);
    };
    CHECK(max_rel_fd_error(p, value, grad) < 1e-6);
}

TEST_CASE("graph: matmul gradients") {
    Rng rng(6);
    Param a("a", random_tensor({3, 4}, rng));
    Param b("b", random_tensor({4, 2}, rng));
    auto value = [&]() {
        Graph g;
        Var m = g.matmul(g.param(a), g.param(b));
        return g.scalar_val(g.sum(g.square(m)));
    };
    auto grad = [&]() {
        a.zero_grad();
        b.zero_grad();
        Graph g;
        Var m = g.matmul(g.param(a), g.param(b));
        g.backward(g.sum(g.square(m)));
    };
    CHECK(max_rel_fd_error(a, value, grad) < 1e-6);
    CHECK(max_rel_fd_error(b, value, grad) < 1e-6);
}

TEST_CASE("graph: slice/concat/select/pack gradients") {
    Rng rng(7);
    Param p("p", random_tensor({6, 4}, rng));
    auto build = [&](Graph& g) {
        Var x = g.param(p);
        Var top = g.slice0(x, 0, 3);
        Var bot = g.slice0(x, 3, 6);
        Var cat = g.concat0({bot, top});
        Var col = g.select_col(cat, 2);
        Var mid = g.slice_axis(x, 6, 4, 1, 1, 3);
        std::vector<Var> sc{g.dot(col, col), g.sum(mid)};
        return g.sum(g.pack_scalars(sc));
    };
    auto value = [&]() {
        Graph g;
        return g.scalar_val(build(g));
    };
    auto grad = [&]() {
        p.zero_grad();
        Graph g;
        g.backward(build(g));
    };
    CHECK(max_rel_fd_error(p, value, grad) < 1e-6);
}

TEST_CASE("graph: scalar broadcast gradients") {
    Rng rng(8);
    Param a("a", random_tensor({5}, rng));
    Param s("s", Tensor::scalar(0.7));
    auto build = [&](Graph& g) {
        Var x = g.param(a);
        Var sc = g.param(s);
        Var y = g.add_bscalar(g.scale_div(g.scale(x, sc), g.add_scalar(sc, 1.0)), sc);
        return g.sum(g.square(y));
    };
    auto value = [&]() {
        Graph g;
        return g.scalar_val(build(g));
    };
    auto grad = [&]() {
        a.zero_grad();
        s.zero_grad();
        Graph g;
        g.backward(build(g));
    };
    CHECK(max_rel_fd_error(a, value, grad) < 1e-6);
    CHECK(max_rel_fd_error(s, value, grad) < 1e-6);
}

TEST_CASE("graph: cholesky and trisolve gradients vs finite differences") {
    Rng rng(9);
    const int n = 5;
    Tensor m = random_tensor({n, n}, rng);
    Tensor a({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = i == j ? n : 0.0;
            for (int k = 0; k < n; ++k) s += m.at2(i, k) * m.at2(j, k);
            a.at2(i, j) = s;
        }
    Param pa("a", a);
    Param pb("b", random_tensor({n, 2}, rng));
    auto build = [&](Graph& g) {
        Var av = g.param(pa);
        Var l = g.cholesky(av);
        Var x = g.trisolve_lower(l, g.param(pb));
        return g.add(g.sum(g.square(x)), g.sum(l));
    };
    auto value = [&]() {
        Graph g;
        return g.scalar_val(build(g));
    };
    auto grad = [&]() {
        pa.zero_grad();
        pb.zero_grad();
        Graph g;
        g.backward(build(g));
    };
    CHECK(max_rel_fd_error(pa, value, grad, 1e-5) < 1e-5);
    CHECK(max_rel_fd_error(pb, value, grad) < 1e-6);
}

TEST_CASE("graph: conv2d / conv_transpose2d / batchnorm gradients") {
    Rng rng(10);
    nn::ParamStore ps;
    nn::Conv2d conv(ps, "conv", 2, 3, 3, 2, 1);
    nn::ConvTranspose2d deconv(ps, "deconv", 3, 2, 4, 2, 1);
    nn::BatchNorm2d bn(ps, "bn", 3);
    Rng init(11);
    ps.init_params(init);
    for (auto* p : ps.params())
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 0.3 * init.gauss();

    Tensor x = random_tensor({4, 2, 6, 6}, rng);
    // The side tap keeps the conv bias observable: batch norm alone would
    // cancel it exactly and the finite-difference quotient would be noise.
    auto build = [&](Graph& g) {
        Var xv = g.constant(x);
        Var h = conv.apply(g, xv);
        Var tap = g.mul_scalar(g.sum(g.tanh_(h)), 0.05);
        h = bn.apply(g, h, 2, true);
        h = g.relu_(h);
        h = deconv.apply(g, h);
        return g.add(g.sum(g.square(h)), tap);
    };
    auto value = [&]() {
        Graph g;
        return g.scalar_val(build(g));
    };
    auto grad = [&]() {
        ps.zero_grad();
        Graph g;
        g.backward(build(g));
    };
    for (auto* p : ps.params()) {
        CAPTURE(p->name);
        CHECK(max_rel_fd_error(*p, value, grad, 1e-5) < 2e-5);
    }
}

TEST_CASE("graph: pairwise_sqdist and assemble_cell_locations gradients") {
    Rng rng(12);
    Param rows("rows", random_tensor({2, 3, 2, 3}, rng));
    Param cols("cols", random_tensor({2, 3, 2, 3}, rng));
    auto build = [&](Graph& g) {
        Var loc = g.assemble_cell_locations(g.param(rows), g.param(cols));
        Var d = g.pairwise_sqdist(loc, g.slice0(loc, 0, 4));
        return g.sum(g.exp_(g.mul_scalar(d, -0.1)));
    };
    auto value = [&]() {
        Graph g;
        return g.scalar_val(build(g));
    };
    auto grad = [&]() {
        rows.zero_grad();
        cols.zero_grad();
        Graph g;
        g.backward(build(g));
    };
    CHECK(max_rel_fd_error(rows, value, grad) < 1e-5);
    CHECK(max_rel_fd_error(cols, value, grad) < 1e-5);
}

TEST_CASE("graph: mean_pool_groups respects mask and gradients") {
    Rng rng(13);
    Param p("p", random_tensor({6, 3}, rng));
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 1, 0};
    auto build = [&](Graph& g) {
        Var pooled = g.mean_pool_groups(g.param(p), 3, mask);
        return g.sum(g.square(pooled));
    };
    {
        Graph g;
        Var pooled = g.mean_pool_groups(g.param(p), 3, mask);
        CHECK(g.val(pooled).dim(0) == 2);
        CHECK(g.val(pooled).at2(0, 0) ==
              doctest::Approx(0.5 * (p.value.at2(0, 0) + p.value.at2(2, 0))));
    }
    auto value = [&]() {
        Graph g;
        return g.scalar_val(build(g));
    };
    auto grad = [&]() {
        p.zero_grad();
        Graph g;
        g.backward(build(g));
    };
    CHECK(max_rel_fd_error(p, value, grad) < 1e-6);
}

TEST_CASE("batchnorm eval mode uses running stats") {
    nn::ParamStore ps;
    nn::BatchNorm2d bn(ps, "bn", 2);
    Rng init(1);
    ps.init_params(init);
    bn.run->mean[0] = 0.5;
    bn.run->mean[1] = -0.25;
    bn.run->var[0] = 4.0;
    bn.run->var[1] = 1.0;
    Rng rng(2);
    Tensor x = random_tensor({3, 2, 2, 2}, rng);
    Graph g(false);
    Var y = bn.apply(g, g.constant(x), 3, false);
    const double expect = (x[0] - 0.5) / std::sqrt(4.0 + 1e-5);
    CHECK(g.val(y)[0] == doctest::Approx(expect).epsilon(1e-9));
}
