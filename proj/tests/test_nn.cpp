#include "doctest.h"

#include <cmath>

#include "rpm/nn.hpp"

using namespace rpm;

TEST_CASE("param store keeps registration order and rejects duplicates") {
    nn::ParamStore ps;
    ps.add("a.w", {2, 3});
    ps.add("b.w", {4});
    ps.add("c.b", {4});
    CHECK_THROWS_AS(ps.add("a.w", {1}), ContractError);
    auto params = ps.params();
    REQUIRE(params.size() == 3);
    CHECK(params[0]->name == "a.w");
    CHECK(params[1]->name == "b.w");
    CHECK(params[2]->name == "c.b");
    CHECK(ps.total_size() == 2 * 3 + 4 + 4);
    CHECK_THROWS_AS(ps.get("missing"), ContractError);
}

TEST_CASE("initialization conventions per parameter kind") {
    nn::ParamStore ps;
    nn::Conv2d conv(ps, "conv", 3, 8, 4, 2, 1, /*bias=*/true);
    nn::ConvTranspose2d deconv(ps, "deconv", 8, 4, 4, 2, 1, /*bias=*/true);
    nn::BatchNorm2d bn(ps, "bn", 8);
    ps.add("kernel.output_scale.log", {1});
    Rng rng(1);
    ps.init_params(rng);

    // Conv weights: fan-in = 3*4*4 = 48 -> |w| <= 1/sqrt(48).
    const double conv_bound = 1.0 / std::sqrt(48.0);
    bool conv_nonzero = false;
    for (std::size_t i = 0; i < conv.w->value.numel(); ++i) {
        CHECK(std::abs(conv.w->value[i]) <= conv_bound);
        conv_nonzero = conv_nonzero || conv.w->value[i] != 0.0;
    }
    CHECK(conv_nonzero);
    // Transposed conv weights are [in, out, k, k]: fan-in = 8*4*4 = 128.
    const double deconv_bound = 1.0 / std::sqrt(128.0);
    for (std::size_t i = 0; i < deconv.w->value.numel(); ++i)
        CHECK(std::abs(deconv.w->value[i]) <= deconv_bound);
    // Biases zero, batch-norm scale one / shift zero, log hyperparams zero.
    for (std::size_t i = 0; i < conv.b->value.numel(); ++i) CHECK(conv.b->value[i] == 0.0);
    for (std::size_t i = 0; i < bn.gamma->value.numel(); ++i) CHECK(bn.gamma->value[i] == 1.0);
    for (std::size_t i = 0; i < bn.beta->value.numel(); ++i) CHECK(bn.beta->value[i] == 0.0);
    CHECK(ps.get("kernel.output_scale.log").value[0] == 0.0);
    // Running stats start at the identity transform.
    CHECK(bn.run->mean[0] == 0.0);
    CHECK(bn.run->var[0] == 1.0);
}

TEST_CASE("zero_grad clears accumulated gradients") {
    nn::ParamStore ps;
    nn::Linear fc(ps, "fc", 3, 2);
    Rng rng(2);
    ps.init_params(rng);
    ad::Graph g;
    Tensor x({4, 3});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.gauss();
    g.backward(g.sum(g.square(fc.apply(g, g.constant(x)))));
    double gn = 0;
    for (std::size_t i = 0; i < fc.w->grad.numel(); ++i) gn += std::abs(fc.w->grad[i]);
    CHECK(gn > 0.0);
    ps.zero_grad();
    gn = 0;
    for (std::size_t i = 0; i < fc.w->grad.numel(); ++i) gn += std::abs(fc.w->grad[i]);
    CHECK(gn == 0.0);
}
