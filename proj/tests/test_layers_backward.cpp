#include <catch2/catch_amalgamated.hpp>

#include "fbs/layers.hpp"
#include "support/grad_check.hpp"
#include "support/test_helpers.hpp"

using namespace fbs;
using fbstest::check_gradient;
using fbstest::random_tensor;
using fbstest::SigHash;

namespace {

// Scalar objective: weighted sum of the op output against fixed weights, so
// the full Jacobian action is exercised.
double weighted_sum(const Tensor& out, const Tensor& w) {
    double s = 0.0;
    for (int64_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
    return s;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("relu backward") {
    Rng rng(101);
    Tensor z = random_tensor({2, 3, 4, 4}, rng);
    const Tensor w = random_tensor(z.shape(), rng);

    SECTION("gradient passes upstream where input is positive") {
        const Tensor dz = relu_backward(z, w);
        for (int64_t i = 0; i < z.size(); ++i) {
            REQUIRE(dz[i] == (z[i] > 0.0 ? w[i] : 0.0));
        }
    }

    SECTION("matches finite differences away from the kink") {
        const Tensor analytic = relu_backward(z, w);
        const auto result = check_gradient(z, analytic, [&] {
            SigHash sig;
            sig.add_signs(z);
            return std::pair{weighted_sum(relu(z), w), sig.h};
        });
        REQUIRE(result.checked > 0);
        REQUIRE(result.max_rel < kTol);
    }
}

TEST_CASE("wta backward routes gradient through kept positions only") {
    const std::vector<double> z{3, 1, 4, 1, 5};
    const auto kept = wta_keep_indices(z, 2);
    REQUIRE(kept == std::vector<int64_t>{2, 4});

    Rng rng(103);
    Tensor zt = random_tensor({7}, rng);
    const Tensor w = random_tensor({7}, rng);
    const auto kept_idx = wta_keep_indices(zt.data(), 3);
    Tensor analytic = Tensor::zeros({7});
    for (int64_t i : kept_idx) analytic[i] = w[i];
    const auto result = check_gradient(zt, analytic, [&] {
        const auto kv = wta(zt.data(), 3);
        SigHash sig;
        for (int64_t i : wta_keep_indices(zt.data(), 3)) sig.add(static_cast<uint64_t>(i));
        double s = 0.0;
        for (int64_t i = 0; i < 7; ++i) s += kv[static_cast<size_t>(i)] * w[i];
        return std::pair{s, sig.h};
    });
    REQUIRE(result.checked > 0);
    REQUIRE(result.max_rel < kTol);
}

TEST_CASE("convolution backward") {
    Rng rng(107);

    SECTION("single-kernel hand case") {
        // y = sum(x .* theta) for a 3x3 kernel covering the whole input, so
        // dy/dx = theta and dy/dtheta = x.
        ConvParams p;
        p.theta = random_tensor({1, 1, 3, 3}, rng);
        const Tensor x = random_tensor({1, 1, 3, 3}, rng);
        Tensor gout = Tensor::full({1, 1, 1, 1}, 1.0);
        const auto grads = conv2d_backward(x, ChannelMask::full(1, 1), p, ChannelMask::full(1, 1),
                                           gout);
        REQUIRE(fbstest::bits_equal(grads.dx, p.theta));
        REQUIRE(fbstest::bits_equal(grads.dtheta, x));
    }

    SECTION("dense and sparse cases match finite differences") {
        for (int trial = 0; trial < 4; ++trial) {
            ConvParams p;
            p.theta = random_tensor({3, 4, 3, 3}, rng);
            p.stride = 1 + static_cast<int64_t>(rng.below(2));
            p.padding = static_cast<int64_t>(rng.below(2));
            Tensor x = random_tensor({2, 4, 5, 5}, rng);
            const ChannelMask in = trial % 2 == 0 ? ChannelMask::full(2, 4)
                                                  : fbstest::random_mask(2, 4, 2, rng);
            const ChannelMask out_mask = trial % 2 == 0 ? ChannelMask::full(2, 3)
                                                        : fbstest::random_mask(2, 3, 2, rng);
            const Tensor w = random_tensor(
                {2, 3, p.out_size(5), p.out_size(5)}, rng);
            const auto grads = conv2d_backward(x, in, p, out_mask, w);
            auto eval = [&] {
                return std::pair{weighted_sum(conv2d_sparse(x, in, p, out_mask), w), uint64_t{0}};
            };
            auto rx = check_gradient(x, grads.dx, eval);
            REQUIRE(rx.max_rel < kTol);
            auto rt = check_gradient(p.theta, grads.dtheta, eval);
            REQUIRE(rt.max_rel < kTol);
        }
    }
}

TEST_CASE("batch norm backward matches finite differences") {
    Rng rng(109);
    for (const bool use_gamma : {true, false}) {
        for (const bool masked : {false, true}) {
            Tensor z = random_tensor({3, 2, 3, 3}, rng, -2.0, 2.0);
            BnParams p = BnParams::make(2);
            p.gamma[0] = 1.3;
            p.gamma[1] = 0.7;
            p.beta[0] = 0.2;
            p.beta[1] = -0.4;
            const ChannelMask mask =
                masked ? ChannelMask(2, {{0, 1}, {0}, {1}}) : ChannelMask::full(3, 2);
            const Tensor w = random_tensor(z.shape(), rng);

            BnCache cache;
            batch_norm(z, p, true, use_gamma, &mask, &cache);
            const auto grads = batch_norm_backward(p, cache, w);

            auto eval = [&] {
                return std::pair{
                    weighted_sum(batch_norm(z, p, true, use_gamma, &mask), w), uint64_t{0}};
            };
            auto rz = check_gradient(z, grads.dz, eval);
            REQUIRE(rz.checked > 0);
            REQUIRE(rz.max_rel < kTol);
            auto rb = check_gradient(p.beta, grads.dbeta, eval);
            REQUIRE(rb.max_rel < kTol);
            if (use_gamma) {
                auto rg = check_gradient(p.gamma, grads.dgamma, eval);
                REQUIRE(rg.max_rel < kTol);
            }
        }
    }
}

TEST_CASE("subsampler backward matches finite differences for every reducer") {
    Rng rng(113);
    for (const Reducer reducer : {Reducer::L1, Reducer::L2, Reducer::Linf, Reducer::Var}) {
        Tensor x = random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
        const Tensor w = random_tensor({2, 3}, rng);
        const Tensor analytic = subsample_ss_backward(x, reducer, w);
        const auto result = check_gradient(x, analytic, [&] {
            SigHash sig;
            sig.add_signs(x);
            if (reducer == Reducer::Linf) {
                // Include the argmax positions; swapping maxima is a kink.
                for (int64_t n = 0; n < 2; ++n) {
                    for (int64_t c = 0; c < 3; ++c) {
                        const double* p = x.plane(n, c);
                        int64_t arg = 0;
                        for (int64_t i = 1; i < 16; ++i) {
                            if (std::abs(p[i]) > std::abs(p[arg])) arg = i;
                        }
                        sig.add(static_cast<uint64_t>(arg));
                    }
                }
            }
            return std::pair{weighted_sum(subsample_ss(x, reducer), w), sig.h};
        });
        REQUIRE(result.checked > 0);
        REQUIRE(result.max_rel < kTol);
    }
}

TEST_CASE("saliency predictor backward matches finite differences") {
    Rng rng(127);
    Tensor ssx = random_tensor({3, 4}, rng, 0.0, 1.0);
    SaliencyParams p;
    p.phi = random_tensor({5, 4}, rng);
    p.rho = random_tensor({5}, rng);
    const Tensor w = random_tensor({3, 5}, rng);

    SaliencyCache cache;
    saliency_g(ssx, p, &cache);
    const auto grads = saliency_g_backward(ssx, p, cache, w);

    auto eval = [&] {
        SaliencyCache c2;
        const Tensor g = saliency_g(ssx, p, &c2);
        SigHash sig;
        sig.add_signs(c2.preact);
        return std::pair{weighted_sum(g, w), sig.h};
    };
    for (auto* t : {&ssx, &p.phi, &p.rho}) {
        Tensor analytic = t == &ssx ? grads.dssx : (t == &p.phi ? grads.dphi : grads.drho);
        const auto result = check_gradient(*t, analytic, eval);
        REQUIRE(result.checked > 0);
        REQUIRE(result.max_rel < kTol);
    }
}

TEST_CASE("fully connected and pooling backward match finite differences") {
    Rng rng(131);
    Tensor x = random_tensor({3, 6}, rng);
    Tensor weight = random_tensor({4, 6}, rng);
    Tensor bias = random_tensor({4}, rng);
    const Tensor w = random_tensor({3, 4}, rng);
    const auto grads = fc_backward(x, weight, w);
    auto eval = [&] {
        return std::pair{weighted_sum(fc_forward(x, weight, bias), w), uint64_t{0}};
    };
    REQUIRE(check_gradient(x, grads.dx, eval).max_rel < kTol);
    REQUIRE(check_gradient(weight, grads.dweight, eval).max_rel < kTol);
    REQUIRE(check_gradient(bias, grads.dbias, eval).max_rel < kTol);

    Tensor feat = random_tensor({2, 3, 4, 4}, rng);
    const Tensor wp = random_tensor({2, 3}, rng);
    const Tensor dpool = global_avg_pool_backward(feat, wp);
    REQUIRE(check_gradient(feat, dpool, [&] {
                return std::pair{weighted_sum(global_avg_pool(feat), wp), uint64_t{0}};
            }).max_rel < kTol);
}

namespace {

uint64_t fbs_signature(const FbsCache& cache) {
    SigHash sig;
    sig.add_signs(cache.input);     // |.| kinks in the L1 subsampler
    sig.add_signs(cache.sal.preact);
    sig.add_signs(cache.pre_relu);
    sig.add_mask(cache.out_mask);
    return sig.h;
}

}  // namespace

TEST_CASE("gated layer backward matches finite differences") {
    Rng rng(137);
    for (int trial = 0; trial < 3; ++trial) {
        FbsConvLayer layer;
        layer.conv.theta = random_tensor({6, 3, 3, 3}, rng, -0.5, 0.5);
        layer.conv.stride = 1;
        layer.conv.padding = 1;
        layer.bn = BnParams::make(6);
        for (int64_t i = 0; i < 6; ++i) layer.bn.beta[i] = rng.uniform(-0.3, 0.3);
        layer.sal.phi = random_tensor({6, 3}, rng, -0.5, 0.5);
        layer.sal.rho = random_tensor({6}, rng, 0.8, 1.2);
        layer.sal.reducer = Reducer::L1;

        Tensor x = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0);
        const ChannelMask in = ChannelMask::full(2, 3);
        const double density = trial == 0 ? 1.0 : 0.5;
        const double lasso = trial == 2 ? 0.01 : 0.0;

        FbsCache cache;
        const FbsResult res = fbs_forward(x, in, layer, density, true, ConvRoute::Sparse, &cache);
        const Tensor w = random_tensor(res.y.shape(), rng);
        // Objective: weighted output sum plus the same Lasso term the
        // backward pass is asked to inject.
        auto objective = [&](const FbsResult& r) {
            double s = weighted_sum(r.y, w);
            if (lasso != 0.0) {
                for (int64_t i = 0; i < r.record.saliency.size(); ++i) {
                    s += lasso * r.record.saliency[i];
                }
            }
            return s;
        };
        const auto grads = fbs_backward(layer, cache, w, lasso);
        auto eval = [&] {
            FbsCache c2;
            const FbsResult r = fbs_forward(x, in, layer, density, true, ConvRoute::Sparse, &c2);
            return std::pair{objective(r), fbs_signature(c2)};
        };
        struct Item {
            Tensor* param;
            const Tensor* analytic;
        };
        const Item items[] = {{&x, &grads.dx},
                              {&layer.conv.theta, &grads.dtheta},
                              {&layer.bn.beta, &grads.dbeta},
                              {&layer.sal.phi, &grads.dphi},
                              {&layer.sal.rho, &grads.drho}};
        for (const auto& item : items) {
            const auto result = check_gradient(*item.param, *item.analytic, eval, 1e-5, 60);
            REQUIRE(result.checked > result.skipped);
            REQUIRE(result.max_rel < kTol);
        }
    }
}

TEST_CASE("plain layer backward matches finite differences") {
    Rng rng(139);
    ConvParams conv;
    conv.theta = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
    conv.padding = 1;
    BnParams bn = BnParams::make(4);
    bn.gamma[1] = 1.4;
    bn.beta[2] = -0.2;
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    const ChannelMask in = ChannelMask::full(2, 3);

    PlainConvCache cache;
    const Tensor y = plain_conv_forward(x, in, conv, bn, true, ConvRoute::Sparse, &cache);
    const Tensor w = random_tensor(y.shape(), rng);
    const auto grads = plain_conv_backward(conv, bn, cache, w);

    auto eval = [&] {
        PlainConvCache c2;
        const Tensor out = plain_conv_forward(x, in, conv, bn, true, ConvRoute::Sparse, &c2);
        SigHash sig;
        sig.add_signs(c2.pre_relu);
        return std::pair{weighted_sum(out, w), sig.h};
    };
    REQUIRE(check_gradient(x, grads.dx, eval, 1e-5, 60).max_rel < kTol);
    REQUIRE(check_gradient(conv.theta, grads.dtheta, eval, 1e-5, 60).max_rel < kTol);
    REQUIRE(check_gradient(bn.gamma, grads.dgamma, eval).max_rel < kTol);
    REQUIRE(check_gradient(bn.beta, grads.dbeta, eval).max_rel < kTol);
}
