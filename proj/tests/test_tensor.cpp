#include <catch2/catch_amalgamated.hpp>

#include "fbs/tensor.hpp"
#include "support/test_helpers.hpp"

using fbs::ChannelMask;
using fbs::Tensor;

TEST_CASE("zeros builds the requested shape filled with zeros") {
    const Tensor t = Tensor::zeros({1, 2, 2, 2});
    REQUIRE(t.size() == 8);
    REQUIRE(t.l1_norm() == 0.0);

    const Tensor v = Tensor::zeros({3});
    REQUIRE(v.size() == 3);
    REQUIRE(v.rank() == 1);

    REQUIRE_THROWS_AS(Tensor::zeros({1, 0, 1, 1}), fbs::ShapeError);
    REQUIRE_THROWS_AS(Tensor::zeros({-2}), fbs::ShapeError);
    REQUIRE_THROWS_AS(Tensor::zeros({}), fbs::ShapeError);
}

TEST_CASE("flat index round trip") {
    const Tensor t = Tensor::zeros({3, 4, 5, 6});
    int64_t expected = 0;
    for (int64_t n = 0; n < 3; ++n) {
        for (int64_t c = 0; c < 4; ++c) {
            for (int64_t h = 0; h < 5; ++h) {
                for (int64_t w = 0; w < 6; ++w) {
                    REQUIRE(t.flat(n, c, h, w) == expected);
                    ++expected;
                }
            }
        }
    }
}

TEST_CASE("channel_slice copies the requested plane") {
    Tensor x = Tensor::zeros({2, 3, 2, 2});
    x.at(0, 1, 0, 0) = 7.0;
    const Tensor s = channel_slice(x, 0, 1);
    REQUIRE(s.shape() == std::vector<int64_t>{2, 2});
    REQUIRE(s[0] == 7.0);

    const Tensor tiny = Tensor::zeros({1, 1, 1, 1});
    REQUIRE(channel_slice(tiny, 0, 0).size() == 1);

    REQUIRE_THROWS_AS(channel_slice(x, 0, 3), fbs::ShapeError);
    REQUIRE_THROWS_AS(channel_slice(x, 2, 0), fbs::ShapeError);
}

TEST_CASE("apply_mask zeroes suppressed channels and keeps active ones bit-identical") {
    fbs::Rng rng(7);
    const Tensor x = fbstest::random_tensor({2, 4, 3, 3}, rng);

    SECTION("full mask is the identity") {
        const ChannelMask full = ChannelMask::full(2, 4);
        REQUIRE(fbstest::bits_equal(apply_mask(x, full), x));
        REQUIRE(full.is_full());
    }

    SECTION("empty active set zeroes everything") {
        const ChannelMask empty(4, {{}, {}});
        REQUIRE(apply_mask(x, empty).l1_norm() == 0.0);
    }

    SECTION("selected channels survive unchanged, the rest are exactly zero") {
        const ChannelMask m(4, {{1, 3}, {1, 3}});
        const Tensor y = apply_mask(x, m);
        for (int64_t n = 0; n < 2; ++n) {
            for (int64_t c = 0; c < 4; ++c) {
                for (int64_t h = 0; h < 3; ++h) {
                    for (int64_t w = 0; w < 3; ++w) {
                        const double expect = (c == 1 || c == 3) ? x.at(n, c, h, w) : 0.0;
                        REQUIRE(fbstest::bits_equal(y.at(n, c, h, w), expect));
                    }
                }
            }
        }
    }

    SECTION("idempotent") {
        const ChannelMask m(4, {{0, 2}, {3}});
        const Tensor once = apply_mask(x, m);
        REQUIRE(fbstest::bits_equal(apply_mask(once, m), once));
    }

    SECTION("channel count mismatch is rejected") {
        REQUIRE_THROWS_AS(apply_mask(x, ChannelMask::full(2, 5)), fbs::ShapeError);
    }
}

TEST_CASE("mask invariants are validated") {
    REQUIRE_THROWS_AS(ChannelMask(4, {{1, 1}}), fbs::ShapeError);
    REQUIRE_THROWS_AS(ChannelMask(4, {{2, 1}}), fbs::ShapeError);
    REQUIRE_THROWS_AS(ChannelMask(4, {{0, 4}}), fbs::ShapeError);
    REQUIRE_NOTHROW(ChannelMask(4, {{0, 1, 2, 3}}));
}
