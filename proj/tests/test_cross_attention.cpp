#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numeric>

#include "core/cross_attention.hpp"
#include "doctest.h"
#include "testing.hpp"

using namespace poseidon;
using ptest::check_gradients;

namespace {

CrossAttention make(int64_t channels, uint64_t seed = 3) {
    Rng rng(seed);
    CrossAttnConfig cfg;
    cfg.heads = 2;
    return CrossAttention(channels, cfg, rng);
}

void set_identity(Tensor w) {
    w.fill_(0.0);
    const int64_t n = w.shape()[0];
    for (int64_t i = 0; i < n; ++i) w.data()[i * n + i] = 1.0;
}

}  // namespace

TEST_CASE("single context token: attention weight 1 and value pass-through") {
    CrossAttention ca = make(4);
    set_identity(ca.cross_attn.wv);
    set_identity(ca.cross_attn.wo);
    ca.capture_attention(true);

    Rng rng(7);
    Tensor center = Tensor::rand_uniform({1, 3, 4}, rng, -1.0, 1.0);
    Tensor ctx = Tensor::rand_uniform({1, 1, 4}, rng, -1.0, 1.0);
    NoGradGuard ng;
    // raw attention component: with Wv = Wo = I the weighted value sum of a
    // single context token is that token, for every query
    Tensor attn_out = ca.cross_attn.forward(center, ctx);
    for (int64_t q = 0; q < 3; ++q) {
        for (int64_t c = 0; c < 4; ++c) {
            CHECK(attn_out.at({0, q, c}) == doctest::Approx(ctx.at({0, 0, c})).epsilon(1e-12));
        }
    }
    const Tensor& alpha = ca.last_alpha();
    REQUIRE(alpha.defined());
    for (int64_t i = 0; i < alpha.numel(); ++i) CHECK(alpha.data()[i] == doctest::Approx(1.0));

    // the full update wraps it in residual + layernorm
    Tensor updated = ca.cross_attend(center, ctx);
    Tensor expect = layernorm(add(center, attn_out), Tensor::ones({4}), Tensor::zeros({4}));
    for (int64_t i = 0; i < updated.numel(); ++i) {
        CHECK(updated.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-10));
    }
}

TEST_CASE("identical context tokens: uniform attention, identical outputs") {
    CrossAttention ca = make(4, 11);
    ca.capture_attention(true);
    Rng rng(13);
    Tensor center = Tensor::rand_uniform({1, 4, 4}, rng, -1.0, 1.0);
    Tensor token = Tensor::rand_uniform({1, 1, 4}, rng, -1.0, 1.0);
    Tensor ctx = concat({token, token, token, token, token}, 1);
    NoGradGuard ng;
    Tensor out = ca.cross_attn.forward(center, ctx);
    const Tensor& alpha = ca.last_alpha();
    for (int64_t i = 0; i < alpha.numel(); ++i) {
        CHECK(alpha.data()[i] == doctest::Approx(0.2).epsilon(1e-9));
    }
    // all queries see the same value sum
    for (int64_t q = 1; q < 4; ++q) {
        for (int64_t c = 0; c < 4; ++c) {
            CHECK(out.at({0, q, c}) == doctest::Approx(out.at({0, 0, c})).epsilon(1e-12));
        }
    }
    // and it equals the attention of a single copy of the token
    Tensor out1 = ca.cross_attn.forward(center, token);
    for (int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(out1.data()[i]).epsilon(1e-10));
    }
}

TEST_CASE("attention rows sum to 1") {
    CrossAttention ca = make(8, 17);
    ca.capture_attention(true);
    Rng rng(19);
    Tensor center = Tensor::rand_uniform({2, 5, 8}, rng, -2.0, 2.0);
    Tensor ctx = Tensor::rand_uniform({2, 7, 8}, rng, -2.0, 2.0);
    NoGradGuard ng;
    (void)ca.cross_attend(center, ctx);
    const Tensor& a = ca.last_alpha();
    const int64_t cols = a.size(-1);
    const int64_t rows = a.numel() / cols;
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            const double v = a.data()[r * cols + c];
            CHECK(v > 0.0);
            CHECK(v < 1.0 + 1e-12);
            s += v;
        }
        CHECK(std::fabs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("context self-attention is permutation equivariant") {
    CrossAttention ca = make(4, 23);
    Rng rng(29);
    Tensor ctx = Tensor::rand_uniform({1, 6, 4}, rng, -1.0, 1.0);
    NoGradGuard ng;
    Tensor out = ca.context_self_attention(ctx);

    std::vector<int64_t> perm{3, 0, 5, 1, 4, 2};
    Tensor permuted(Shape{1, 6, 4});
    for (int64_t t = 0; t < 6; ++t) {
        for (int64_t c = 0; c < 4; ++c) {
            permuted.data()[t * 4 + c] = ctx.data()[perm[static_cast<size_t>(t)] * 4 + c];
        }
    }
    Tensor out_p = ca.context_self_attention(permuted);
    for (int64_t t = 0; t < 6; ++t) {
        for (int64_t c = 0; c < 4; ++c) {
            CHECK(out_p.at({0, t, c}) ==
                  doctest::Approx(out.at({0, perm[static_cast<size_t>(t)], c})).epsilon(1e-12));
        }
    }
}

TEST_CASE("joint key/value permutation leaves cross attention unchanged") {
    CrossAttention ca = make(4, 31);
    Rng rng(37);
    Tensor center = Tensor::rand_uniform({1, 4, 4}, rng, -1.0, 1.0);
    Tensor ctx = Tensor::rand_uniform({1, 8, 4}, rng, -1.0, 1.0);
    NoGradGuard ng;
    Tensor out = ca.cross_attend(center, ctx);

    std::vector<int64_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    Rng shuffler(41);
    shuffler.shuffle(perm);
    Tensor permuted(Shape{1, 8, 4});
    for (int64_t t = 0; t < 8; ++t) {
        for (int64_t c = 0; c < 4; ++c) {
            permuted.data()[t * 4 + c] = ctx.data()[perm[static_cast<size_t>(t)] * 4 + c];
        }
    }
    Tensor out_p = ca.cross_attend(center, permuted);
    for (int64_t i = 0; i < out.numel(); ++i) {
        CHECK(std::fabs(out.data()[i] - out_p.data()[i]) < 1e-10);
    }
}

TEST_CASE("empty context degenerates to pass-through") {
    CrossAttention ca = make(4, 43);
    Rng rng(47);
    Tensor features = Tensor::rand_uniform({2, 4, 3, 2}, rng, -1.0, 1.0);  // B=2, T=1
    NoGradGuard ng;
    Tensor out = ca.forward(features, 2, 1, 0);
    CHECK(out.shape() == Shape{2, 4, 3, 2});
    for (int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(features.data()[i]));
    }
}

TEST_CASE("window forward keeps the center shape for any T") {
    Rng rng(53);
    for (int64_t window : {1, 3, 5}) {
        CrossAttention ca = make(4, 57 + static_cast<uint64_t>(window));
        Tensor features = Tensor::rand_uniform({2 * window, 4, 3, 2}, rng, -1.0, 1.0);
        NoGradGuard ng;
        Tensor out = ca.forward(features, 2, window, window / 2);
        CHECK(out.shape() == Shape{2, 4, 3, 2});
    }
}

TEST_CASE("gradients flow through self-attention composed with cross-attention") {
    CrossAttention ca = make(4, 61);
    Rng rng(67);
    Tensor features = Tensor::rand_uniform({6, 4, 2, 2}, rng, -1.0, 1.0);  // B=2, T=3
    Tensor r = Tensor::rand_uniform({2, 4, 2, 2}, rng, -1.0, 1.0);
    std::vector<Tensor> leaves{features};
    for (auto& [name, t] : ca.named_parameters()) leaves.push_back(t);
    auto res = check_gradients(leaves, [&] { return sum(mul(ca.forward(features, 2, 3, 1), r)); },
                               1e-6, 5);
    CHECK(res.max_rel < 1e-4);
}
