#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "core/afw.hpp"
#include "doctest.h"
#include "testing.hpp"

using namespace poseidon;
using ptest::check_gradients;

TEST_CASE("zero weights give zero scores; identical frames give identical scores") {
    Rng rng(3);
    FrameWeighting afw(8, rng);
    afw.find_parameter("conv.weight").fill_(0.0);
    afw.find_parameter("conv.bias").fill_(0.0);
    afw.find_parameter("score.weight").fill_(0.0);
    afw.find_parameter("score.bias").fill_(0.0);
    Tensor f = Tensor::rand_uniform({6, 8, 4, 4}, rng, -1.0, 1.0);
    Tensor s = afw.quality_score(f, 2, 3);
    CHECK(s.shape() == Shape{2, 3});
    for (int64_t i = 0; i < 6; ++i) CHECK(s.data()[i] == doctest::Approx(0.0));

    Rng rng2(5);
    FrameWeighting afw2(8, rng2);
    Tensor frame = Tensor::rand_uniform({1, 8, 4, 4}, rng2, -1.0, 1.0);
    Tensor batch = concat({frame, frame, frame}, 0);
    Tensor s2 = afw2.quality_score(batch, 1, 3);
    CHECK(s2.data()[0] == doctest::Approx(s2.data()[1]).epsilon(1e-14));
    CHECK(s2.data()[1] == doctest::Approx(s2.data()[2]).epsilon(1e-14));
}

TEST_CASE("quality score gradients") {
    Rng rng(7);
    FrameWeighting afw(8, rng);
    Tensor f = Tensor::rand_uniform({4, 8, 4, 4}, rng, -1.0, 1.0);
    Tensor r = Tensor::rand_uniform({2, 2}, rng, -1.0, 1.0);
    std::vector<Tensor> leaves{f};
    for (auto& [name, t] : afw.named_parameters()) leaves.push_back(t);
    auto res = check_gradients(leaves, [&] { return sum(mul(afw.quality_score(f, 2, 2), r)); },
                               1e-6, 8);
    CHECK(res.max_rel < 1e-4);
}

TEST_CASE("equal scores give uniform weights") {
    Rng rng(11);
    FrameWeighting afw(4, rng);
    Tensor f = Tensor::rand_uniform({5, 4, 2, 2}, rng, -1.0, 1.0);
    Tensor s = Tensor::full({1, 5}, 0.37);
    auto [weighted, fw] = afw.weigh(f, s);
    for (int64_t t = 0; t < 5; ++t) CHECK(fw.weights.data()[t] == doctest::Approx(0.2).epsilon(1e-12));
    // weighted features are the originals scaled by 1/T
    for (int64_t i = 0; i < f.numel(); ++i) {
        CHECK(weighted.data()[i] == doctest::Approx(0.2 * f.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("softmax weight of score 1 among zeros") {
    Rng rng(13);
    FrameWeighting afw(4, rng);
    Tensor f = Tensor::ones({5, 4, 2, 2});
    Tensor s = Tensor::from_vector({1, 5}, {1, 0, 0, 0, 0});
    auto [weighted, fw] = afw.weigh(f, s);
    const double e = std::exp(1.0);
    const double expect = e / (e + 4.0);  // direct softmax evaluation
    CHECK(fw.weights.data()[0] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.40463).epsilon(1e-4));
}

TEST_CASE("weights sum to 1 and are shift invariant") {
    Rng rng(17);
    FrameWeighting afw(4, rng);
    for (int seed = 0; seed < 20; ++seed) {
        Rng r2(100 + seed);
        Tensor s = Tensor::rand_uniform({3, 5}, r2, -30.0, 30.0);
        Tensor f = Tensor::rand_uniform({15, 4, 2, 2}, r2, -1.0, 1.0);
        auto [w1, fw1] = afw.weigh(f, s);
        for (int64_t b = 0; b < 3; ++b) {
            double acc = 0.0;
            for (int64_t t = 0; t < 5; ++t) acc += fw1.weights.at({b, t});
            CHECK(std::fabs(acc - 1.0) < 1e-9);
        }
        Tensor shifted = add_scalar(s, r2.uniform(-5.0, 5.0));
        auto [w2, fw2] = afw.weigh(f, shifted);
        for (int64_t i = 0; i < fw1.weights.numel(); ++i) {
            CHECK(std::fabs(fw1.weights.data()[i] - fw2.weights.data()[i]) < 1e-9);
        }
    }
}

TEST_CASE("raising one score strictly raises its weight and lowers the rest") {
    Rng rng(19);
    FrameWeighting afw(4, rng);
    Tensor f = Tensor::ones({5, 4, 2, 2});
    for (int seed = 0; seed < 20; ++seed) {
        Rng r2(200 + seed);
        std::vector<double> base(5);
        for (double& v : base) v = r2.uniform(-2.0, 2.0);
        const int64_t bump = r2.randint(5);
        std::vector<double> raised = base;
        raised[static_cast<size_t>(bump)] += r2.uniform(0.1, 1.0);
        auto [wa, fa] = afw.weigh(f, Tensor::from_vector({1, 5}, base));
        auto [wb, fb] = afw.weigh(f, Tensor::from_vector({1, 5}, raised));
        for (int64_t t = 0; t < 5; ++t) {
            if (t == bump) {
                CHECK(fb.weights.data()[t] > fa.weights.data()[t]);
            } else {
                CHECK(fb.weights.data()[t] < fa.weights.data()[t]);
            }
        }
    }
}

TEST_CASE("weighted output is linear in the features for frozen weights") {
    Rng rng(23);
    FrameWeighting afw(4, rng);
    Tensor s = Tensor::rand_uniform({2, 3}, rng, -1.0, 1.0);
    Tensor f1 = Tensor::rand_uniform({6, 4, 2, 2}, rng, -1.0, 1.0);
    Tensor f2 = Tensor::rand_uniform({6, 4, 2, 2}, rng, -1.0, 1.0);
    auto [w1, u1] = afw.weigh(f1, s);
    auto [w2, u2] = afw.weigh(f2, s);
    auto [w12, u12] = afw.weigh(add(mul_scalar(f1, 2.0), f2), s);
    for (int64_t i = 0; i < w12.numel(); ++i) {
        CHECK(w12.data()[i] == doctest::Approx(2.0 * w1.data()[i] + w2.data()[i]).epsilon(1e-10));
    }
}

TEST_CASE("degenerate windows are rejected") {
    Rng rng(29);
    FrameWeighting afw(4, rng);
    CHECK_THROWS_AS(afw.quality_score(Tensor::zeros({4, 4, 2, 2}), 4, 0), UsageError);
    CHECK_THROWS_AS(afw.quality_score(Tensor::zeros({5, 4, 2, 2}), 2, 2), DimensionError);
}

TEST_CASE("full afw gradient check") {
    Rng rng(31);
    FrameWeighting afw(8, rng);
    Tensor f = Tensor::rand_uniform({4, 8, 3, 3}, rng, -1.0, 1.0);
    Tensor r = Tensor::rand_uniform({4, 8, 3, 3}, rng, -1.0, 1.0);
    std::vector<Tensor> leaves{f};
    for (auto& [name, t] : afw.named_parameters()) leaves.push_back(t);
    auto res = check_gradients(leaves, [&] {
        auto [weighted, fw] = afw.forward(f, 2, 2);
        return sum(mul(weighted, r));
    }, 1e-6, 8);
    CHECK(res.max_rel < 1e-4);
}
