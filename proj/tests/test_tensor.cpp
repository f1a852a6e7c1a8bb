#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "core/tensor.hpp"
#include "doctest.h"
#include "testing.hpp"

using namespace poseidon;
using ptest::check_gradients;
using ptest::dot;
using ptest::rel_err;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::rand_uniform(std::move(shape), rng, lo, hi);
}

// random values kept away from the ReLU kink so finite differences are clean
Tensor random_tensor_offset(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    double* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double v = rng.uniform(0.1, 1.0);
        d[i] = rng.bernoulli(0.5) ? v : -v;
    }
    return t;
}

}  // namespace

TEST_CASE("matmul basics") {
    Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    for (int64_t i = 0; i < 4; ++i) CHECK(r.data()[i] == doctest::Approx(a.data()[i]));

    Tensor row = Tensor::from_vector({1, 2}, {1, 2});
    Tensor col = Tensor::from_vector({2, 1}, {3, 4});
    Tensor s = matmul(row, col);
    CHECK(s.numel() == 1);
    CHECK(s.item() == doctest::Approx(11.0));

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient of sum equals row sums of b") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng).set_requires_grad(true);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor loss = sum(matmul(a, b));
    loss.backward();
    // d(sum(ab))/da[i,l] = sum_j b[l,j]
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t l = 0; l < 4; ++l) {
            double row_sum = 0.0;
            for (int64_t j = 0; j < 2; ++j) row_sum += b.at({l, j});
            CHECK(a.grad_data()[i * 4 + l] == doctest::Approx(row_sum).epsilon(1e-12));
        }
    }
    auto res = check_gradients({a, b}, [&] { return sum(matmul(a, b)); });
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("matmul batched matches naive reference") {
    Rng rng(11);
    const int64_t B = 3, m = 4, k = 5, n = 2;
    Tensor a = random_tensor({B, m, k}, rng);
    Tensor b = random_tensor({B, k, n}, rng);
    Tensor c = matmul(a, b);
    for (int64_t bi = 0; bi < B; ++bi) {
        std::vector<double> av(a.data() + bi * m * k, a.data() + (bi + 1) * m * k);
        std::vector<double> bv(b.data() + bi * k * n, b.data() + (bi + 1) * k * n);
        const auto ref = ptest::naive_matmul(av, bv, m, k, n);
        for (int64_t i = 0; i < m * n; ++i) {
            CHECK(c.data()[bi * m * n + i] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-12));
        }
    }
    // broadcast: shared rhs
    Tensor b2 = random_tensor({k, n}, rng);
    Tensor c2 = matmul(a, b2);
    CHECK(c2.shape() == Shape{B, m, n});
    auto res = check_gradients({a, b2}, [&] { return sum(mul(matmul(a, b2), c2.detach())); });
    CHECK(res.max_rel < 1e-5);
}

TEST_CASE("conv2d identity and counting kernels") {
    Rng rng(3);
    Tensor x = random_tensor({1, 1, 4, 4}, rng);
    Tensor w1 = Tensor::ones({1, 1, 1, 1});
    Tensor y = conv2d(x, w1, Tensor(), 1, 0);
    for (int64_t i = 0; i < 16; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

    Tensor ones = Tensor::ones({1, 1, 4, 4});
    Tensor w9 = Tensor::ones({1, 1, 3, 3});
    Tensor z = conv2d(ones, w9, Tensor(), 1, 1);
    CHECK(z.shape() == Shape{1, 1, 4, 4});
    CHECK(z.at({0, 0, 1, 1}) == doctest::Approx(9.0));
    CHECK(z.at({0, 0, 2, 2}) == doctest::Approx(9.0));
    CHECK(z.at({0, 0, 0, 0}) == doctest::Approx(4.0));
    CHECK(z.at({0, 0, 0, 3}) == doctest::Approx(4.0));
    CHECK(z.at({0, 0, 3, 3}) == doctest::Approx(4.0));
    CHECK(z.at({0, 0, 0, 1}) == doctest::Approx(6.0));

    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({3, 5, 3, 3}), Tensor(), 1, 0),
                    DimensionError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor(), 1, 0),
                    DimensionError);
}

TEST_CASE("conv2d gradients vs finite differences") {
    Rng rng(17);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor r = random_tensor({2, 4, 3, 3}, rng);  // fixed projection
    auto loss_fn = [&] { return sum(mul(conv2d(x, w, b, 2, 1), r)); };
    auto res = check_gradients({x, w, b}, loss_fn);
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("deconv2d satisfies the conv adjoint identity") {
    Rng rng(23);
    for (int seed = 0; seed < 5; ++seed) {
        Tensor x = random_tensor({2, 3, 6, 5}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        const int64_t stride = 1 + seed % 2;
        Tensor cx = conv2d(x, w, Tensor(), stride, 1);
        Tensor y = random_tensor(cx.shape(), rng);
        Tensor dy = deconv2d(y, w, Tensor(), stride, 1,
                             /*output_padding=*/0);
        // geometry must invert exactly for the identity to make sense
        if (dy.shape() != x.shape()) continue;
        CHECK(std::fabs(dot(cx, y) - dot(x, dy)) < 1e-10);
    }
}

TEST_CASE("deconv2d stamps the kernel at the stride grid") {
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    x.data()[0] = 1.0;  // delta at (0,0)
    x.data()[3] = 1.0;  // delta at (1,1)
    Tensor w = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = deconv2d(x, w, Tensor(), 2, 0, 0);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(1));
    CHECK(y.at({0, 0, 0, 1}) == doctest::Approx(2));
    CHECK(y.at({0, 0, 1, 0}) == doctest::Approx(3));
    CHECK(y.at({0, 0, 1, 1}) == doctest::Approx(4));
    CHECK(y.at({0, 0, 2, 2}) == doctest::Approx(1));
    CHECK(y.at({0, 0, 3, 3}) == doctest::Approx(4));
    CHECK(y.at({0, 0, 0, 2}) == doctest::Approx(0));
}

TEST_CASE("deconv2d gradients vs finite differences") {
    Rng rng(29);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 4, 4}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor out = deconv2d(x, w, b, 2, 1, 0);
    CHECK(out.shape() == Shape{2, 2, 8, 8});
    Tensor r = random_tensor(out.shape(), rng);
    auto res = check_gradients({x, w, b}, [&] { return sum(mul(deconv2d(x, w, b, 2, 1, 0), r)); });
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("adaptive_avg_pool2d bins") {
    Tensor ones = Tensor::ones({1, 1, 4, 4});
    Tensor p = adaptive_avg_pool2d(ones, 2, 2);
    for (int64_t i = 0; i < 4; ++i) CHECK(p.data()[i] == doctest::Approx(1.0));

    Tensor q = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(adaptive_avg_pool2d(q, 1, 1).item() == doctest::Approx(2.5));

    Rng rng(31);
    Tensor x = random_tensor({1, 2, 3, 5}, rng);
    Tensor same = adaptive_avg_pool2d(x, 3, 5);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(same.data()[i] == doctest::Approx(x.data()[i]));

    CHECK_THROWS_AS(adaptive_avg_pool2d(x, 0, 2), DimensionError);
}

TEST_CASE("adaptive_avg_pool2d preserves global mean on even splits") {
    Rng rng(37);
    for (int seed = 0; seed < 20; ++seed) {
        Tensor x = random_tensor({1, 1, 8, 6}, rng);
        Tensor p = adaptive_avg_pool2d(x, 4, 3);
        CHECK(mean(p).item() == doctest::Approx(mean(x).item()).epsilon(1e-12));
    }
    Tensor xg = random_tensor({1, 2, 5, 4}, rng);
    auto res = check_gradients({xg}, [&] { return sum(adaptive_avg_pool2d(xg, 2, 3)); });
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("interpolate_bilinear sampling") {
    Tensor c = Tensor::full({1, 1, 2, 3}, 0.7);
    Tensor up = interpolate_bilinear(c, 5, 7);
    for (int64_t i = 0; i < up.numel(); ++i) CHECK(up.data()[i] == doctest::Approx(0.7));

    Tensor one = Tensor::full({1, 1, 1, 1}, 3.25);
    Tensor u3 = interpolate_bilinear(one, 3, 3);
    for (int64_t i = 0; i < 9; ++i) CHECK(u3.data()[i] == doctest::Approx(3.25));

    Tensor g = Tensor::from_vector({1, 1, 2, 2}, {0, 1, 0, 1});
    Tensor wide = interpolate_bilinear(g, 2, 4);
    const double expect[4] = {0.0, 0.25, 0.75, 1.0};
    for (int64_t r = 0; r < 2; ++r) {
        for (int64_t j = 0; j < 4; ++j) {
            CHECK(wide.at({0, 0, r, j}) == doctest::Approx(expect[j]));
        }
    }

    Rng rng(41);
    Tensor x = random_tensor({2, 2, 3, 4}, rng);
    Tensor r = random_tensor({2, 2, 5, 6}, rng);
    auto res = check_gradients({x}, [&] { return sum(mul(interpolate_bilinear(x, 5, 6), r)); });
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("softmax properties") {
    Tensor eq = Tensor::full({5}, 1.7);
    Tensor u = softmax(eq, 0);
    for (int64_t i = 0; i < 5; ++i) CHECK(u.data()[i] == doctest::Approx(0.2).epsilon(1e-12));

    Rng rng(43);
    for (int seed = 0; seed < 20; ++seed) {
        Tensor x = random_tensor({3, 4, 5}, rng, -50.0, 50.0);
        for (int64_t axis = 0; axis < 3; ++axis) {
            Tensor y = softmax(x, axis);
            Tensor s = sum(y, axis);
            for (int64_t i = 0; i < s.numel(); ++i) {
                CHECK(std::fabs(s.data()[i] - 1.0) < 1e-9);
            }
        }
    }

    Tensor x = random_tensor({2, 6}, rng);
    Tensor r = random_tensor({2, 6}, rng);
    auto res = check_gradients({x}, [&] { return sum(mul(softmax(x, 1), r)); });
    CHECK(res.max_rel < 1e-4);
}

TEST_CASE("relu and gelu") {
    Tensor x = Tensor::from_vector({2}, {-3, 3});
    Tensor y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 3.0);

    Rng rng(47);
    Tensor xr = random_tensor_offset({3, 4}, rng);
    Tensor r = random_tensor({3, 4}, rng);
    auto res = check_gradients({xr}, [&] { return sum(mul(relu(xr), r)); });
    CHECK(res.max_rel < 1e-6);
    auto res2 = check_gradients({xr}, [&] { return sum(mul(gelu(xr), r)); });
    CHECK(res2.max_rel < 1e-6);
}

TEST_CASE("layernorm normalizes each row") {
    Rng rng(53);
    Tensor x = random_tensor({4, 7}, rng, -3.0, 3.0);
    Tensor gamma = Tensor::ones({7});
    Tensor beta = Tensor::zeros({7});
    Tensor y = layernorm(x, gamma, beta);
    for (int64_t r = 0; r < 4; ++r) {
        double mu = 0.0, var = 0.0;
        for (int64_t j = 0; j < 7; ++j) mu += y.at({r, j});
        mu /= 7.0;
        for (int64_t j = 0; j < 7; ++j) var += (y.at({r, j}) - mu) * (y.at({r, j}) - mu);
        var /= 7.0;
        CHECK(std::fabs(mu) < 1e-6);
        CHECK(std::fabs(var - 1.0) < 1e-4);
    }
    Tensor g2 = random_tensor({7}, rng);
    Tensor b2 = random_tensor({7}, rng);
    Tensor r2 = random_tensor({4, 7}, rng);
    auto res = check_gradients({x, g2, b2}, [&] { return sum(mul(layernorm(x, g2, b2), r2)); });
    CHECK(res.max_rel < 1e-4);
}

TEST_CASE("batchnorm2d training and eval") {
    Rng rng(59);
    Tensor x = random_tensor({3, 2, 2, 2}, rng);
    Tensor gamma = Tensor::ones({2});
    Tensor beta = Tensor::zeros({2});
    Tensor rm = Tensor::zeros({2});
    Tensor rv = Tensor::ones({2});

    CHECK_THROWS_AS(
        batchnorm2d(random_tensor({1, 2, 2, 2}, rng), gamma, beta, rm, rv, true, 0.1, 1e-5),
        UsageError);

    Tensor y = batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
    // per-channel batch statistics are normalized out
    for (int64_t c = 0; c < 2; ++c) {
        double mu = 0.0;
        for (int64_t b = 0; b < 3; ++b) {
            for (int64_t i = 0; i < 4; ++i) mu += y.data()[(b * 2 + c) * 4 + i];
        }
        CHECK(std::fabs(mu / 12.0) < 1e-12);
    }
    // running stats moved away from init
    CHECK(rm.data()[0] != 0.0);

    Tensor g2 = random_tensor({2}, rng);
    Tensor b2 = random_tensor({2}, rng);
    Tensor r2 = random_tensor({3, 2, 2, 2}, rng);
    auto train_res = check_gradients({x, g2, b2}, [&] {
        Tensor rmc = rm.detach();
        Tensor rvc = rv.detach();
        return sum(mul(batchnorm2d(x, g2, b2, rmc, rvc, true, 0.1, 1e-5), r2));
    });
    CHECK(train_res.max_rel < 1e-4);
    auto eval_res = check_gradients({x, g2, b2}, [&] {
        return sum(mul(batchnorm2d(x, g2, b2, rm, rv, false, 0.1, 1e-5), r2));
    });
    CHECK(eval_res.max_rel < 1e-4);
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from_vector({3}, {1, 2, 3}).set_requires_grad(true);
    Tensor loss = sum(x);
    loss.backward();
    for (int64_t i = 0; i < 3; ++i) CHECK(x.grad_data()[i] == doctest::Approx(1.0));

    Tensor x2 = Tensor::from_vector({2}, {1, 2}).set_requires_grad(true);
    Tensor loss2 = sum(mul(x2, x2));
    loss2.backward();
    CHECK(x2.grad_data()[0] == doctest::Approx(2.0));
    CHECK(x2.grad_data()[1] == doctest::Approx(4.0));

    // repeated backward accumulates into leaf grads
    loss2.backward();
    CHECK(x2.grad_data()[0] == doctest::Approx(4.0));
    CHECK(x2.grad_data()[1] == doctest::Approx(8.0));

    CHECK_THROWS_AS(x.backward(), UsageError);
}

TEST_CASE("ops do not mutate their inputs") {
    Rng rng(61);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    const std::vector<double> snap_a(a.data(), a.data() + a.numel());
    const std::vector<double> snap_b(b.data(), b.data() + b.numel());
    (void)add(a, b);
    (void)mul(a, b);
    (void)relu(a);
    (void)softmax(a, 1);
    (void)reshape(a, {3, 2});
    (void)matmul(a, transpose(b, 0, 1));
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a.data()[i] == snap_a[static_cast<size_t>(i)]);
        CHECK(b.data()[i] == snap_b[static_cast<size_t>(i)]);
    }
}

TEST_CASE("broadcast arithmetic and reductions") {
    Tensor a = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_vector({3}, {10, 20, 30});
    Tensor c = add(a, b);
    CHECK(c.at({0, 0}) == doctest::Approx(11));
    CHECK(c.at({1, 2}) == doctest::Approx(36));

    Tensor col = Tensor::from_vector({2, 1}, {1, 2});
    Tensor d = mul(a, col);
    CHECK(d.at({0, 2}) == doctest::Approx(3));
    CHECK(d.at({1, 0}) == doctest::Approx(8));

    Tensor s0 = sum(a, 0);
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.data()[0] == doctest::Approx(5));
    Tensor m1 = mean(a, 1);
    CHECK(m1.shape() == Shape{2});
    CHECK(m1.data()[1] == doctest::Approx(5));

    Rng rng(67);
    Tensor xa = random_tensor({2, 3}, rng);
    Tensor xb = random_tensor({3}, rng);
    Tensor rr = random_tensor({2, 3}, rng);
    auto res = check_gradients({xa, xb}, [&] { return sum(mul(add(xa, xb), rr)); });
    CHECK(res.max_rel < 1e-6);
    auto res2 = check_gradients({xa, xb}, [&] { return sum(mul(div(xa, add_scalar(xb, 3.0)), rr)); });
    CHECK(res2.max_rel < 1e-5);
}

TEST_CASE("shape ops round-trip gradients") {
    Rng rng(71);
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor r = random_tensor({4, 6}, rng);
    auto res = check_gradients({x}, [&] { return sum(mul(reshape(x, {4, 6}), r)); });
    CHECK(res.max_rel < 1e-6);

    Tensor rp = random_tensor({4, 2, 3}, rng);
    auto res2 = check_gradients({x}, [&] { return sum(mul(permute(x, {2, 0, 1}), rp)); });
    CHECK(res2.max_rel < 1e-6);

    Tensor y = random_tensor({2, 2, 4}, rng);
    Tensor rc = random_tensor({2, 5, 4}, rng);
    auto res3 = check_gradients({x, y}, [&] {
        return sum(mul(concat({slice(x, 1, 0, 3), y}, 1), rc));
    });
    CHECK(res3.max_rel < 1e-6);
}

TEST_CASE("every differentiable op passes randomized finite-difference checks") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed);
        Tensor x = random_tensor_offset({2, 2, 4, 4}, rng);
        Tensor w = random_tensor({2, 2, 3, 3}, rng);
        Tensor g = random_tensor({2}, rng, 0.5, 1.5);
        Tensor b = random_tensor({2}, rng);
        Tensor r = random_tensor({2, 2, 4, 4}, rng);
        auto loss_fn = [&] {
            Tensor h = conv2d(x, w, b, 1, 1);
            Tensor rm = Tensor::zeros({2});
            Tensor rv = Tensor::ones({2});
            h = batchnorm2d(h, g, b, rm, rv, true, 0.1, 1e-5);
            h = relu(h);
            h = adaptive_avg_pool2d(h, 2, 2);
            h = interpolate_bilinear(h, 4, 4);
            Tensor t = reshape(h, {2, 2, 16});
            t = softmax(t, 2);
            return sum(mul(reshape(t, {2, 2, 4, 4}), r));
        };
        auto res = check_gradients({x, w, g, b}, loss_fn, 1e-6, 6, seed);
        CHECK(res.max_rel < 1e-4);
    }
}
