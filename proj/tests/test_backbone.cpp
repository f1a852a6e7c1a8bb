#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "core/backbone.hpp"
#include "doctest.h"
#include "testing.hpp"

using namespace poseidon;
using ptest::check_gradients;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.img_h = 16;
    cfg.img_w = 16;
    cfg.patch = 8;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.tap_layers = {1, 2};
    return cfg;
}

}  // namespace

TEST_CASE("config invariants are enforced") {
    BackboneConfig bad = tiny_config();
    bad.img_h = 17;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.tap_layers = {2, 1};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.tap_layers = {1};  // last tap must be the final block
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("patch embedding token count and zero-weight behaviour") {
    BackboneConfig cfg;
    cfg.img_h = 64;
    cfg.img_w = 48;
    cfg.patch = 8;
    cfg.embed_dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.tap_layers = {1};
    Rng rng(5);
    ViTBackbone net(cfg, rng);
    Tensor img = Tensor::zeros({2, 3, 64, 48});
    Tensor tokens = net.patch_embed(img);
    CHECK(tokens.shape() == Shape{2, 48, 8});  // (64/8)*(48/8) = 48 tokens

    // zero image and zero projection -> tokens equal positional embeddings
    net.find_parameter("patch.weight").fill_(0.0);
    Tensor tokens0 = net.patch_embed(img);
    Tensor pos = net.find_parameter("pos_embed");
    for (int64_t t = 0; t < 48; ++t) {
        for (int64_t c = 0; c < 8; ++c) {
            CHECK(tokens0.at({0, t, c}) == doctest::Approx(pos.at({0, t, c})));
            CHECK(tokens0.at({1, t, c}) == doctest::Approx(pos.at({0, t, c})));
        }
    }

    CHECK_THROWS_AS(net.patch_embed(Tensor::zeros({1, 3, 32, 48})), DimensionError);
}

TEST_CASE("patch embedding gradients") {
    Rng rng(7);
    ViTBackbone net(tiny_config(), rng);
    Tensor img = Tensor::rand_uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    Tensor r = Tensor::rand_uniform({1, 4, 8}, rng, -1.0, 1.0);
    auto params = net.named_parameters();
    std::vector<Tensor> leaves{img};
    for (auto& [name, t] : params) {
        if (name == "patch.weight" || name == "patch.bias" || name == "pos_embed") leaves.push_back(t);
    }
    auto res = check_gradients(leaves, [&] { return sum(mul(net.patch_embed(img), r)); }, 1e-6, 10);
    CHECK(res.max_rel < 1e-4);
}

TEST_CASE("encode produces taps of identical map shape") {
    Rng rng(11);
    BackboneConfig cfg = tiny_config();
    ViTBackbone net(cfg, rng);
    net.set_training(false);
    Tensor img = Tensor::rand_uniform({3, 3, 16, 16}, rng, 0.0, 1.0);
    auto taps = net.encode(img);
    REQUIRE(taps.size() == 2);
    for (const Tensor& t : taps) CHECK(t.shape() == Shape{3, 8, 2, 2});

    // depth-1 model with tap [1]: the single tap equals the final output
    BackboneConfig one = cfg;
    one.depth = 1;
    one.tap_layers = {1};
    Rng rng2(11);
    ViTBackbone net1(one, rng2);
    auto taps1 = net1.encode(img);
    CHECK(taps1.size() == 1);
}

TEST_CASE("identical frames encode identically and independently of the batch") {
    Rng rng(13);
    ViTBackbone net(tiny_config(), rng);
    net.set_training(false);
    Tensor frame = Tensor::rand_uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    Tensor batch = concat({frame, frame, frame}, 0);

    NoGradGuard ng;
    auto taps_batch = net.encode(batch);
    auto taps_single = net.encode(frame);
    for (size_t l = 0; l < taps_batch.size(); ++l) {
        const Tensor& tb = taps_batch[l];
        const Tensor& ts = taps_single[l];
        const int64_t per = ts.numel();
        for (int64_t b = 0; b < 3; ++b) {
            for (int64_t i = 0; i < per; ++i) {
                CHECK(std::fabs(tb.data()[b * per + i] - ts.data()[i]) < 1e-10);
            }
        }
    }
}

TEST_CASE("permuting frames in the folded batch permutes outputs identically") {
    Rng rng(17);
    ViTBackbone net(tiny_config(), rng);
    net.set_training(false);
    NoGradGuard ng;
    Tensor f0 = Tensor::rand_uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    Tensor f1 = Tensor::rand_uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto a = net.encode(concat({f0, f1}, 0));
    auto b = net.encode(concat({f1, f0}, 0));
    const int64_t per = a[0].numel() / 2;
    for (size_t l = 0; l < a.size(); ++l) {
        for (int64_t i = 0; i < per; ++i) {
            CHECK(a[l].data()[i] == doctest::Approx(b[l].data()[per + i]).epsilon(1e-14));
            CHECK(a[l].data()[per + i] == doctest::Approx(b[l].data()[i]).epsilon(1e-14));
        }
    }
}

TEST_CASE("attention rows inside every block sum to 1") {
    Rng rng(19);
    ViTBackbone net(tiny_config(), rng);
    net.capture_attention(true);
    NoGradGuard ng;
    Tensor img = Tensor::rand_uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
    (void)net.encode(img);
    auto attns = net.last_attentions();
    REQUIRE(attns.size() == 2);
    for (const Tensor& a : attns) {
        REQUIRE(a.defined());
        const int64_t rows = a.numel() / a.size(-1);
        const int64_t cols = a.size(-1);
        for (int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int64_t c = 0; c < cols; ++c) s += a.data()[r * cols + c];
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("end-to-end backbone gradient check on a tiny config") {
    Rng rng(23);
    ViTBackbone net(tiny_config(), rng);
    Tensor img = Tensor::rand_uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
    std::vector<Tensor> rs;
    auto loss_fn = [&] {
        auto taps = net.encode(img);
        Tensor acc;
        for (size_t i = 0; i < taps.size(); ++i) {
            Tensor term = sum(mul(taps[i], rs[i]));
            acc = acc.defined() ? add(acc, term) : term;
        }
        return acc;
    };
    {
        NoGradGuard ng;
        auto taps = net.encode(img);
        Rng rr(99);
        for (const Tensor& t : taps) rs.push_back(Tensor::rand_uniform(t.shape(), rr, -1.0, 1.0));
    }
    std::vector<Tensor> leaves{img};
    for (auto& [name, t] : net.named_parameters()) leaves.push_back(t);
    auto res = check_gradients(leaves, loss_fn, 1e-6, 3);
    CHECK(res.max_rel < 1e-4);
}
