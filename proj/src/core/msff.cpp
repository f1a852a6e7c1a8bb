#include "core/msff.hpp"

#include <algorithm>

namespace poseidon {

void MsffConfig::validate() const {
    if (channels <= 0 || tap_count <= 0) throw ConfigError("msff: extents must be positive");
    if (channels % 4 != 0) {
        throw ConfigError("msff: channels " + std::to_string(channels) +
                          " not divisible by 4 (pyramid branches reduce to C/4)");
    }
    if (pool_scales.size() != 4) {
        throw ConfigError("msff: channel accounting needs exactly 4 pool scales, got " +
                          std::to_string(pool_scales.size()));
    }
    for (int64_t p : pool_scales) {
        if (p <= 0) throw ConfigError("msff: pool scales must be positive");
    }
    const int64_t width = tap_count * channels;
    if (width % heads != 0) {
        throw ConfigError("msff: fusion width " + std::to_string(width) +
                          " not divisible by heads " + std::to_string(heads));
    }
}

Ppm::Ppm(int64_t channels, std::vector<int64_t> scales, Rng& rng)
    : channels_(channels), scales_(std::move(scales)) {
    const int64_t reduced = channels_ / 4;
    for (size_t i = 0; i < scales_.size(); ++i) {
        convs_.push_back(std::make_unique<Conv2d>(channels_, reduced, 1, 1, 0, rng));
        norms_.push_back(std::make_unique<BatchNorm2d>(reduced));
        register_module("scale" + std::to_string(scales_[i]) + ".conv", *convs_[i]);
        register_module("scale" + std::to_string(scales_[i]) + ".bn", *norms_[i]);
    }
}

Tensor Ppm::forward(const Tensor& f) const {
    if (f.dim() != 4 || f.size(1) != channels_) {
        throw DimensionError("ppm: expected [N," + std::to_string(channels_) + ",H,W], got " +
                             shape_str(f.shape()));
    }
    const int64_t H = f.size(2), W = f.size(3);
    std::vector<Tensor> branches;
    for (size_t i = 0; i < scales_.size(); ++i) {
        // degenerate inputs clamp the grid to the available extent
        const int64_t ph = std::min<int64_t>(scales_[i], H);
        const int64_t pw = std::min<int64_t>(scales_[i], W);
        Tensor p = adaptive_avg_pool2d(f, ph, pw);
        p = relu(norms_[i]->forward(convs_[i]->forward(p)));
        branches.push_back(interpolate_bilinear(p, H, W));
    }
    return concat(branches, 1);
}

Msff::Msff(const MsffConfig& cfg, Rng& rng)
    : cfg_(cfg),
      ppm_(cfg.channels, cfg.pool_scales, rng),
      unify_conv_(cfg.channels, cfg.channels, 3, 1, 1, rng),
      unify_norm_(cfg.channels),
      attn_(cfg.tap_count * cfg.channels, cfg.heads, rng),
      norm_(cfg.tap_count * cfg.channels),
      lin_(cfg.tap_count * cfg.channels, cfg.tap_count * cfg.channels, rng),
      proj_(cfg.channels, cfg.channels, rng) {
    cfg_.validate();
    register_module("ppm", ppm_);
    register_module("unify.conv", unify_conv_);
    register_module("unify.bn", unify_norm_);
    register_module("fuse.attn", attn_);
    register_module("fuse.norm", norm_);
    register_module("fuse.linear", lin_);
    register_module("fuse.proj", proj_);
}

Tensor Msff::unify(const Tensor& f_pool) const {
    return relu(unify_norm_.forward(unify_conv_.forward(f_pool)));
}

Tensor Msff::fuse(const std::vector<Tensor>& taps) {
    if (static_cast<int64_t>(taps.size()) != cfg_.tap_count) {
        throw DimensionError("msff: expected " + std::to_string(cfg_.tap_count) + " taps, got " +
                             std::to_string(taps.size()));
    }
    const Shape& s0 = taps[0].shape();
    for (const Tensor& t : taps) {
        if (t.shape() != s0) {
            throw DimensionError("msff: tap shapes differ, " + shape_str(t.shape()) + " vs " +
                                 shape_str(s0));
        }
    }
    const int64_t N = s0[0], C = s0[1], H = s0[2], W = s0[3];
    const int64_t L1 = cfg_.tap_count;
    const int64_t width = L1 * C;

    Tensor cat = concat(taps, 1);                                        // [N, (L+1)C, H, W]
    Tensor tokens = reshape(permute(cat, {0, 2, 3, 1}), {N, H * W, width});
    Tensor attended = attn_.forward(tokens, tokens);
    Tensor normed = norm_.forward(add(tokens, attended));
    Tensor lifted = lin_.forward(normed);                                // [N, HW, (L+1)C]
    Tensor grouped = reshape(lifted, {N, H * W, L1, C});
    Tensor fused = mean(grouped, 2);                                     // [N, HW, C]
    Tensor projected = proj_.forward(fused);
    return permute(reshape(projected, {N, H, W, C}), {0, 3, 1, 2});
}

Tensor Msff::forward(const std::vector<Tensor>& taps) {
    std::vector<Tensor> unified;
    unified.reserve(taps.size());
    for (const Tensor& t : taps) unified.push_back(unify(ppm_.forward(t)));
    return fuse(unified);
}

}  // namespace poseidon
