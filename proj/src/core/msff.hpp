#pragma once

#include <memory>
#include <vector>

#include "core/nn.hpp"

namespace poseidon {

struct MsffConfig {
    int64_t channels = 32;
    int64_t tap_count = 3;  // L+1
    std::vector<int64_t> pool_scales{1, 2, 3, 6};
    int64_t heads = 4;

    void validate() const;
};

// Pyramid pooling: per scale, adaptive-average-pool -> 1x1 conv to C/4 ->
// BN -> ReLU -> bilinear upsample back to HxW; the four scale outputs are
// concatenated channel-wise so the result keeps C channels.
class Ppm : public Module {
  public:
    Ppm(int64_t channels, std::vector<int64_t> scales, Rng& rng);
    Tensor forward(const Tensor& f) const;

  private:
    int64_t channels_;
    std::vector<int64_t> scales_;
    std::vector<std::unique_ptr<Conv2d>> convs_;
    std::vector<std::unique_ptr<BatchNorm2d>> norms_;
};

// Multi-scale feature fusion over backbone taps: shared PPM + 3x3 unify per
// tap, channel concat, spatial self-attention over the concatenated width,
// residual + layernorm, linear, mean over the tap groups, final projection.
// Shape-preserving: output equals the tap shape.
class Msff : public Module {
  public:
    Msff(const MsffConfig& cfg, Rng& rng);

    Tensor ppm(const Tensor& f) const { return ppm_.forward(f); }
    Tensor unify(const Tensor& f_pool) const;
    Tensor fuse(const std::vector<Tensor>& taps);

    // ppm + unify per tap, then fuse
    Tensor forward(const std::vector<Tensor>& taps);

    const MsffConfig& config() const { return cfg_; }
    MultiHeadAttention& fusion_attention() { return attn_; }
    Linear& width_linear() { return lin_; }

  private:
    MsffConfig cfg_;
    Ppm ppm_;
    Conv2d unify_conv_;
    BatchNorm2d unify_norm_;
    MultiHeadAttention attn_;
    LayerNorm norm_;
    Linear lin_;   // (L+1)C -> (L+1)C
    Linear proj_;  // C -> C
};

}  // namespace poseidon
