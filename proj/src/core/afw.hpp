#pragma once

#include "core/nn.hpp"

namespace poseidon {

struct FrameWeights {
    Tensor scores;   // [B, T] raw quality scores
    Tensor weights;  // [B, T] softmax over the window, sums to 1 per element
};

// Adaptive frame weighting: a learned quality score per frame, softmax
// normalized across the window, scaling each frame's feature map.
class FrameWeighting : public Module {
  public:
    FrameWeighting(int64_t channels, Rng& rng);

    // features: [B*T, C, H, W] -> scores [B, T]
    // score head: 3x3 conv -> ReLU -> global average pool -> linear
    Tensor quality_score(const Tensor& features, int64_t batch, int64_t window) const;

    // weights = softmax(scores, T axis); each frame's map scaled by its weight
    std::pair<Tensor, FrameWeights> weigh(const Tensor& features, const Tensor& scores) const;

    std::pair<Tensor, FrameWeights> forward(const Tensor& features, int64_t batch,
                                            int64_t window) const;

  private:
    int64_t channels_;
    Conv2d conv_;
    Linear score_;
};

}  // namespace poseidon
