#include "core/afw.hpp"

namespace poseidon {

FrameWeighting::FrameWeighting(int64_t channels, Rng& rng)
    : channels_(channels), conv_(channels, channels, 3, 1, 1, rng), score_(channels, 1, rng) {
    register_module("conv", conv_);
    register_module("score", score_);
}

Tensor FrameWeighting::quality_score(const Tensor& features, int64_t batch, int64_t window) const {
    if (features.dim() != 4 || features.size(1) != channels_) {
        throw DimensionError("afw: expected [B*T," + std::to_string(channels_) + ",H,W], got " +
                             shape_str(features.shape()));
    }
    if (window <= 0) throw UsageError("afw: window length must be positive");
    if (features.size(0) != batch * window) {
        throw DimensionError("afw: leading extent " + std::to_string(features.size(0)) +
                             " does not factor as " + std::to_string(batch) + "x" +
                             std::to_string(window));
    }
    Tensor h = relu(conv_.forward(features));
    Tensor pooled = adaptive_avg_pool2d(h, 1, 1);                 // [B*T, C, 1, 1]
    Tensor flat = reshape(pooled, {batch * window, channels_});   // flatten
    Tensor s = score_.forward(flat);                              // [B*T, 1]
    return reshape(s, {batch, window});
}

std::pair<Tensor, FrameWeights> FrameWeighting::weigh(const Tensor& features,
                                                      const Tensor& scores) const {
    if (scores.dim() != 2) {
        throw DimensionError("afw: scores must be [B,T], got " + shape_str(scores.shape()));
    }
    const int64_t batch = scores.size(0);
    const int64_t window = scores.size(1);
    if (window == 0) throw UsageError("afw: empty window");
    if (features.size(0) != batch * window) {
        throw DimensionError("afw: features " + shape_str(features.shape()) +
                             " do not match scores " + shape_str(scores.shape()));
    }
    Tensor w = softmax(scores, 1);
    Tensor per_frame = reshape(w, {batch * window, 1, 1, 1});
    Tensor weighted = mul(features, per_frame);
    return {weighted, FrameWeights{scores, w}};
}

std::pair<Tensor, FrameWeights> FrameWeighting::forward(const Tensor& features, int64_t batch,
                                                        int64_t window) const {
    return weigh(features, quality_score(features, batch, window));
}

}  // namespace poseidon
