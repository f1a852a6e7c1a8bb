#include "core/cross_attention.hpp"

namespace poseidon {

CrossAttention::CrossAttention(int64_t channels, const CrossAttnConfig& cfg, Rng& rng)
    : self_attn(channels, cfg.heads, rng),
      cross_attn(channels, cfg.heads, rng),
      self_norm(channels),
      cross_norm(channels),
      channels_(channels) {
    register_module("self_attn", self_attn);
    register_module("self_norm", self_norm);
    register_module("cross_attn", cross_attn);
    register_module("cross_norm", cross_norm);
}

Tensor CrossAttention::context_self_attention(const Tensor& ctx) {
    if (ctx.dim() != 3) {
        throw DimensionError("cross-attention: context must be [B,N,C], got " +
                             shape_str(ctx.shape()));
    }
    if (ctx.size(1) == 0) {
        log_warn("cross-attention: no context tokens, self-attention skipped");
        return ctx;
    }
    return self_norm.forward(add(ctx, self_attn.forward(ctx, ctx)));
}

Tensor CrossAttention::cross_attend(const Tensor& center, const Tensor& ctx) {
    if (center.dim() != 3 || ctx.dim() != 3) {
        throw DimensionError("cross-attention: tokens must be [B,S,C], got " +
                             shape_str(center.shape()) + " and " + shape_str(ctx.shape()));
    }
    if (ctx.size(1) == 0) {
        log_warn("cross-attention: no context frames, center passed through unchanged");
        return center;
    }
    return cross_norm.forward(add(center, cross_attn.forward(center, ctx)));
}

Tensor CrossAttention::forward(const Tensor& features, int64_t batch, int64_t window,
                               int64_t center_index) {
    if (features.dim() != 4 || features.size(1) != channels_) {
        throw DimensionError("cross-attention: expected [B*T," + std::to_string(channels_) +
                             ",H,W], got " + shape_str(features.shape()));
    }
    if (window <= 0 || center_index < 0 || center_index >= window) {
        throw UsageError("cross-attention: invalid window/center " + std::to_string(window) + "/" +
                         std::to_string(center_index));
    }
    const int64_t H = features.size(2), W = features.size(3);
    const int64_t S = H * W;
    // [B*T,C,H,W] -> [B, T, S, C]
    Tensor tokens = permute(reshape(features, {batch, window, channels_, S}), {0, 1, 3, 2});
    Tensor center = reshape(slice(tokens, 1, center_index, 1), {batch, S, channels_});
    Tensor updated;
    if (window == 1) {
        updated = cross_attend(center, Tensor::zeros({batch, 0, channels_}));
    } else {
        std::vector<Tensor> parts;
        if (center_index > 0) parts.push_back(slice(tokens, 1, 0, center_index));
        if (center_index + 1 < window) {
            parts.push_back(slice(tokens, 1, center_index + 1, window - center_index - 1));
        }
        Tensor ctx = parts.size() == 1 ? parts[0] : concat(parts, 1);
        ctx = reshape(ctx, {batch, (window - 1) * S, channels_});
        ctx = context_self_attention(ctx);
        updated = cross_attend(center, ctx);
    }
    return permute(reshape(updated, {batch, H, W, channels_}), {0, 3, 1, 2});
}

void CrossAttention::capture_attention(bool on) {
    self_attn.capture_attention(on);
    cross_attn.capture_attention(on);
}

}  // namespace poseidon
