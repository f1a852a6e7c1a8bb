#pragma once

#include "core/nn.hpp"

namespace poseidon {

struct CrossAttnConfig {
    int64_t heads = 4;
};

// Temporal integration across the window: self-attention over the context
// frames' tokens taken jointly, then cross-attention with the center frame's
// tokens as queries. Both blocks use residual + layernorm; neither adds
// positional encodings (the backbone already injected them), which makes the
// context permutation invariance testable.
class CrossAttention : public Module {
  public:
    CrossAttention(int64_t channels, const CrossAttnConfig& cfg, Rng& rng);

    // ctx: [B, N, C] tokens of all non-center frames, jointly attended.
    // N == 0 returns the input unchanged with a warning.
    Tensor context_self_attention(const Tensor& ctx);

    // center: [B, S, C] query tokens, ctx: [B, N, C] keys/values.
    // N == 0 falls back to passing the center through unchanged.
    Tensor cross_attend(const Tensor& center, const Tensor& ctx);

    // features: [B*T, C, H, W] -> updated center map [B, C, H, W].
    // center_index selects the center frame within the window.
    Tensor forward(const Tensor& features, int64_t batch, int64_t window, int64_t center_index);

    void capture_attention(bool on);
    // cross-attention rows [B, heads, S, N] from the last forward
    const Tensor& last_alpha() const { return cross_attn.last_attention(); }

    MultiHeadAttention self_attn;
    MultiHeadAttention cross_attn;
    LayerNorm self_norm;
    LayerNorm cross_norm;

  private:
    int64_t channels_;
};

}  // namespace poseidon
