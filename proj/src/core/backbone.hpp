#pragma once

#include <memory>
#include <vector>

#include "core/nn.hpp"

namespace poseidon {

struct BackboneConfig {
    int64_t img_h = 64;
    int64_t img_w = 48;
    int64_t patch = 8;
    int64_t embed_dim = 32;
    int64_t depth = 4;
    int64_t heads = 4;
    std::vector<int64_t> tap_layers{1, 2, 4};

    void validate() const;
    int64_t grid_h() const { return img_h / patch; }
    int64_t grid_w() const { return img_w / patch; }
    int64_t tokens() const { return grid_h() * grid_w(); }
};

// Pre-norm transformer block: x += attn(LN(x)); x += mlp(LN(x)), GELU MLP
// with hidden ratio 4.
class TransformerBlock : public Module {
  public:
    TransformerBlock(int64_t dim, int64_t heads, Rng& rng);
    Tensor forward(const Tensor& x);
    MultiHeadAttention attn;

  private:
    LayerNorm norm1_, norm2_;
    Linear fc1_, fc2_;
};

// Isotropic ViT encoder: patch embedding plus `depth` blocks. Tap features
// are recorded after the full block (post-residual) and reshaped to
// [N, C, Hp, Wp] map form.
class ViTBackbone : public Module {
  public:
    ViTBackbone(const BackboneConfig& cfg, Rng& rng);

    // images: [N, 3, img_h, img_w] -> tokens [N, tokens, C]
    Tensor patch_embed(const Tensor& images) const;

    // one feature map per tap layer, each [N, C, Hp, Wp]
    std::vector<Tensor> encode(const Tensor& images);

    Tensor tokens_to_map(const Tensor& tokens) const;

    const BackboneConfig& config() const { return cfg_; }
    void capture_attention(bool on);
    std::vector<Tensor> last_attentions() const;

  private:
    BackboneConfig cfg_;
    Tensor patch_weight_;  // [C, 3, patch, patch]
    Tensor patch_bias_;
    Tensor pos_embed_;  // [1, tokens, C]
    std::vector<std::unique_ptr<TransformerBlock>> blocks_;
};

}  // namespace poseidon
