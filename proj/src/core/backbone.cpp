#include "core/backbone.hpp"

namespace poseidon {

void BackboneConfig::validate() const {
    if (img_h <= 0 || img_w <= 0 || patch <= 0 || embed_dim <= 0 || depth <= 0 || heads <= 0) {
        throw ConfigError("backbone: all extents must be positive");
    }
    if (img_h % patch != 0 || img_w % patch != 0) {
        throw ConfigError("backbone: image " + std::to_string(img_h) + "x" + std::to_string(img_w) +
                          " not divisible by patch " + std::to_string(patch));
    }
    if (embed_dim % heads != 0) {
        throw ConfigError("backbone: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by heads " + std::to_string(heads));
    }
    if (tap_layers.empty()) throw ConfigError("backbone: tap_layers must not be empty");
    int64_t prev = 0;
    for (int64_t t : tap_layers) {
        if (t <= prev) throw ConfigError("backbone: tap_layers must be strictly increasing");
        if (t > depth) throw ConfigError("backbone: tap layer " + std::to_string(t) +
                                         " exceeds depth " + std::to_string(depth));
        prev = t;
    }
    if (tap_layers.back() != depth) {
        throw ConfigError("backbone: last tap layer must equal depth (final output)");
    }
}

TransformerBlock::TransformerBlock(int64_t dim, int64_t heads, Rng& rng)
    : attn(dim, heads, rng),
      norm1_(dim),
      norm2_(dim),
      fc1_(dim, dim * 4, rng),
      fc2_(dim * 4, dim, rng) {
    register_module("norm1", norm1_);
    register_module("attn", attn);
    register_module("norm2", norm2_);
    register_module("mlp_fc1", fc1_);
    register_module("mlp_fc2", fc2_);
}

Tensor TransformerBlock::forward(const Tensor& x) {
    Tensor h = norm1_.forward(x);
    Tensor y = add(x, attn.forward(h, h));
    Tensor m = fc2_.forward(gelu(fc1_.forward(norm2_.forward(y))));
    return add(y, m);
}

ViTBackbone::ViTBackbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    Tensor pw({cfg_.embed_dim, 3, cfg_.patch, cfg_.patch});
    double* d = pw.data();
    for (int64_t i = 0; i < pw.numel(); ++i) d[i] = rng.trunc_normal(0.02);
    patch_weight_ = register_parameter("patch.weight", std::move(pw));
    patch_bias_ = register_parameter("patch.bias", Tensor::zeros({cfg_.embed_dim}));

    Tensor pe({1, cfg_.tokens(), cfg_.embed_dim});
    d = pe.data();
    for (int64_t i = 0; i < pe.numel(); ++i) d[i] = rng.trunc_normal(0.02);
    pos_embed_ = register_parameter("pos_embed", std::move(pe));

    for (int64_t i = 0; i < cfg_.depth; ++i) {
        blocks_.push_back(std::make_unique<TransformerBlock>(cfg_.embed_dim, cfg_.heads, rng));
        register_module("block" + std::to_string(i), *blocks_.back());
    }
}

Tensor ViTBackbone::patch_embed(const Tensor& images) const {
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.img_h ||
        images.size(3) != cfg_.img_w) {
        throw DimensionError("patch_embed: expected [N,3," + std::to_string(cfg_.img_h) + "," +
                             std::to_string(cfg_.img_w) + "], got " + shape_str(images.shape()));
    }
    const int64_t N = images.size(0);
    Tensor grid = conv2d(images, patch_weight_, patch_bias_, cfg_.patch, 0);  // [N,C,Hp,Wp]
    Tensor tokens = reshape(permute(grid, {0, 2, 3, 1}), {N, cfg_.tokens(), cfg_.embed_dim});
    return add(tokens, pos_embed_);
}

Tensor ViTBackbone::tokens_to_map(const Tensor& tokens) const {
    const int64_t N = tokens.size(0);
    return permute(reshape(tokens, {N, cfg_.grid_h(), cfg_.grid_w(), cfg_.embed_dim}),
                   {0, 3, 1, 2});
}

std::vector<Tensor> ViTBackbone::encode(const Tensor& images) {
    Tensor x = patch_embed(images);
    std::vector<Tensor> taps;
    size_t next_tap = 0;
    for (int64_t i = 0; i < cfg_.depth; ++i) {
        x = blocks_[static_cast<size_t>(i)]->forward(x);
        if (next_tap < cfg_.tap_layers.size() && cfg_.tap_layers[next_tap] == i + 1) {
            taps.push_back(tokens_to_map(x));
            ++next_tap;
        }
    }
    return taps;
}

void ViTBackbone::capture_attention(bool on) {
    for (auto& b : blocks_) b->attn.capture_attention(on);
}

std::vector<Tensor> ViTBackbone::last_attentions() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_) out.push_back(b->attn.last_attention());
    return out;
}

}  // namespace poseidon
