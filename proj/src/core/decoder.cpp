#include "core/decoder.hpp"

namespace poseidon {

DecodeHead::DecodeHead(int64_t channels, int64_t joints, Rng& rng)
    : joints_(joints),
      deconv1_(channels, channels, 4, 2, 1, 0, rng),
      bn1_(channels),
      deconv2_(channels, channels, 4, 2, 1, 0, rng),
      bn2_(channels),
      head_(channels, joints, 3, 1, 1, rng) {
    if (joints <= 0) throw ConfigError("decoder: joint count must be positive");
    register_module("deconv1", deconv1_);
    register_module("bn1", bn1_);
    register_module("deconv2", deconv2_);
    register_module("bn2", bn2_);
    register_module("head", head_);
}

Tensor DecodeHead::forward(const Tensor& x) const {
    Tensor h = relu(bn1_.forward(deconv1_.forward(x)));
    h = relu(bn2_.forward(deconv2_.forward(h)));
    return head_.forward(h);
}

}  // namespace poseidon
