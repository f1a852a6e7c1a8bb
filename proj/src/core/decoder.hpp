#pragma once

#include "core/nn.hpp"

namespace poseidon {

// Heatmap head: two (deconv -> BN -> ReLU) blocks, each upsampling 2x, then
// a 3x3 conv to K joint channels. [B,C,Hp,Wp] -> [B,K,4Hp,4Wp].
class DecodeHead : public Module {
  public:
    DecodeHead(int64_t channels, int64_t joints, Rng& rng);
    Tensor forward(const Tensor& x) const;

    int64_t joints() const { return joints_; }

  private:
    int64_t joints_;
    ConvTranspose2d deconv1_;
    BatchNorm2d bn1_;
    ConvTranspose2d deconv2_;
    BatchNorm2d bn2_;
    Conv2d head_;
};

}  // namespace poseidon
