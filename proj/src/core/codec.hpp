#pragma once

#include <vector>

#include "core/geometry.hpp"
#include "core/tensor.hpp"

namespace poseidon {

struct Keypoint {
    double x = 0.0;  // image-space pixels
    double y = 0.0;
    double confidence = 0.0;
    bool visible = false;
};

struct Pose {
    std::vector<Keypoint> points;

    int64_t joints() const { return static_cast<int64_t>(points.size()); }
};

// Per-sample stack of K joint heatmaps plus everything needed to map peaks
// back to image coordinates: the heatmap-cell stride in crop pixels and the
// crop-to-image transform.
struct HeatmapStack {
    Tensor maps;  // [K, Hh, Wh]
    double stride = 1.0;
    Affine2D crop_to_image;
    std::vector<bool> mask;  // per joint: participates in the loss
};

// Gaussian target encoding. Joint coordinates are image-space; they are
// mapped through image_to_crop, then into heatmap cells at `stride` crop
// pixels per cell. Each visible, in-bounds joint gets an unnormalized
// Gaussian with peak 1.0 at the nearest cell; everything else is a zero map
// with the mask cleared.
HeatmapStack encode_target(const Pose& pose, const Affine2D& image_to_crop, int64_t heat_h,
                           int64_t heat_w, double stride, double sigma);

// Peak decoding: per joint argmax (ties -> lowest flat index), quarter-cell
// offset toward a strictly larger neighbor, then stride + crop transform back
// to image pixels. An all-nonpositive map decodes to the map center with
// confidence 0 and visible=false.
Pose decode_pose(const HeatmapStack& stack);

// decode_pose over one sample of a batched prediction [B,K,Hh,Wh]
Pose decode_pose_from(const Tensor& batch_maps, int64_t batch_index, double stride,
                      const Affine2D& crop_to_image);

}  // namespace poseidon
