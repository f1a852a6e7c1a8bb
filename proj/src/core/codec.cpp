#include "core/codec.hpp"

#include <cmath>

namespace poseidon {

HeatmapStack encode_target(const Pose& pose, const Affine2D& image_to_crop, int64_t heat_h,
                           int64_t heat_w, double stride, double sigma) {
    if (heat_h <= 0 || heat_w <= 0) throw DimensionError("encode_target: empty heatmap grid");
    if (stride <= 0.0 || sigma <= 0.0) throw UsageError("encode_target: stride and sigma must be positive");
    const int64_t K = pose.joints();
    HeatmapStack out;
    out.maps = Tensor::zeros({K, heat_h, heat_w});
    out.stride = stride;
    out.crop_to_image = image_to_crop.invert();
    out.mask.assign(static_cast<size_t>(K), false);

    double* data = out.maps.data();
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (int64_t k = 0; k < K; ++k) {
        const Keypoint& kp = pose.points[static_cast<size_t>(k)];
        if (!kp.visible) continue;
        const Point crop = image_to_crop.apply({kp.x, kp.y});
        const double hx = crop.x / stride;
        const double hy = crop.y / stride;
        const int64_t cx = std::llround(hx);
        const int64_t cy = std::llround(hy);
        if (cx < 0 || cx >= heat_w || cy < 0 || cy >= heat_h) continue;  // off-map: zero + masked
        out.mask[static_cast<size_t>(k)] = true;
        double* plane = data + k * heat_h * heat_w;
        for (int64_t y = 0; y < heat_h; ++y) {
            const double dy = static_cast<double>(y - cy);
            for (int64_t x = 0; x < heat_w; ++x) {
                const double dx = static_cast<double>(x - cx);
                plane[y * heat_w + x] = std::exp(-(dx * dx + dy * dy) * inv2s2);
            }
        }
    }
    return out;
}

namespace {

Keypoint decode_one(const double* plane, int64_t heat_h, int64_t heat_w, double stride,
                    const Affine2D& crop_to_image) {
    int64_t best = 0;
    double peak = plane[0];
    const int64_t n = heat_h * heat_w;
    for (int64_t i = 1; i < n; ++i) {
        if (plane[i] > peak) {  // strict: ties keep the lowest flat index
            peak = plane[i];
            best = i;
        }
    }
    Keypoint kp;
    if (peak <= 0.0) {
        const Point img = crop_to_image.apply(
            {static_cast<double>(heat_w) / 2.0 * stride, static_cast<double>(heat_h) / 2.0 * stride});
        kp.x = img.x;
        kp.y = img.y;
        kp.confidence = 0.0;
        kp.visible = false;
        return kp;
    }
    const int64_t by = best / heat_w;
    const int64_t bx = best % heat_w;
    double fx = static_cast<double>(bx);
    double fy = static_cast<double>(by);
    // quarter-cell refinement toward the strictly larger neighbor
    if (bx > 0 && bx + 1 < heat_w) {
        const double left = plane[by * heat_w + bx - 1];
        const double right = plane[by * heat_w + bx + 1];
        if (right > left) {
            fx += 0.25;
        } else if (left > right) {
            fx -= 0.25;
        }
    }
    if (by > 0 && by + 1 < heat_h) {
        const double up = plane[(by - 1) * heat_w + bx];
        const double down = plane[(by + 1) * heat_w + bx];
        if (down > up) {
            fy += 0.25;
        } else if (up > down) {
            fy -= 0.25;
        }
    }
    const Point img = crop_to_image.apply({fx * stride, fy * stride});
    kp.x = img.x;
    kp.y = img.y;
    kp.confidence = std::min(1.0, std::max(0.0, peak));
    kp.visible = true;
    return kp;
}

}  // namespace

Pose decode_pose(const HeatmapStack& stack) {
    const int64_t K = stack.maps.size(0);
    const int64_t heat_h = stack.maps.size(1);
    const int64_t heat_w = stack.maps.size(2);
    Pose pose;
    pose.points.reserve(static_cast<size_t>(K));
    const double* data = stack.maps.data();
    for (int64_t k = 0; k < K; ++k) {
        pose.points.push_back(
            decode_one(data + k * heat_h * heat_w, heat_h, heat_w, stack.stride, stack.crop_to_image));
    }
    return pose;
}

Pose decode_pose_from(const Tensor& batch_maps, int64_t batch_index, double stride,
                      const Affine2D& crop_to_image) {
    if (batch_maps.dim() != 4) {
        throw DimensionError("decode_pose_from: expected [B,K,H,W], got " +
                             shape_str(batch_maps.shape()));
    }
    const int64_t K = batch_maps.size(1);
    const int64_t heat_h = batch_maps.size(2);
    const int64_t heat_w = batch_maps.size(3);
    Pose pose;
    pose.points.reserve(static_cast<size_t>(K));
    const double* data = batch_maps.data() + batch_index * K * heat_h * heat_w;
    for (int64_t k = 0; k < K; ++k) {
        pose.points.push_back(
            decode_one(data + k * heat_h * heat_w, heat_h, heat_w, stride, crop_to_image));
    }
    return pose;
}

}  // namespace poseidon
