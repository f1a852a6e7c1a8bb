#pragma once

#include <cmath>

#include "core/common.hpp"

namespace poseidon {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

// Axis-aligned box as (center, width, height).
struct BBox {
    double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

    double x0() const { return cx - w / 2.0; }
    double y0() const { return cy - h / 2.0; }
    double x1() const { return cx + w / 2.0; }
    double y1() const { return cy + h / 2.0; }

    bool contains(const Point& p) const {
        return p.x >= x0() && p.x <= x1() && p.y >= y0() && p.y <= y1();
    }
};

// 2x3 affine transform: [x'; y'] = [a b; d e] [x; y] + [c; f]
struct Affine2D {
    double a = 1.0, b = 0.0, c = 0.0;
    double d = 0.0, e = 1.0, f = 0.0;

    Point apply(const Point& p) const {
        return {a * p.x + b * p.y + c, d * p.x + e * p.y + f};
    }

    // this∘other: applies `other` first
    Affine2D compose(const Affine2D& o) const {
        Affine2D r;
        r.a = a * o.a + b * o.d;
        r.b = a * o.b + b * o.e;
        r.c = a * o.c + b * o.f + c;
        r.d = d * o.a + e * o.d;
        r.e = d * o.b + e * o.e;
        r.f = d * o.c + e * o.f + f;
        return r;
    }

    Affine2D invert() const {
        const double det = a * e - b * d;
        if (std::fabs(det) < 1e-30) throw NumericError("affine transform is singular");
        Affine2D r;
        r.a = e / det;
        r.b = -b / det;
        r.d = -d / det;
        r.e = a / det;
        r.c = -(r.a * c + r.b * f);
        r.f = -(r.d * c + r.e * f);
        return r;
    }

    static Affine2D identity() { return {}; }

    static Affine2D translation(double tx, double ty) { return {1, 0, tx, 0, 1, ty}; }

    static Affine2D scaling(double sx, double sy) { return {sx, 0, 0, 0, sy, 0}; }

    static Affine2D rotation(double radians) {
        const double co = std::cos(radians), si = std::sin(radians);
        return {co, -si, 0, si, co, 0};
    }
};

// Scales width and height by `delta` about the box center.
inline BBox enlarge_bbox(const BBox& b, double delta) {
    if (b.w <= 0.0 || b.h <= 0.0) throw UsageError("enlarge_bbox: box extents must be positive");
    if (delta < 1.0) throw UsageError("enlarge_bbox: delta must be >= 1");
    return {b.cx, b.cy, b.w * delta, b.h * delta};
}

// Clips the box to [0,w]x[0,h] image bounds, preserving the intersection.
inline BBox clip_bbox(const BBox& b, double img_w, double img_h) {
    const double x0 = std::max(0.0, b.x0());
    const double y0 = std::max(0.0, b.y0());
    const double x1 = std::min(img_w, b.x1());
    const double y1 = std::min(img_h, b.y1());
    if (x1 <= x0 || y1 <= y0) throw UsageError("clip_bbox: box lies outside the image");
    return {(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0};
}

// Grows the shorter side so w:h matches aspect (w/h), keeping the center.
inline BBox fix_aspect(const BBox& b, double aspect) {
    BBox r = b;
    if (r.w < r.h * aspect) {
        r.w = r.h * aspect;
    } else {
        r.h = r.w / aspect;
    }
    return r;
}

}  // namespace poseidon
