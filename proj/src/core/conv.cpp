#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace poseidon {

namespace {

// Gathers image [C,IH,IW] into col [C*kh*kw, OH*OW] where output cell (oy,ox)
// reads image[c, oy*s-p+ki, ox*s-p+kj] (zero outside). col2im is the adjoint
// scatter; the pair is shared by conv2d, deconv2d, and both backward passes.
void im2col(const double* img, int64_t C, int64_t IH, int64_t IW, int64_t kh, int64_t kw,
            int64_t s, int64_t p, int64_t OH, int64_t OW, double* col) {
    for (int64_t c = 0; c < C; ++c) {
        const double* plane = img + c * IH * IW;
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                double* crow = col + ((c * kh + ki) * kw + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t iy = oy * s - p + ki;
                    if (iy < 0 || iy >= IH) {
                        std::fill(crow + oy * OW, crow + (oy + 1) * OW, 0.0);
                        continue;
                    }
                    const double* irow = plane + iy * IW;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        const int64_t ix = ox * s - p + kj;
                        crow[oy * OW + ox] = (ix >= 0 && ix < IW) ? irow[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, int64_t C, int64_t IH, int64_t IW, int64_t kh, int64_t kw,
            int64_t s, int64_t p, int64_t OH, int64_t OW, double* img, bool accumulate) {
    if (!accumulate) std::fill(img, img + C * IH * IW, 0.0);
    for (int64_t c = 0; c < C; ++c) {
        double* plane = img + c * IH * IW;
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const double* crow = col + ((c * kh + ki) * kw + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t iy = oy * s - p + ki;
                    if (iy < 0 || iy >= IH) continue;
                    double* irow = plane + iy * IW;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        const int64_t ix = ox * s - p + kj;
                        if (ix >= 0 && ix < IW) irow[ix] += crow[oy * OW + ox];
                    }
                }
            }
        }
    }
}

void check4d(const Tensor& t, const char* op, const char* which) {
    if (!t.defined() || t.dim() != 4) {
        throw DimensionError(std::string(op) + ": " + which + " must be rank 4, got " +
                             shape_str(t.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride,
              int64_t padding) {
    check4d(x, "conv2d", "input");
    check4d(w, "conv2d", "weight");
    if (stride < 1 || padding < 0) throw UsageError("conv2d: stride must be >= 1 and padding >= 0");
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t O = w.size(0), kh = w.size(2), kw = w.size(3);
    if (w.size(1) != C) {
        throw DimensionError("conv2d: input channels " + std::to_string(C) +
                             " do not match weight " + shape_str(w.shape()));
    }
    if (kh > H + 2 * padding || kw > W + 2 * padding) {
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                             shape_str(x.shape()));
    }
    const int64_t OH = (H + 2 * padding - kh) / stride + 1;
    const int64_t OW = (W + 2 * padding - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) {
        throw DimensionError("conv2d: non-positive output extent for input " + shape_str(x.shape()));
    }
    if (bias.defined() && bias.numel() != O) {
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " vs " +
                             std::to_string(O) + " output channels");
    }

    const int64_t ckk = C * kh * kw;
    const int64_t L = OH * OW;
    std::vector<double> out(static_cast<size_t>(B * O * L));
    const double* px = x.data();
    const double* pw = w.data();
    const double* pbias = bias.defined() ? bias.data() : nullptr;

    parallel_for(0, B, 1, [&](int64_t lo, int64_t hi) {
        std::vector<double> col(static_cast<size_t>(ckk * L));
        for (int64_t b = lo; b < hi; ++b) {
            im2col(px + b * C * H * W, C, H, W, kh, kw, stride, padding, OH, OW, col.data());
            double* ob = out.data() + b * O * L;
            detail::mm(pw, col.data(), ob, O, ckk, L, false);
            if (pbias) {
                for (int64_t o = 0; o < O; ++o) {
                    const double bv = pbias[o];
                    for (int64_t l = 0; l < L; ++l) ob[o * L + l] += bv;
                }
            }
        }
    });

    Tensor tx = x, tw = w, tb = bias;
    auto backward = [tx, tw, tb, B, C, H, W, O, kh, kw, stride, padding, OH, OW, ckk,
                     L](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        auto iw = tw.impl();
        const double* g = o.grad.data();
        const double* pw = iw->values.data();
        if (ix->requires_grad) {
            ix->ensure_grad();
            double* gx = ix->grad.data();
            parallel_for(0, B, 1, [&](int64_t lo, int64_t hi) {
                std::vector<double> dcol(static_cast<size_t>(ckk * L));
                for (int64_t b = lo; b < hi; ++b) {
                    detail::mm_at(pw, g + b * O * L, dcol.data(), ckk, O, L, false);
                    col2im(dcol.data(), C, H, W, kh, kw, stride, padding, OH, OW, gx + b * C * H * W,
                           true);
                }
            });
        }
        if (iw->requires_grad) {
            iw->ensure_grad();
            double* gw = iw->grad.data();
            const double* px = ix->values.data();
            std::vector<double> col(static_cast<size_t>(ckk * L));
            for (int64_t b = 0; b < B; ++b) {
                im2col(px + b * C * H * W, C, H, W, kh, kw, stride, padding, OH, OW, col.data());
                detail::mm_bt(g + b * O * L, col.data(), gw, O, L, ckk, true);
            }
        }
        if (tb.defined() && tb.impl()->requires_grad) {
            auto ib = tb.impl();
            ib->ensure_grad();
            double* gb = ib->grad.data();
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t oc = 0; oc < O; ++oc) {
                    double acc = 0.0;
                    const double* row = g + (b * O + oc) * L;
                    for (int64_t l = 0; l < L; ++l) acc += row[l];
                    gb[oc] += acc;
                }
            }
        }
    };

    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op_result({B, O, OH, OW}, std::move(out), std::move(parents), "conv2d",
                          std::move(backward));
}

// ---------------------------------------------------------------------------
// deconv2d (transposed conv; adjoint of conv2d with the same geometry)
// ---------------------------------------------------------------------------

Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride,
                int64_t padding, int64_t output_padding) {
    check4d(x, "deconv2d", "input");
    check4d(w, "deconv2d", "weight");
    if (stride < 1 || padding < 0) throw UsageError("deconv2d: stride must be >= 1 and padding >= 0");
    if (output_padding < 0 || output_padding >= stride) {
        throw DimensionError("deconv2d: output_padding must be in [0, stride)");
    }
    const int64_t B = x.size(0), I = x.size(1), h = x.size(2), wdt = x.size(3);
    const int64_t O = w.size(1), kh = w.size(2), kw = w.size(3);
    if (w.size(0) != I) {
        throw DimensionError("deconv2d: input channels " + std::to_string(I) +
                             " do not match weight " + shape_str(w.shape()));
    }
    const int64_t OH = (h - 1) * stride - 2 * padding + kh + output_padding;
    const int64_t OW = (wdt - 1) * stride - 2 * padding + kw + output_padding;
    if (OH <= 0 || OW <= 0) {
        throw DimensionError("deconv2d: inconsistent output size for input " + shape_str(x.shape()));
    }
    if (bias.defined() && bias.numel() != O) {
        throw DimensionError("deconv2d: bias shape " + shape_str(bias.shape()) + " vs " +
                             std::to_string(O) + " output channels");
    }

    const int64_t okk = O * kh * kw;
    const int64_t L = h * wdt;
    std::vector<double> out(static_cast<size_t>(B * O * OH * OW));
    const double* px = x.data();
    const double* pw = w.data();  // [I, O*kh*kw] viewed flat
    const double* pbias = bias.defined() ? bias.data() : nullptr;

    parallel_for(0, B, 1, [&](int64_t lo, int64_t hi) {
        std::vector<double> tmp(static_cast<size_t>(okk * L));
        for (int64_t b = lo; b < hi; ++b) {
            detail::mm_at(pw, px + b * I * L, tmp.data(), okk, I, L, false);
            double* ob = out.data() + b * O * OH * OW;
            col2im(tmp.data(), O, OH, OW, kh, kw, stride, padding, h, wdt, ob, false);
            if (pbias) {
                for (int64_t oc = 0; oc < O; ++oc) {
                    const double bv = pbias[oc];
                    double* plane = ob + oc * OH * OW;
                    for (int64_t l = 0; l < OH * OW; ++l) plane[l] += bv;
                }
            }
        }
    });

    Tensor tx = x, tw = w, tb = bias;
    auto backward = [tx, tw, tb, B, I, h, wdt, O, kh, kw, stride, padding, OH, OW, okk,
                     L](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        auto iw = tw.impl();
        const double* g = o.grad.data();
        const double* pw = iw->values.data();
        if (ix->requires_grad) {
            ix->ensure_grad();
            double* gx = ix->grad.data();
            parallel_for(0, B, 1, [&](int64_t lo, int64_t hi) {
                std::vector<double> col(static_cast<size_t>(okk * L));
                for (int64_t b = lo; b < hi; ++b) {
                    im2col(g + b * O * OH * OW, O, OH, OW, kh, kw, stride, padding, h, wdt,
                           col.data());
                    detail::mm(pw, col.data(), gx + b * I * L, I, okk, L, true);
                }
            });
        }
        if (iw->requires_grad) {
            iw->ensure_grad();
            double* gw = iw->grad.data();
            const double* px = ix->values.data();
            std::vector<double> col(static_cast<size_t>(okk * L));
            for (int64_t b = 0; b < B; ++b) {
                im2col(g + b * O * OH * OW, O, OH, OW, kh, kw, stride, padding, h, wdt, col.data());
                detail::mm_bt(px + b * I * L, col.data(), gw, I, L, okk, true);
            }
        }
        if (tb.defined() && tb.impl()->requires_grad) {
            auto ib = tb.impl();
            ib->ensure_grad();
            double* gb = ib->grad.data();
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t oc = 0; oc < O; ++oc) {
                    double acc = 0.0;
                    const double* plane = g + (b * O + oc) * OH * OW;
                    for (int64_t l = 0; l < OH * OW; ++l) acc += plane[l];
                    gb[oc] += acc;
                }
            }
        }
    };

    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op_result({B, O, OH, OW}, std::move(out), std::move(parents), "deconv2d",
                          std::move(backward));
}

// ---------------------------------------------------------------------------
// adaptive average pooling
// ---------------------------------------------------------------------------

Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w) {
    check4d(x, "adaptive_avg_pool2d", "input");
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    if (out_h <= 0 || out_w <= 0) {
        throw DimensionError("adaptive_avg_pool2d: zero output extent");
    }
    if (out_h > H || out_w > W) {
        throw DimensionError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                             std::to_string(out_w) + " larger than input " + shape_str(x.shape()));
    }
    // bin edges: start=floor(i*H/out), end=ceil((i+1)*H/out)
    auto bin = [](int64_t i, int64_t in, int64_t out, int64_t& s, int64_t& e) {
        s = i * in / out;
        e = ((i + 1) * in + out - 1) / out;
    };

    std::vector<double> out(static_cast<size_t>(B * C * out_h * out_w));
    const double* px = x.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = px + bc * H * W;
        double* oplane = out.data() + bc * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            int64_t y0, y1;
            bin(oy, H, out_h, y0, y1);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                int64_t x0, x1;
                bin(ox, W, out_w, x0, x1);
                double acc = 0.0;
                for (int64_t iy = y0; iy < y1; ++iy) {
                    for (int64_t ix = x0; ix < x1; ++ix) acc += plane[iy * W + ix];
                }
                oplane[oy * out_w + ox] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
            }
        }
    }

    Tensor tx = x;
    auto backward = [tx, B, C, H, W, out_h, out_w, bin](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        double* gx = ix->grad.data();
        const double* g = o.grad.data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            double* gplane = gx + bc * H * W;
            const double* oplane = g + bc * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                int64_t y0, y1;
                bin(oy, H, out_h, y0, y1);
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    int64_t x0, x1;
                    bin(ox, W, out_w, x0, x1);
                    const double gv =
                        oplane[oy * out_w + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
                    for (int64_t iy = y0; iy < y1; ++iy) {
                        for (int64_t ix2 = x0; ix2 < x1; ++ix2) gplane[iy * W + ix2] += gv;
                    }
                }
            }
        }
    };
    return make_op_result({B, C, out_h, out_w}, std::move(out), {x}, "adaptive_avg_pool2d",
                          std::move(backward));
}

// ---------------------------------------------------------------------------
// bilinear interpolation (align_corners=false)
// ---------------------------------------------------------------------------

namespace {

struct LerpAxis {
    std::vector<int64_t> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

LerpAxis make_lerp(int64_t in, int64_t out) {
    LerpAxis ax;
    ax.i0.resize(static_cast<size_t>(out));
    ax.i1.resize(static_cast<size_t>(out));
    ax.w1.resize(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
        src = std::max(0.0, std::min(static_cast<double>(in - 1), src));
        const int64_t i0 = static_cast<int64_t>(std::floor(src));
        const int64_t i1 = std::min(i0 + 1, in - 1);
        ax.i0[static_cast<size_t>(i)] = i0;
        ax.i1[static_cast<size_t>(i)] = i1;
        ax.w1[static_cast<size_t>(i)] = src - static_cast<double>(i0);
    }
    return ax;
}

}  // namespace

Tensor interpolate_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
    check4d(x, "interpolate_bilinear", "input");
    if (out_h < 1 || out_w < 1) throw DimensionError("interpolate_bilinear: output extents must be >= 1");
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const LerpAxis ay = make_lerp(H, out_h);
    const LerpAxis axx = make_lerp(W, out_w);

    std::vector<double> out(static_cast<size_t>(B * C * out_h * out_w));
    const double* px = x.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = px + bc * H * W;
        double* oplane = out.data() + bc * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const int64_t y0 = ay.i0[oy], y1 = ay.i1[oy];
            const double wy = ay.w1[oy];
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const int64_t x0 = axx.i0[ox], x1 = axx.i1[ox];
                const double wx = axx.w1[ox];
                const double v00 = plane[y0 * W + x0];
                const double v01 = plane[y0 * W + x1];
                const double v10 = plane[y1 * W + x0];
                const double v11 = plane[y1 * W + x1];
                oplane[oy * out_w + ox] = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                          wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    }

    Tensor tx = x;
    auto backward = [tx, B, C, H, W, out_h, out_w, ay, axx](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        double* gx = ix->grad.data();
        const double* g = o.grad.data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            double* gplane = gx + bc * H * W;
            const double* oplane = g + bc * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const int64_t y0 = ay.i0[oy], y1 = ay.i1[oy];
                const double wy = ay.w1[oy];
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const int64_t x0 = axx.i0[ox], x1 = axx.i1[ox];
                    const double wx = axx.w1[ox];
                    const double gv = oplane[oy * out_w + ox];
                    gplane[y0 * W + x0] += gv * (1 - wy) * (1 - wx);
                    gplane[y0 * W + x1] += gv * (1 - wy) * wx;
                    gplane[y1 * W + x0] += gv * wy * (1 - wx);
                    gplane[y1 * W + x1] += gv * wy * wx;
                }
            }
        }
    };
    return make_op_result({B, C, out_h, out_w}, std::move(out), {x}, "interpolate_bilinear",
                          std::move(backward));
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                   Tensor running_var, bool training, double momentum, double eps) {
    check4d(x, "batchnorm2d", "input");
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C) {
        throw DimensionError("batchnorm2d: parameter shapes do not match " + std::to_string(C) +
                             " channels");
    }
    if (training && B < 2) {
        throw UsageError("batchnorm2d: training mode requires batch size >= 2, got " +
                         std::to_string(B));
    }

    const int64_t plane = H * W;
    const int64_t n = B * plane;
    std::vector<double> mean_c(static_cast<size_t>(C)), invstd_c(static_cast<size_t>(C));
    const double* px = x.data();

    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double* pl = px + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) acc += pl[i];
            }
            const double mu = acc / static_cast<double>(n);
            double var = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double* pl = px + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = pl[i] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(n);
            mean_c[static_cast<size_t>(c)] = mu;
            invstd_c[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
            // running stats track batch statistics (var unbiased, torch-style)
            double* rm = running_mean.data();
            double* rv = running_var.data();
            rm[c] = (1.0 - momentum) * rm[c] + momentum * mu;
            const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1)
                                          : var;
            rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased;
        }
    } else {
        const double* rm = running_mean.data();
        const double* rv = running_var.data();
        for (int64_t c = 0; c < C; ++c) {
            mean_c[static_cast<size_t>(c)] = rm[c];
            invstd_c[static_cast<size_t>(c)] = 1.0 / std::sqrt(rv[c] + eps);
        }
    }

    std::vector<double> xhat(static_cast<size_t>(B * C * plane));
    std::vector<double> out(static_cast<size_t>(B * C * plane));
    const double* pg = gamma.data();
    const double* pb = beta.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const double mu = mean_c[static_cast<size_t>(c)];
            const double is = invstd_c[static_cast<size_t>(c)];
            const double gc = pg[c], bc = pb[c];
            const double* pl = px + (b * C + c) * plane;
            double* xh = xhat.data() + (b * C + c) * plane;
            double* op = out.data() + (b * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const double h = (pl[i] - mu) * is;
                xh[i] = h;
                op[i] = gc * h + bc;
            }
        }
    }

    Tensor tx = x, tg = gamma, tb = beta;
    auto backward = [tx, tg, tb, B, C, plane, n, training, xhat = std::move(xhat),
                     invstd_c](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        auto ig = tg.impl();
        auto ib = tb.impl();
        const double* g = o.grad.data();
        const double* pgm = ig->values.data();
        const bool need_x = ix->requires_grad;
        const bool need_g = ig->requires_grad;
        const bool need_b = ib->requires_grad;
        if (need_x) ix->ensure_grad();
        if (need_g) ig->ensure_grad();
        if (need_b) ib->ensure_grad();

        for (int64_t c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double* gr = g + (b * C + c) * plane;
                const double* xh = xhat.data() + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum_g += gr[i];
                    sum_gx += gr[i] * xh[i];
                }
            }
            if (need_g) ig->grad[static_cast<size_t>(c)] += sum_gx;
            if (need_b) ib->grad[static_cast<size_t>(c)] += sum_g;
            if (need_x) {
                const double is = invstd_c[static_cast<size_t>(c)];
                const double gc = pgm[c];
                if (training) {
                    const double mg = sum_g / static_cast<double>(n);
                    const double mgx = sum_gx / static_cast<double>(n);
                    for (int64_t b = 0; b < B; ++b) {
                        const double* gr = g + (b * C + c) * plane;
                        const double* xh = xhat.data() + (b * C + c) * plane;
                        double* gx = ix->grad.data() + (b * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            gx[i] += gc * is * (gr[i] - mg - xh[i] * mgx);
                        }
                    }
                } else {
                    for (int64_t b = 0; b < B; ++b) {
                        const double* gr = g + (b * C + c) * plane;
                        double* gx = ix->grad.data() + (b * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) gx[i] += gc * is * gr[i];
                    }
                }
            }
        }
    };
    return make_op_result(x.shape(), std::move(out), {x, gamma, beta}, "batchnorm2d",
                          std::move(backward));
}

// ---------------------------------------------------------------------------
// layer normalization over the last axis
// ---------------------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (!x.defined() || x.dim() < 1) throw DimensionError("layernorm: input must have rank >= 1");
    const int64_t D = x.size(-1);
    if (gamma.numel() != D || beta.numel() != D) {
        throw DimensionError("layernorm: affine shape mismatch, width " + std::to_string(D));
    }
    const int64_t rows = x.numel() / D;
    std::vector<double> out(static_cast<size_t>(x.numel()));
    std::vector<double> xhat(static_cast<size_t>(x.numel()));
    std::vector<double> invstd(static_cast<size_t>(rows));
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * D;
        double mu = 0.0;
        for (int64_t j = 0; j < D; ++j) mu += row[j];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (int64_t j = 0; j < D; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<size_t>(r)] = is;
        double* xh = xhat.data() + r * D;
        double* op = out.data() + r * D;
        for (int64_t j = 0; j < D; ++j) {
            const double h = (row[j] - mu) * is;
            xh[j] = h;
            op[j] = pg[j] * h + pb[j];
        }
    }

    Tensor tx = x, tg = gamma, tb = beta;
    auto backward = [tx, tg, tb, rows, D, xhat = std::move(xhat),
                     invstd = std::move(invstd)](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        auto ig = tg.impl();
        auto ib = tb.impl();
        const double* g = o.grad.data();
        const double* pgm = ig->values.data();
        const bool need_x = ix->requires_grad;
        const bool need_g = ig->requires_grad;
        const bool need_b = ib->requires_grad;
        if (need_x) ix->ensure_grad();
        if (need_g) ig->ensure_grad();
        if (need_b) ib->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const double* gr = g + r * D;
            const double* xh = xhat.data() + r * D;
            if (need_g || need_b) {
                for (int64_t j = 0; j < D; ++j) {
                    if (need_g) ig->grad[static_cast<size_t>(j)] += gr[j] * xh[j];
                    if (need_b) ib->grad[static_cast<size_t>(j)] += gr[j];
                }
            }
            if (need_x) {
                double sum_gg = 0.0, sum_ggx = 0.0;
                for (int64_t j = 0; j < D; ++j) {
                    const double gg = gr[j] * pgm[j];
                    sum_gg += gg;
                    sum_ggx += gg * xh[j];
                }
                const double is = invstd[static_cast<size_t>(r)];
                const double mg = sum_gg / static_cast<double>(D);
                const double mgx = sum_ggx / static_cast<double>(D);
                double* gx = ix->grad.data() + r * D;
                for (int64_t j = 0; j < D; ++j) {
                    const double gg = gr[j] * pgm[j];
                    gx[j] += is * (gg - mg - xh[j] * mgx);
                }
            }
        }
    };
    return make_op_result(x.shape(), std::move(out), {x, gamma, beta}, "layernorm",
                          std::move(backward));
}

// ---------------------------------------------------------------------------
// masked MSE
// ---------------------------------------------------------------------------

Tensor mse_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    check4d(pred, "mse_loss", "pred");
    check4d(target, "mse_loss", "target");
    if (pred.shape() != target.shape()) {
        throw DimensionError("mse_loss: shapes differ, " + shape_str(pred.shape()) + " vs " +
                             shape_str(target.shape()));
    }
    const int64_t B = pred.size(0), K = pred.size(1), H = pred.size(2), W = pred.size(3);
    if (!mask.defined() || mask.dim() != 2 || mask.size(0) != B || mask.size(1) != K) {
        throw DimensionError("mse_loss: mask must be [" + std::to_string(B) + "," +
                             std::to_string(K) + "], got " + shape_str(mask.shape()));
    }
    const int64_t plane = H * W;
    const double* pp = pred.data();
    const double* pt = target.data();
    const double* pm = mask.data();

    int64_t active = 0;
    for (int64_t i = 0; i < B * K; ++i) {
        if (pm[i] > 0.5) ++active;
    }
    if (active == 0) {
        log_warn("mse_loss: all joints masked out, returning zero loss");
        return Tensor::scalar(0.0);
    }
    const double count = static_cast<double>(active * plane);

    double acc = 0.0;
    for (int64_t i = 0; i < B * K; ++i) {
        if (pm[i] <= 0.5) continue;
        const double* pr = pp + i * plane;
        const double* tr = pt + i * plane;
        for (int64_t j = 0; j < plane; ++j) {
            const double d = pr[j] - tr[j];
            acc += d * d;
        }
    }
    acc /= count;

    Tensor tp = pred, tt = target, tm = mask;
    auto backward = [tp, tt, tm, B, K, plane, count](const detail::TensorImpl& o) {
        auto ip = tp.impl();
        auto it = tt.impl();
        const double g = o.grad[0];
        const double* pp = ip->values.data();
        const double* pt = it->values.data();
        const double* pm = tm.impl()->values.data();
        const bool need_p = ip->requires_grad;
        const bool need_t = it->requires_grad;
        if (need_p) ip->ensure_grad();
        if (need_t) it->ensure_grad();
        const double scale = 2.0 * g / count;
        for (int64_t i = 0; i < B * K; ++i) {
            if (pm[i] <= 0.5) continue;
            const double* pr = pp + i * plane;
            const double* tr = pt + i * plane;
            for (int64_t j = 0; j < plane; ++j) {
                const double d = scale * (pr[j] - tr[j]);
                if (need_p) ip->grad[static_cast<size_t>(i * plane + j)] += d;
                if (need_t) it->grad[static_cast<size_t>(i * plane + j)] -= d;
            }
        }
    };
    return make_op_result(Shape{}, {acc}, {pred, target, mask}, "mse_loss", std::move(backward));
}

}  // namespace poseidon
