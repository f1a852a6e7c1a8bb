#include "core/nn.hpp"

#include <cmath>

namespace poseidon {

// ---------------------------------------------------------------------------
// Module
// ---------------------------------------------------------------------------

void Module::set_training(bool on) {
    training_ = on;
    for (auto& [name, child] : children_) child->set_training(on);
}

void Module::check_fresh_name(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) throw UsageError("duplicate parameter name: " + name);
    }
    for (const auto& b : buffers_) {
        if (b.name == name) throw UsageError("duplicate buffer name: " + name);
    }
    for (const auto& [cname, child] : children_) {
        if (cname == name) throw UsageError("duplicate module name: " + name);
    }
}

Tensor& Module::register_parameter(const std::string& name, Tensor t) {
    check_fresh_name(name);
    t.set_requires_grad(true);
    params_.push_back({name, std::move(t)});
    return params_.back().tensor;
}

Tensor& Module::register_buffer(const std::string& name, Tensor t) {
    check_fresh_name(name);
    buffers_.push_back({name, std::move(t)});
    return buffers_.back().tensor;
}

void Module::register_module(const std::string& name, Module& m) {
    check_fresh_name(name);
    children_.emplace_back(name, &m);
}

void Module::collect(const std::string& prefix, bool buffers,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
    const auto& list = buffers ? buffers_ : params_;
    for (const auto& item : list) {
        out.emplace_back(prefix.empty() ? item.name : prefix + "." + item.name, item.tensor);
    }
    for (const auto& [name, child] : children_) {
        child->collect(prefix.empty() ? name : prefix + "." + name, buffers, out);
    }
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    collect("", false, out);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Module::named_buffers() const {
    std::vector<std::pair<std::string, Tensor>> out;
    collect("", true, out);
    return out;
}

std::vector<Tensor> Module::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

void Module::zero_grad() {
    for (auto& [name, t] : named_parameters()) {
        Tensor tt = t;
        tt.zero_grad();
    }
}

Tensor Module::find_parameter(const std::string& name) const {
    for (auto& [n, t] : named_parameters()) {
        if (n == name) return t;
    }
    return Tensor();
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool with_bias) {
    Tensor w({in, out});
    double* d = w.data();
    for (int64_t i = 0; i < w.numel(); ++i) d[i] = rng.trunc_normal(0.02);
    weight = register_parameter("weight", std::move(w));
    if (with_bias) bias = register_parameter("bias", Tensor::zeros({out}));
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight, bias); }

Conv2d::Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding, Rng& rng,
               bool with_bias)
    : stride_(stride), padding_(padding) {
    Tensor w({out, in, kernel, kernel});
    double* d = w.data();
    for (int64_t i = 0; i < w.numel(); ++i) d[i] = rng.trunc_normal(0.02);
    weight = register_parameter("weight", std::move(w));
    if (with_bias) bias = register_parameter("bias", Tensor::zeros({out}));
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride_, padding_); }

ConvTranspose2d::ConvTranspose2d(int64_t in, int64_t out, int64_t kernel, int64_t stride,
                                 int64_t padding, int64_t output_padding, Rng& rng, bool with_bias)
    : stride_(stride), padding_(padding), output_padding_(output_padding) {
    Tensor w({in, out, kernel, kernel});
    double* d = w.data();
    for (int64_t i = 0; i < w.numel(); ++i) d[i] = rng.trunc_normal(0.02);
    weight = register_parameter("weight", std::move(w));
    if (with_bias) bias = register_parameter("bias", Tensor::zeros({out}));
}

Tensor ConvTranspose2d::forward(const Tensor& x) const {
    return deconv2d(x, weight, bias, stride_, padding_, output_padding_);
}

BatchNorm2d::BatchNorm2d(int64_t channels, double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
    gamma = register_parameter("gamma", Tensor::ones({channels}));
    beta = register_parameter("beta", Tensor::zeros({channels}));
    running_mean = register_buffer("running_mean", Tensor::zeros({channels}));
    running_var = register_buffer("running_var", Tensor::ones({channels}));
}

Tensor BatchNorm2d::forward(const Tensor& x) const {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, training(), momentum_, eps_);
}

LayerNorm::LayerNorm(int64_t width, double eps) : eps_(eps) {
    gamma = register_parameter("gamma", Tensor::ones({width}));
    beta = register_parameter("beta", Tensor::zeros({width}));
}

Tensor LayerNorm::forward(const Tensor& x) const { return layernorm(x, gamma, beta, eps_); }

// ---------------------------------------------------------------------------
// multi-head attention
// ---------------------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(int64_t dim, int64_t heads, Rng& rng)
    : dim_(dim), heads_(heads), dk_(dim / heads) {
    if (heads < 1 || dim % heads != 0) {
        throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    auto init = [&](int64_t rows, int64_t cols) {
        Tensor w({rows, cols});
        double* d = w.data();
        for (int64_t i = 0; i < w.numel(); ++i) d[i] = rng.trunc_normal(0.02);
        return w;
    };
    wq = register_parameter("wq", init(dim, dim));
    bq = register_parameter("bq", Tensor::zeros({dim}));
    wk = register_parameter("wk", init(dim, dim));
    bk = register_parameter("bk", Tensor::zeros({dim}));
    wv = register_parameter("wv", init(dim, dim));
    bv = register_parameter("bv", Tensor::zeros({dim}));
    wo = register_parameter("wo", init(dim, dim));
    bo = register_parameter("bo", Tensor::zeros({dim}));
}

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& kv_in) {
    if (q_in.dim() != 3 || kv_in.dim() != 3) {
        throw DimensionError("attention expects [B,S,C] tokens, got " + shape_str(q_in.shape()) +
                             " and " + shape_str(kv_in.shape()));
    }
    if (q_in.size(2) != dim_ || kv_in.size(2) != dim_ || q_in.size(0) != kv_in.size(0)) {
        throw DimensionError("attention shape mismatch: " + shape_str(q_in.shape()) + " vs " +
                             shape_str(kv_in.shape()) + " at width " + std::to_string(dim_));
    }
    const int64_t B = q_in.size(0);
    const int64_t Sq = q_in.size(1);
    const int64_t Skv = kv_in.size(1);

    auto split_heads = [&](const Tensor& t, int64_t S) {
        // [B,S,C] -> [B,heads,S,dk]
        return permute(reshape(t, {B, S, heads_, dk_}), {0, 2, 1, 3});
    };

    Tensor q = split_heads(linear(q_in, wq, bq), Sq);
    Tensor k = split_heads(linear(kv_in, wk, bk), Skv);
    Tensor v = split_heads(linear(kv_in, wv, bv), Skv);

    Tensor logits = mul_scalar(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(static_cast<double>(dk_)));
    Tensor probs = softmax(logits, -1);
    if (capture_) last_attn_ = probs.detach();

    Tensor ctx = matmul(probs, v);                           // [B,heads,Sq,dk]
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, Sq, dim_});  // concat heads
    return linear(ctx, wo, bo);
}

}  // namespace poseidon
