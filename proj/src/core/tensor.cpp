#include "core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace poseidon {

// ---------------------------------------------------------------------------
// shape helpers
// ---------------------------------------------------------------------------

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

static void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor operand");
}

static std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 0);
    int64_t acc = 1;
    for (int64_t i = static_cast<int64_t>(shape.size()) - 1; i >= 0; --i) {
        strides[static_cast<size_t>(i)] = acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return strides;
}

// ---------------------------------------------------------------------------
// grad mode
// ---------------------------------------------------------------------------

namespace {
thread_local bool t_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape) {
    const int64_t n = numel_of(shape);
    if (n < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->values.assign(static_cast<size_t>(n), 0.0);
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
    return t;
}

Tensor Tensor::scalar(double value) {
    Tensor t(Shape{});
    t.impl_->values[0] = value;
    return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError("from_vector: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel_of(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (double& v : t.impl_->values) v = rng.normal() * std_dev;
    return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.impl_->values) v = rng.uniform(lo, hi);
    return t;
}

const Shape& Tensor::shape() const {
    static const Shape empty;
    return impl_ ? impl_->shape : empty;
}

int64_t Tensor::numel() const { return impl_ ? static_cast<int64_t>(impl_->values.size()) : 0; }

int64_t Tensor::dim() const { return static_cast<int64_t>(shape().size()); }

int64_t Tensor::size(int64_t d) const {
    const int64_t r = dim();
    if (d < 0) d += r;
    if (d < 0 || d >= r) throw DimensionError("size: axis out of range for " + shape_str(shape()));
    return shape()[static_cast<size_t>(d)];
}

double* Tensor::data() {
    check_defined(*this, "data");
    return impl_->values.data();
}

const double* Tensor::data() const {
    check_defined(*this, "data");
    return impl_->values.data();
}

double Tensor::item() const {
    check_defined(*this, "item");
    if (numel() != 1) throw UsageError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->values[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    check_defined(*this, "at");
    const Shape& s = shape();
    if (idx.size() != s.size()) throw DimensionError("at: rank mismatch for " + shape_str(s));
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) {
        if (i < 0 || i >= s[d]) throw DimensionError("at: index out of range");
        off = off * s[d] + i;
        ++d;
    }
    return impl_->values[static_cast<size_t>(off)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    check_defined(*this, "set_requires_grad");
    impl_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

double* Tensor::grad_data() {
    check_defined(*this, "grad_data");
    impl_->ensure_grad();
    return impl_->grad.data();
}

const double* Tensor::grad_data() const {
    check_defined(*this, "grad_data");
    return impl_->grad.empty() ? nullptr : impl_->grad.data();
}

Tensor Tensor::grad() const {
    check_defined(*this, "grad");
    if (impl_->grad.empty()) return Tensor::zeros(impl_->shape);
    return Tensor::from_vector(impl_->shape, impl_->grad);
}

void Tensor::zero_grad() {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    check_defined(*this, "detach");
    return Tensor::from_vector(impl_->shape, impl_->values);
}

void Tensor::fill_(double value) {
    check_defined(*this, "fill_");
    std::fill(impl_->values.begin(), impl_->values.end(), value);
}

void Tensor::copy_values_from(const Tensor& src) {
    check_defined(*this, "copy_values_from");
    check_defined(src, "copy_values_from");
    if (src.numel() != numel()) {
        throw DimensionError("copy_values_from: " + shape_str(src.shape()) + " into " +
                             shape_str(shape()));
    }
    impl_->values = src.impl_->values;
}

Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      const char* op, std::function<void(const detail::TensorImpl&)> backward) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError(std::string(op) + ": internal result size mismatch");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    bool need = false;
    if (grad_enabled()) {
        for (const Tensor& p : parents) {
            if (p.defined() && p.requires_grad()) {
                need = true;
                break;
            }
        }
    }
    if (need) {
        impl->requires_grad = true;
        auto node = std::make_shared<detail::GradNode>();
        node->op = op;
        for (const Tensor& p : parents) {
            if (p.defined()) node->parents.push_back(p.impl());
        }
        node->backward = std::move(backward);
        impl->node = std::move(node);
    }
    return Tensor(impl);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Tensor::backward() const {
    check_defined(*this, "backward");
    if (numel() != 1) {
        throw UsageError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }

    using detail::TensorImpl;

    // iterative post-order DFS over the creator graph
    std::vector<TensorImpl*> topo;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* impl;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        const size_t n_parents = f.impl->node ? f.impl->node->parents.size() : 0;
        if (f.next_parent < n_parents) {
            TensorImpl* p = f.impl->node->parents[f.next_parent].get();
            ++f.next_parent;
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.impl);
            stack.pop_back();
        }
    }

    // Non-leaf grads are scratch for this pass; leaves keep accumulating.
    for (TensorImpl* impl : topo) {
        if (impl->node) impl->grad.assign(impl->values.size(), 0.0);
    }
    impl_->ensure_grad();
    impl_->grad[0] += 1.0;

    // topo is post-order, so reversed it runs outputs before inputs
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorImpl* impl = *it;
        if (impl->node && impl->node->backward) impl->node->backward(*impl);
    }
}

// ---------------------------------------------------------------------------
// broadcasting machinery
// ---------------------------------------------------------------------------

namespace {

struct BroadcastPlan {
    Shape out_shape;
    std::vector<int64_t> out_strides;
    std::vector<int64_t> a_strides;  // 0 on broadcast axes
    std::vector<int64_t> b_strides;
    int64_t out_numel = 0;
    bool same_shape = false;
};

BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out_shape = a;
        plan.out_numel = numel_of(a);
        plan.same_shape = true;
        return plan;
    }
    const size_t rank = std::max(a.size(), b.size());
    plan.out_shape.resize(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " are not broadcastable");
        }
        plan.out_shape[i] = std::max(da, db);
    }
    plan.out_numel = numel_of(plan.out_shape);
    plan.out_strides = row_major_strides(plan.out_shape);
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    plan.a_strides.assign(rank, 0);
    plan.b_strides.assign(rank, 0);
    for (size_t i = 0; i < rank; ++i) {
        if (i >= rank - a.size()) {
            const size_t j = i - (rank - a.size());
            plan.a_strides[i] = (a[j] == 1 && plan.out_shape[i] != 1) ? 0 : sa[j];
        }
        if (i >= rank - b.size()) {
            const size_t j = i - (rank - b.size());
            plan.b_strides[i] = (b[j] == 1 && plan.out_shape[i] != 1) ? 0 : sb[j];
        }
    }
    return plan;
}

// Applies fn(out_index, a_offset, b_offset) over the broadcast domain.
template <class Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const size_t rank = plan.out_shape.size();
    std::vector<int64_t> idx(rank, 0);
    int64_t a_off = 0, b_off = 0;
    for (int64_t flat = 0; flat < plan.out_numel; ++flat) {
        fn(flat, a_off, b_off);
        // odometer increment
        for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
            const size_t ud = static_cast<size_t>(d);
            ++idx[ud];
            a_off += plan.a_strides[ud];
            b_off += plan.b_strides[ud];
            if (idx[ud] < plan.out_shape[ud]) break;
            a_off -= plan.a_strides[ud] * plan.out_shape[ud];
            b_off -= plan.b_strides[ud] * plan.out_shape[ud];
            idx[ud] = 0;
        }
    }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp kind, const char* name) {
    check_defined(a, name);
    check_defined(b, name);
    const BroadcastPlan plan = make_broadcast_plan(a.shape(), b.shape(), name);
    std::vector<double> out(static_cast<size_t>(plan.out_numel));
    const double* pa = a.data();
    const double* pb = b.data();

    auto apply = [&](double x, double y) {
        switch (kind) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            case BinOp::Mul: return x * y;
            case BinOp::Div: return x / y;
        }
        return 0.0;
    };

    if (plan.same_shape) {
        for (int64_t i = 0; i < plan.out_numel; ++i) {
            out[static_cast<size_t>(i)] = apply(pa[i], pb[i]);
        }
    } else {
        for_each_broadcast(plan, [&](int64_t flat, int64_t ao, int64_t bo) {
            out[static_cast<size_t>(flat)] = apply(pa[ao], pb[bo]);
        });
    }

    Tensor ta = a, tb = b;
    auto backward = [ta, tb, plan, kind](const detail::TensorImpl& o) {
        auto ia = ta.impl();
        auto ib = tb.impl();
        const double* g = o.grad.data();
        const double* va = ia->values.data();
        const double* vb = ib->values.data();
        const bool need_a = ia->requires_grad;
        const bool need_b = ib->requires_grad;
        if (need_a) ia->ensure_grad();
        if (need_b) ib->ensure_grad();
        double* ga = need_a ? ia->grad.data() : nullptr;
        double* gb = need_b ? ib->grad.data() : nullptr;

        auto accum = [&](int64_t flat, int64_t ao, int64_t bo) {
            const double go = g[flat];
            switch (kind) {
                case BinOp::Add:
                    if (need_a) ga[ao] += go;
                    if (need_b) gb[bo] += go;
                    break;
                case BinOp::Sub:
                    if (need_a) ga[ao] += go;
                    if (need_b) gb[bo] -= go;
                    break;
                case BinOp::Mul:
                    if (need_a) ga[ao] += go * vb[bo];
                    if (need_b) gb[bo] += go * va[ao];
                    break;
                case BinOp::Div: {
                    const double inv = 1.0 / vb[bo];
                    if (need_a) ga[ao] += go * inv;
                    if (need_b) gb[bo] -= go * va[ao] * inv * inv;
                    break;
                }
            }
        };
        if (plan.same_shape) {
            for (int64_t i = 0; i < plan.out_numel; ++i) accum(i, i, i);
        } else {
            for_each_broadcast(plan, accum);
        }
    };
    return make_op_result(plan.out_shape, std::move(out), {a, b}, name, std::move(backward));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Div, "div"); }

Tensor add_scalar(const Tensor& a, double s) {
    check_defined(a, "add_scalar");
    std::vector<double> out(a.impl()->values);
    for (double& v : out) v += s;
    Tensor ta = a;
    auto backward = [ta](const detail::TensorImpl& o) {
        auto ia = ta.impl();
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) ia->grad[i] += o.grad[i];
    };
    return make_op_result(a.shape(), std::move(out), {a}, "add_scalar", std::move(backward));
}

Tensor mul_scalar(const Tensor& a, double s) {
    check_defined(a, "mul_scalar");
    std::vector<double> out(a.impl()->values);
    for (double& v : out) v *= s;
    Tensor ta = a;
    auto backward = [ta, s](const detail::TensorImpl& o) {
        auto ia = ta.impl();
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) ia->grad[i] += o.grad[i] * s;
    };
    return make_op_result(a.shape(), std::move(out), {a}, "mul_scalar", std::move(backward));
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    check_defined(x, "relu");
    std::vector<double> out(x.impl()->values);
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    Tensor tx = x;
    auto backward = [tx](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        const double* v = ix->values.data();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            if (v[i] > 0.0) ix->grad[i] += o.grad[i];
        }
    };
    return make_op_result(x.shape(), std::move(out), {x}, "relu", std::move(backward));
}

Tensor gelu(const Tensor& x) {
    check_defined(x, "gelu");
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    std::vector<double> out(x.impl()->values);
    for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    Tensor tx = x;
    auto backward = [tx](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        const double* v = ix->values.data();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const double xi = v[i];
            const double cdf = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
            ix->grad[i] += o.grad[i] * (cdf + xi * pdf);
        }
    };
    return make_op_result(x.shape(), std::move(out), {x}, "gelu", std::move(backward));
}

namespace {

struct AxisSplit {
    int64_t outer = 1;
    int64_t len = 1;
    int64_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, int64_t axis, const char* op) {
    const int64_t rank = static_cast<int64_t>(shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(shape));
    }
    AxisSplit s;
    for (int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
    s.len = shape[static_cast<size_t>(axis)];
    for (int64_t i = axis + 1; i < rank; ++i) s.inner *= shape[static_cast<size_t>(i)];
    return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int64_t axis) {
    check_defined(x, "softmax");
    const AxisSplit s = split_axis(x.shape(), axis, "softmax");
    std::vector<double> out(x.impl()->values.size());
    const double* in = x.data();
    for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t i = 0; i < s.inner; ++i) {
            const int64_t base = o * s.len * s.inner + i;
            double mx = -1e308;
            for (int64_t l = 0; l < s.len; ++l) mx = std::max(mx, in[base + l * s.inner]);
            double denom = 0.0;
            for (int64_t l = 0; l < s.len; ++l) {
                const double e = std::exp(in[base + l * s.inner] - mx);
                out[static_cast<size_t>(base + l * s.inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (int64_t l = 0; l < s.len; ++l) out[static_cast<size_t>(base + l * s.inner)] *= inv;
        }
    }
    Tensor tx = x;
    auto backward = [tx, s](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        const double* y = o.values.data();
        const double* g = o.grad.data();
        double* gx = ix->grad.data();
        for (int64_t ou = 0; ou < s.outer; ++ou) {
            for (int64_t i = 0; i < s.inner; ++i) {
                const int64_t base = ou * s.len * s.inner + i;
                double dot = 0.0;
                for (int64_t l = 0; l < s.len; ++l) {
                    const int64_t k = base + l * s.inner;
                    dot += g[k] * y[k];
                }
                for (int64_t l = 0; l < s.len; ++l) {
                    const int64_t k = base + l * s.inner;
                    gx[k] += y[k] * (g[k] - dot);
                }
            }
        }
    };
    return make_op_result(x.shape(), std::move(out), {x}, "softmax", std::move(backward));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    check_defined(x, "sum");
    double acc = 0.0;
    for (double v : x.impl()->values) acc += v;
    Tensor tx = x;
    auto backward = [tx](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        const double g = o.grad[0];
        for (double& gv : ix->grad) gv += g;
    };
    return make_op_result(Shape{}, {acc}, {x}, "sum", std::move(backward));
}

Tensor mean(const Tensor& x) {
    check_defined(x, "mean");
    const int64_t n = x.numel();
    if (n == 0) throw DimensionError("mean of empty tensor");
    return mul_scalar(sum(x), 1.0 / static_cast<double>(n));
}

Tensor sum(const Tensor& x, int64_t axis, bool keepdim) {
    check_defined(x, "sum");
    const AxisSplit s = split_axis(x.shape(), axis, "sum");
    Shape out_shape;
    const int64_t rank = x.dim();
    const int64_t ax = axis < 0 ? axis + rank : axis;
    for (int64_t i = 0; i < rank; ++i) {
        if (i == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.shape()[static_cast<size_t>(i)]);
        }
    }
    std::vector<double> out(static_cast<size_t>(s.outer * s.inner), 0.0);
    const double* in = x.data();
    for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t l = 0; l < s.len; ++l) {
            const int64_t base = (o * s.len + l) * s.inner;
            for (int64_t i = 0; i < s.inner; ++i) {
                out[static_cast<size_t>(o * s.inner + i)] += in[base + i];
            }
        }
    }
    Tensor tx = x;
    auto backward = [tx, s](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        const double* g = o.grad.data();
        double* gx = ix->grad.data();
        for (int64_t ou = 0; ou < s.outer; ++ou) {
            for (int64_t l = 0; l < s.len; ++l) {
                const int64_t base = (ou * s.len + l) * s.inner;
                for (int64_t i = 0; i < s.inner; ++i) {
                    gx[base + i] += g[ou * s.inner + i];
                }
            }
        }
    };
    return make_op_result(std::move(out_shape), std::move(out), {x}, "sum_axis", std::move(backward));
}

Tensor mean(const Tensor& x, int64_t axis, bool keepdim) {
    const AxisSplit s = split_axis(x.shape(), axis, "mean");
    return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(s.len));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    check_defined(x, "reshape");
    int64_t known = 1;
    int64_t infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw DimensionError("reshape: more than one -1 extent");
            infer = static_cast<int64_t>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.numel() % known != 0) {
            throw DimensionError("reshape: cannot infer extent for " + shape_str(shape) +
                                 " from " + shape_str(x.shape()));
        }
        shape[static_cast<size_t>(infer)] = x.numel() / known;
    }
    if (numel_of(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(x.impl()->values);
    Tensor tx = x;
    auto backward = [tx](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) ix->grad[i] += o.grad[i];
    };
    return make_op_result(std::move(shape), std::move(out), {x}, "reshape", std::move(backward));
}

Tensor permute(const Tensor& x, const std::vector<int64_t>& perm) {
    check_defined(x, "permute");
    const int64_t rank = x.dim();
    if (static_cast<int64_t>(perm.size()) != rank) {
        throw DimensionError("permute: perm rank mismatch for " + shape_str(x.shape()));
    }
    std::vector<bool> seen(static_cast<size_t>(rank), false);
    Shape out_shape(static_cast<size_t>(rank));
    for (int64_t i = 0; i < rank; ++i) {
        const int64_t p = perm[static_cast<size_t>(i)];
        if (p < 0 || p >= rank || seen[static_cast<size_t>(p)]) {
            throw DimensionError("permute: invalid permutation");
        }
        seen[static_cast<size_t>(p)] = true;
        out_shape[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(p)];
    }
    const auto in_strides = row_major_strides(x.shape());
    std::vector<int64_t> gather(static_cast<size_t>(rank));
    for (int64_t i = 0; i < rank; ++i) {
        gather[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }

    const int64_t n = x.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const double* in = x.data();
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t src = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        out[static_cast<size_t>(flat)] = in[src];
        for (int64_t d = rank - 1; d >= 0; --d) {
            const size_t ud = static_cast<size_t>(d);
            ++idx[ud];
            src += gather[ud];
            if (idx[ud] < out_shape[ud]) break;
            src -= gather[ud] * out_shape[ud];
            idx[ud] = 0;
        }
    }

    Tensor tx = x;
    auto backward = [tx, out_shape, gather, rank](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        double* gx = ix->grad.data();
        const double* g = o.grad.data();
        std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
        int64_t src = 0;
        const int64_t n = static_cast<int64_t>(o.grad.size());
        for (int64_t flat = 0; flat < n; ++flat) {
            gx[src] += g[flat];
            for (int64_t d = rank - 1; d >= 0; --d) {
                const size_t ud = static_cast<size_t>(d);
                ++idx[ud];
                src += gather[ud];
                if (idx[ud] < out_shape[ud]) break;
                src -= gather[ud] * out_shape[ud];
                idx[ud] = 0;
            }
        }
    };
    return make_op_result(std::move(out_shape), std::move(out), {x}, "permute", std::move(backward));
}

Tensor transpose(const Tensor& x, int64_t d0, int64_t d1) {
    const int64_t rank = x.dim();
    if (d0 < 0) d0 += rank;
    if (d1 < 0) d1 += rank;
    std::vector<int64_t> perm(static_cast<size_t>(rank));
    for (int64_t i = 0; i < rank; ++i) perm[static_cast<size_t>(i)] = i;
    std::swap(perm[static_cast<size_t>(d0)], perm[static_cast<size_t>(d1)]);
    return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) throw UsageError("concat: no inputs");
    for (const Tensor& p : parts) check_defined(p, "concat");
    const int64_t rank = parts[0].dim();
    int64_t ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) throw DimensionError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.dim() != rank) throw DimensionError("concat: rank mismatch");
        for (int64_t d = 0; d < rank; ++d) {
            if (d != ax && p.shape()[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)]) {
                throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                     shape_str(out_shape));
            }
        }
        total += p.shape()[static_cast<size_t>(ax)];
    }
    out_shape[static_cast<size_t>(ax)] = total;

    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < ax; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int64_t d = ax + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];

    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
    std::vector<int64_t> lens;
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t len = p.shape()[static_cast<size_t>(ax)];
        lens.push_back(len);
        const double* in = p.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(in + o * len * inner, in + (o + 1) * len * inner,
                      out.begin() + o * total * inner + off * inner);
        }
        off += len;
    }

    std::vector<Tensor> parents = parts;
    auto backward = [parents, lens, outer, inner, total](const detail::TensorImpl& o) {
        const double* g = o.grad.data();
        int64_t off = 0;
        for (size_t pi = 0; pi < parents.size(); ++pi) {
            auto ip = parents[pi].impl();
            const int64_t len = lens[pi];
            if (ip->requires_grad) {
                ip->ensure_grad();
                double* gp = ip->grad.data();
                for (int64_t ou = 0; ou < outer; ++ou) {
                    const double* src = g + ou * total * inner + off * inner;
                    double* dst = gp + ou * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            }
            off += len;
        }
    };
    return make_op_result(std::move(out_shape), std::move(out), parts, "concat", std::move(backward));
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
    check_defined(x, "slice");
    const int64_t rank = x.dim();
    int64_t ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) throw DimensionError("slice: axis out of range");
    const int64_t extent = x.shape()[static_cast<size_t>(ax)];
    if (start < 0 || len < 0 || start + len > extent) {
        throw DimensionError("slice: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of extent " +
                             std::to_string(extent));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(ax)] = len;
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < ax; ++d) outer *= x.shape()[static_cast<size_t>(d)];
    for (int64_t d = ax + 1; d < rank; ++d) inner *= x.shape()[static_cast<size_t>(d)];

    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
    const double* in = x.data();
    for (int64_t o = 0; o < outer; ++o) {
        std::copy(in + (o * extent + start) * inner, in + (o * extent + start + len) * inner,
                  out.begin() + o * len * inner);
    }
    Tensor tx = x;
    auto backward = [tx, outer, inner, extent, start, len](const detail::TensorImpl& o) {
        auto ix = tx.impl();
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        double* gx = ix->grad.data();
        const double* g = o.grad.data();
        for (int64_t ou = 0; ou < outer; ++ou) {
            const double* src = g + ou * len * inner;
            double* dst = gx + (ou * extent + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    };
    return make_op_result(std::move(out_shape), std::move(out), {x}, "slice", std::move(backward));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

void mm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
        bool accumulate) {
    const int64_t grain = std::max<int64_t>(1, 1 + 131072 / std::max<int64_t>(1, k * n));
    parallel_for(0, m, grain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            double* crow = c + i * n;
            if (!accumulate) std::fill(crow, crow + n, 0.0);
            const double* arow = a + i * k;
            for (int64_t l = 0; l < k; ++l) {
                const double al = arow[l];
                const double* brow = b + l * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += al * brow[j];
            }
        }
    });
}

void mm_at(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
           bool accumulate) {
    // C[i,j] = sum_l A[l,i] * B[l,j]; parallel over column blocks of C
    const int64_t block = std::max<int64_t>(16, 1 + 131072 / std::max<int64_t>(1, k * m));
    parallel_for(0, n, block, [&](int64_t jlo, int64_t jhi) {
        if (!accumulate) {
            for (int64_t i = 0; i < m; ++i) std::fill(c + i * n + jlo, c + i * n + jhi, 0.0);
        }
        for (int64_t l = 0; l < k; ++l) {
            const double* arow = a + l * m;
            const double* brow = b + l * n;
            for (int64_t i = 0; i < m; ++i) {
                const double av = arow[i];
                double* crow = c + i * n;
                for (int64_t j = jlo; j < jhi; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

void mm_bt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
           bool accumulate) {
    // C[i,j] = dot(A[i,:], B[j,:])
    const int64_t grain = std::max<int64_t>(1, 1 + 131072 / std::max<int64_t>(1, k * n));
    parallel_for(0, m, grain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double acc = 0.0;
                for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
                if (accumulate) {
                    crow[j] += acc;
                } else {
                    crow[j] = acc;
                }
            }
        }
    });
}

}  // namespace detail

namespace {

struct MatmulPlan {
    int64_t m = 0, k = 0, n = 0;
    Shape batch_shape;
    int64_t batch = 1;
    std::vector<int64_t> a_bstrides;  // per batch axis, 0 when broadcast
    std::vector<int64_t> b_bstrides;
    bool a_broadcast = false;
    bool b_broadcast = false;
};

MatmulPlan make_matmul_plan(const Shape& sa, const Shape& sb) {
    if (sa.size() < 2 || sb.size() < 2) {
        throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(sa) +
                             " and " + shape_str(sb));
    }
    MatmulPlan plan;
    plan.m = sa[sa.size() - 2];
    plan.k = sa[sa.size() - 1];
    const int64_t kb = sb[sb.size() - 2];
    plan.n = sb[sb.size() - 1];
    if (plan.k != kb) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(sa) + " x " +
                             shape_str(sb));
    }
    const size_t ra = sa.size() - 2, rb = sb.size() - 2;
    const size_t rank = std::max(ra, rb);
    plan.batch_shape.resize(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - ra ? 1 : sa[i - (rank - ra)];
        const int64_t db = i < rank - rb ? 1 : sb[i - (rank - rb)];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("matmul: batch extents not broadcastable, " + shape_str(sa) +
                                 " x " + shape_str(sb));
        }
        plan.batch_shape[i] = std::max(da, db);
    }
    plan.batch = numel_of(plan.batch_shape);
    // strides over the batch axes (in units of one matrix)
    plan.a_bstrides.assign(rank, 0);
    plan.b_bstrides.assign(rank, 0);
    int64_t acc_a = 1, acc_b = 1;
    for (int64_t i = static_cast<int64_t>(rank) - 1; i >= 0; --i) {
        const size_t ui = static_cast<size_t>(i);
        const int64_t da = ui < rank - ra ? 1 : sa[ui - (rank - ra)];
        const int64_t db = ui < rank - rb ? 1 : sb[ui - (rank - rb)];
        if (da != 1 || plan.batch_shape[ui] == 1) {
            plan.a_bstrides[ui] = acc_a;
            acc_a *= da;
        } else {
            plan.a_broadcast = true;
        }
        if (db != 1 || plan.batch_shape[ui] == 1) {
            plan.b_bstrides[ui] = acc_b;
            acc_b *= db;
        } else {
            plan.b_broadcast = true;
        }
    }
    return plan;
}

int64_t batch_offset(const MatmulPlan& plan, int64_t flat, const std::vector<int64_t>& strides) {
    int64_t off = 0;
    for (int64_t i = static_cast<int64_t>(plan.batch_shape.size()) - 1; i >= 0; --i) {
        const size_t ui = static_cast<size_t>(i);
        const int64_t extent = plan.batch_shape[ui];
        off += (flat % extent) * strides[ui];
        flat /= extent;
    }
    return off;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    const MatmulPlan plan = make_matmul_plan(a.shape(), b.shape());

    Shape out_shape = plan.batch_shape;
    out_shape.push_back(plan.m);
    out_shape.push_back(plan.n);
    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));

    const double* pa = a.data();
    const double* pb = b.data();
    const int64_t mk = plan.m * plan.k;
    const int64_t kn = plan.k * plan.n;
    const int64_t mn = plan.m * plan.n;

    if (plan.batch == 1) {
        detail::mm(pa, pb, out.data(), plan.m, plan.k, plan.n, false);
    } else {
        parallel_for(0, plan.batch, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t bi = lo; bi < hi; ++bi) {
                const double* ai = pa + batch_offset(plan, bi, plan.a_bstrides) * mk;
                const double* bj = pb + batch_offset(plan, bi, plan.b_bstrides) * kn;
                detail::mm(ai, bj, out.data() + bi * mn, plan.m, plan.k, plan.n, false);
            }
        });
    }

    Tensor ta = a, tb = b;
    auto backward = [ta, tb, plan, mk, kn, mn](const detail::TensorImpl& o) {
        auto ia = ta.impl();
        auto ib = tb.impl();
        const double* g = o.grad.data();
        const double* va = ia->values.data();
        const double* vb = ib->values.data();
        if (ia->requires_grad) {
            ia->ensure_grad();
            double* ga = ia->grad.data();
            if (plan.batch > 1 && !plan.a_broadcast) {
                parallel_for(0, plan.batch, 1, [&](int64_t lo, int64_t hi) {
                    for (int64_t bi = lo; bi < hi; ++bi) {
                        const double* bj = vb + batch_offset(plan, bi, plan.b_bstrides) * kn;
                        detail::mm_bt(g + bi * mn, bj,
                                      ga + batch_offset(plan, bi, plan.a_bstrides) * mk, plan.m,
                                      plan.n, plan.k, true);
                    }
                });
            } else {
                for (int64_t bi = 0; bi < plan.batch; ++bi) {
                    const double* bj = vb + batch_offset(plan, bi, plan.b_bstrides) * kn;
                    detail::mm_bt(g + bi * mn, bj, ga + batch_offset(plan, bi, plan.a_bstrides) * mk,
                                  plan.m, plan.n, plan.k, true);
                }
            }
        }
        if (ib->requires_grad) {
            ib->ensure_grad();
            double* gb = ib->grad.data();
            if (plan.batch > 1 && !plan.b_broadcast) {
                parallel_for(0, plan.batch, 1, [&](int64_t lo, int64_t hi) {
                    for (int64_t bi = lo; bi < hi; ++bi) {
                        const double* ai = va + batch_offset(plan, bi, plan.a_bstrides) * mk;
                        detail::mm_at(ai, g + bi * mn,
                                      gb + batch_offset(plan, bi, plan.b_bstrides) * kn, plan.k,
                                      plan.m, plan.n, true);
                    }
                });
            } else {
                for (int64_t bi = 0; bi < plan.batch; ++bi) {
                    const double* ai = va + batch_offset(plan, bi, plan.a_bstrides) * mk;
                    detail::mm_at(ai, g + bi * mn, gb + batch_offset(plan, bi, plan.b_bstrides) * kn,
                                  plan.k, plan.m, plan.n, true);
                }
            }
        }
    };
    return make_op_result(std::move(out_shape), std::move(out), {a, b}, "matmul",
                          std::move(backward));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_defined(x, "linear");
    check_defined(w, "linear");
    if (w.dim() != 2) throw DimensionError("linear: weight must be rank 2, got " + shape_str(w.shape()));
    const int64_t in = w.shape()[0];
    if (x.size(-1) != in) {
        throw DimensionError("linear: input width " + std::to_string(x.size(-1)) +
                             " does not match weight " + shape_str(w.shape()));
    }
    Shape x2_shape{x.numel() / in, in};
    Tensor x2 = reshape(x, x2_shape);
    Tensor y2 = matmul(x2, w);
    if (bias.defined()) y2 = add(y2, bias);
    Shape out_shape = x.shape();
    out_shape.back() = w.shape()[1];
    return reshape(y2, out_shape);
}

}  // namespace poseidon
