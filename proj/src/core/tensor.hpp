#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "core/common.hpp"

namespace poseidon {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct GradNode;

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same length as values
    std::shared_ptr<GradNode> node;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

struct GradNode {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    // Reads out.grad (and any captured forward state), accumulates into the
    // grad buffers of parents that require grad.
    std::function<void(const TensorImpl& out)> backward;
};

}  // namespace detail

// Scoped switch that stops ops from recording the tape (eval / plumbing).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

bool grad_enabled();

// Dense double-precision tensor. Value semantics at the op interface: an op
// never mutates its inputs; handles share storage, explicit mutation goes
// through data()/fill_()/copy_values_from().
class Tensor {
  public:
    Tensor() = default;  // undefined handle
    explicit Tensor(Shape shape);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from_vector(Shape shape, std::vector<double> values);
    static Tensor randn(Shape shape, Rng& rng, double std_dev = 1.0);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int64_t dim() const;
    int64_t size(int64_t d) const;  // supports negative indices

    double* data();
    const double* data() const;
    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);

    bool has_grad() const;
    double* grad_data();
    const double* grad_data() const;
    Tensor grad() const;  // copy; zeros when no grad has been accumulated
    void zero_grad();

    Tensor detach() const;  // value copy, no tape link, requires_grad=false

    // Reverse pass from a scalar. Populates grad on every reachable leaf
    // that requires grad; repeated calls accumulate into leaf grads.
    void backward() const;

    void fill_(double value);
    void copy_values_from(const Tensor& src);

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_op_result(Shape shape, std::vector<double> values,
                                 std::vector<Tensor> parents, const char* op,
                                 std::function<void(const detail::TensorImpl&)> backward);
};

// Builds an op result and records the tape node when grads are enabled and
// some parent requires grad.
Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      const char* op, std::function<void(const detail::TensorImpl&)> backward);

// ---------------------------------------------------------------------------
// elementwise / broadcast
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// activations / normalization
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, int64_t axis);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Training mode uses batch statistics (batch size >= 2 enforced) and updates
// the running buffers in place; eval mode uses the running buffers.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor running_mean, Tensor running_var, bool training,
                   double momentum = 0.1, double eps = 1e-5);

// ---------------------------------------------------------------------------
// reductions / shape
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int64_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int64_t axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);  // one extent may be -1
Tensor permute(const Tensor& x, const std::vector<int64_t>& perm);
Tensor transpose(const Tensor& x, int64_t d0, int64_t d1);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len);

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// a: [..., m, k], b: [..., k, n]; batch extents broadcast
Tensor matmul(const Tensor& a, const Tensor& b);

// x: [..., in] * w [in, out] + bias [out] (bias may be undefined)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// ---------------------------------------------------------------------------
// structured ops (image-shaped)
// ---------------------------------------------------------------------------

// x: [B,C,H,W], w: [O,C,kh,kw]; cross-correlation convention
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride,
              int64_t padding);

// x: [B,I,h,w], w: [I,O,kh,kw]; adjoint of conv2d with the same geometry
Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride,
                int64_t padding, int64_t output_padding = 0);

Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w);

// align_corners=false sampling; sample centers at (i+0.5)*scale-0.5, clamped
Tensor interpolate_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);

// pred/target: [B,K,H,W], mask: [B,K]. Mean of squared difference over the
// masked joints and their cells; all-masked input yields 0 with a warning.
Tensor mse_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);

// ---------------------------------------------------------------------------
// raw kernels (shared by op implementations)
// ---------------------------------------------------------------------------

namespace detail {
// C (+)= A[m,k] * B[k,n]
void mm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
        bool accumulate);
// C (+)= A^T * B where A: [k,m], B: [k,n]
void mm_at(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
           bool accumulate);
// C (+)= A * B^T where A: [m,k], B: [n,k]
void mm_bt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
           bool accumulate);
}  // namespace detail

}  // namespace poseidon
