#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "core/tensor.hpp"

namespace poseidon {

// Base for anything holding parameters. Parameters and buffers are reported
// in registration order under hierarchical dotted names; the optimizer and
// the checkpoint writer both rely on that order being deterministic.
class Module {
  public:
    virtual ~Module() = default;

    void set_training(bool on);
    bool training() const { return training_; }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_buffers() const;
    std::vector<Tensor> parameters() const;
    void zero_grad();

    // nullptr when the name is unknown
    Tensor find_parameter(const std::string& name) const;

  protected:
    Tensor& register_parameter(const std::string& name, Tensor t);
    Tensor& register_buffer(const std::string& name, Tensor t);
    void register_module(const std::string& name, Module& m);

  private:
    struct Named {
        std::string name;
        Tensor tensor;
    };
    void check_fresh_name(const std::string& name) const;
    void collect(const std::string& prefix, bool buffers,
                 std::vector<std::pair<std::string, Tensor>>& out) const;

    std::vector<Named> params_;
    std::vector<Named> buffers_;
    std::vector<std::pair<std::string, Module*>> children_;
    bool training_ = true;
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

class Linear : public Module {
  public:
    Linear(int64_t in, int64_t out, Rng& rng, bool bias = true);
    Tensor forward(const Tensor& x) const;
    Tensor weight;  // [in, out]
    Tensor bias;
};

class Conv2d : public Module {
  public:
    Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding, Rng& rng,
           bool bias = true);
    Tensor forward(const Tensor& x) const;
    Tensor weight;  // [out, in, k, k]
    Tensor bias;

  private:
    int64_t stride_, padding_;
};

class ConvTranspose2d : public Module {
  public:
    ConvTranspose2d(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding,
                    int64_t output_padding, Rng& rng, bool bias = true);
    Tensor forward(const Tensor& x) const;
    Tensor weight;  // [in, out, k, k]
    Tensor bias;

  private:
    int64_t stride_, padding_, output_padding_;
};

class BatchNorm2d : public Module {
  public:
    explicit BatchNorm2d(int64_t channels, double momentum = 0.1, double eps = 1e-5);
    Tensor forward(const Tensor& x) const;
    Tensor gamma, beta;
    Tensor running_mean, running_var;

  private:
    double momentum_, eps_;
};

class LayerNorm : public Module {
  public:
    explicit LayerNorm(int64_t width, double eps = 1e-6);
    Tensor forward(const Tensor& x) const;
    Tensor gamma, beta;

  private:
    double eps_;
};

// Multi-head attention with separate learned query/key/value projections and
// an output projection. Queries may come from a different token set than
// keys/values (cross attention); self attention passes the same tensor twice.
class MultiHeadAttention : public Module {
  public:
    MultiHeadAttention(int64_t dim, int64_t heads, Rng& rng);

    // q_in: [B, Sq, C], kv_in: [B, Skv, C] -> [B, Sq, C]
    Tensor forward(const Tensor& q_in, const Tensor& kv_in);

    // When enabled, forward() keeps a detached copy of the attention rows
    // [B, heads, Sq, Skv] for inspection (tests, CLI dumps).
    void capture_attention(bool on) { capture_ = on; }
    const Tensor& last_attention() const { return last_attn_; }

    int64_t heads() const { return heads_; }

    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

  private:
    int64_t dim_, heads_, dk_;
    bool capture_ = false;
    Tensor last_attn_;
};

}  // namespace poseidon
