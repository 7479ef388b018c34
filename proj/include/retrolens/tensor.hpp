#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "retrolens/errors.hpp"

namespace retrolens {

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool grad_alloc = false;
};

class Tensor;

// Ordered record of executed operations. Ops executed while a tape is active
// (and touching at least one grad-enabled input) push one backward rule each;
// backward() replays them in reverse execution order exactly once.
class Tape {
public:
    void push(std::function<void()> rule) { records_.push_back(std::move(rule)); }
    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

private:
    friend void backward(Tape& tape, const Tensor& loss);
    std::vector<std::function<void()>> records_;
};

// Makes `tape` the active recorder on this thread for the scope's lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

Tape* active_tape();

// Dense 64-bit float tensor, row-major. Value-semantics handle onto a shared
// node so recorded backward rules can address the same storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data);
    static Tensor scalar(double v) { return from_data({1}, {v}); }
    // grad-enabled leaf
    static Tensor param(std::vector<int> shape, std::vector<double> data);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->data.size(); }
    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    double value() const;  // scalar convenience; throws on numel != 1

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return node_->grad_alloc; }
    const std::vector<double>& grad() const;
    void zero_grad();

    // Same values as a fresh grad-disabled leaf (data copied).
    Tensor detach() const;
    // Deep copy preserving requires_grad, as a leaf.
    Tensor clone() const;

    const std::shared_ptr<TensorNode>& node() const { return node_; }
    static Tensor wrap(std::shared_ptr<TensorNode> n);

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor sigmoid_t(const Tensor& a);
Tensor softplus_t(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor leaky_relu(const Tensor& a, double slope);
// out_i = cond_i != 0 ? on_one_i : on_zero_i. cond is data (no gradient path).
Tensor select_mask(const Tensor& cond, const Tensor& on_one, const Tensor& on_zero);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [N, ...] -> [N], mean over trailing dims
Tensor mean_per_sample(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor transpose2d(const Tensor& a);
Tensor concat_channels(const Tensor& a, const Tensor& b);  // [N,C1,H,W]+[N,C2,H,W]
Tensor slice_batch(const Tensor& a, int n);                // [N,...] -> [1,...]
Tensor concat_batch(const std::vector<Tensor>& parts);     // concat along dim 0
Tensor upsample_nearest2(const Tensor& a);                 // [N,C,H,W] -> [N,C,2H,2W]

// ---- linear algebra / conv ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N]
// Row-wise softmax of a [R,C] matrix, numerically stabilized by row-max
// subtraction. mask_bias (data only, no gradient path) is added to the logits;
// masked columns carry a large negative bias and come out exactly 0.
Tensor softmax_rows(const Tensor& a);
Tensor softmax_rows(const Tensor& a, const Tensor& mask_bias);
// Large negative bias used to exclude masked columns from softmax_rows.
inline constexpr double kMaskBias = -1e30;

// Cross-correlation of input [N,C,H,W] with weight [K,C,kh,kw] plus bias [K].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad);
// Nearest-neighbor x2 followed by a stride-1 conv with pad (k-1)/2.
Tensor upsample_conv(const Tensor& input, const Tensor& weight, const Tensor& bias);
// Per-(n,c)-plane normalization to zero mean / unit variance, then affine.
Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                     double eps);

// Replays the tape in reverse, accumulating gradients into every grad-enabled
// node the recorded ops touched. `loss` must be scalar.
void backward(Tape& tape, const Tensor& loss);

// ---- gradient checking ----
struct GradCheckReport {
    std::vector<double> rel_err;  // per coordinate of `point`
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    bool pass = false;
};

// Central-difference check of d f(x) / dx against the recorded backward rules.
// f must return a scalar tensor and be finite at point +/- h.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double h, double tol);

struct ParamGradCheck {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Spot-checks d loss / d param for each named parameter at `coords_per_param`
// deterministically sampled coordinates. loss_fn must rebuild the graph from
// the parameters' current values on every call.
std::vector<ParamGradCheck> grad_check_params(
    const std::function<Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor>>& params,
    int coords_per_param, double h, double tol, std::uint64_t seed);

}  // namespace retrolens
