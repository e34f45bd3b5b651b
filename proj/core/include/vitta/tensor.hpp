#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace vitta {

using Dims = std::vector<std::int64_t>;

std::int64_t numel_of(const Dims& dims);
std::string dims_to_string(const Dims& dims);

namespace detail {

struct TensorImpl {
  Dims dims;
  std::vector<float> data;
  bool requires_grad = false;   // leaf parameter flag
  bool grad_required = false;   // participates in the active tape's backward
  std::vector<float> grad;      // empty until backward touches it

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  float* grad_ptr();            // allocates zeros on first use
};

}  // namespace detail

// Dense f32 tensor handle with shared value storage. Values are treated as
// immutable once they feed an op on the active tape; parameters and norm
// running buffers are mutated only between steps (optimizer, checkpoint load).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Dims dims, bool requires_grad = false);
  static Tensor full(Dims dims, float value);
  static Tensor from_data(Dims dims, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Dims& dims() const { return impl_->dims; }
  std::int64_t numel() const { return impl_->numel(); }

  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  std::span<float> mutable_grad() { return impl_->grad; }
  void zero_grad();

  // Value of a single-element tensor.
  float item() const;

  // Same values, cut loose from any tape (fresh leaf, no grad).
  Tensor detached() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
  friend Tensor make_op_output(Dims dims, const std::vector<const Tensor*>& inputs);
};

// Reverse-mode tape. One tape per adaptation/training step: construct, run
// the forward, call backward(loss) once, destroy. Ops record onto the
// innermost active tape of the current thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)=1 and traverses recorded ops in reverse. Populates grads of
  // requires_grad leaves; intermediate grads and recorded closures are
  // released as traversal proceeds. Throws if loss is not scalar, was not
  // recorded on this tape, or backward already ran.
  void backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  static Tape* active();

 private:
  struct Node {
    std::vector<std::shared_ptr<detail::TensorImpl>> outputs;
    std::function<void()> fn;
  };
  void record(std::vector<std::shared_ptr<detail::TensorImpl>> outputs,
              std::function<void()> fn);
  std::vector<Node> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
  friend void record_node(std::vector<std::shared_ptr<detail::TensorImpl>> outputs,
                          std::function<void()> fn);
};

// ---------------------------------------------------------------------------
// Ops. All inputs are [N,C,T,H,W] unless stated otherwise; errors are thrown
// as std::invalid_argument with the offending dimensions spelled out.
// ---------------------------------------------------------------------------

// Cross-correlation of x[N,Ci,T,H,W] with w[Co,Ci,Kt,Kh,Kw] plus bias[Co].
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::array<int, 3> stride = {1, 1, 1}, std::array<int, 3> pad = {0, 0, 0});

enum class BatchNormMode {
  Train,          // normalize with batch stats over (N,T,H,W), update running buffers
  Eval,           // normalize with running buffers
  UseBatchStats,  // normalize with batch stats, leave buffers untouched
};

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BatchNormMode mode,
                  float eps = 1e-5f, float momentum = 0.1f);

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// x[N,C] * w[K,C]^T + b[K] -> [N,K]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(const Tensor& x);

// Row-wise softmax of x[N,K].
Tensor softmax(const Tensor& x);

// 2x2 spatial average pooling, stride 2; temporal extent preserved. H and W
// must be even.
Tensor avg_pool_hw2(const Tensor& x);

// Mean over (T,H,W): [N,C,T,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor sum(const Tensor& x);

// Vector L1 distance: sum(|a - b|). Subgradient 0 at ties.
Tensor l1_loss(const Tensor& a, const Tensor& b);

// Mean over rows of -sum_k p log p  (rows of probs[N,K] must sum to 1).
Tensor entropy_loss(const Tensor& probs);

// Mean over rows of -log probs[n, labels[n]].
Tensor cross_entropy_loss(const Tensor& probs, std::span<const int> labels);

// L1 spread of view predictions around their mean pseudo-label:
// sum_m |p_m - mean_m' p_m'|_1. The pseudo-label is not detached.
Tensor consistency_loss(const Tensor& view_probs);

// Per-channel mean and population variance over (N,T,H,W); both outputs are
// differentiable w.r.t. x. Accumulation in 64-bit.
std::pair<Tensor, Tensor> channel_stats(const Tensor& x);

// True if every element of every listed tensor is finite.
bool all_finite(const Tensor& t);

}  // namespace vitta
