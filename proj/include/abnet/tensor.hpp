#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace abnet {

// Dense n-dimensional double tensor with optional gradient buffer.
// Copies are shallow handles; the payload is shared.
class Tensor {
 public:
  struct Impl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized like data iff requires_grad
    bool requires_grad = false;
    int tape_id = -1;
  };

  Tensor() = default;
  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar_of(double value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[i]; }
  int rank() const { return (int)impl_->shape.size(); }
  std::int64_t size() const { return (std::int64_t)impl_->data.size(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on);
  double* grad() { return impl_->grad.data(); }
  const double* grad() const { return impl_->grad.data(); }
  std::vector<double>& grad_values() { return impl_->grad; }
  void zero_grad();

  double scalar() const;  // requires size()==1

  Impl* impl() const { return impl_.get(); }
  std::shared_ptr<Impl> impl_ptr() const { return impl_; }

  // true iff every element is finite
  bool all_finite() const;

 private:
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
  friend class Tape;
};

// Recorded forward operations, replayed in reverse for backpropagation.
// Tensor ids are assigned in recording order, so every op's inputs have
// smaller ids than its output.
class Tape {
 public:
  struct OpRecord {
    const char* name;
    std::vector<int> input_ids;
    int output_id;
    std::function<void()> backward;
    std::shared_ptr<Tensor::Impl> output;
  };

  void record(const char* name, std::initializer_list<Tensor> inputs, Tensor& output,
              std::function<void()> backward);
  void record(const char* name, const std::vector<Tensor>& inputs, Tensor& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss)=1 and replays every recorded op once, in reverse.
  // Gradients of recorded outputs are reset first; leaf gradients accumulate.
  void backward(const Tensor& loss);

  void clear();
  const std::vector<OpRecord>& ops() const { return ops_; }
  std::size_t last_backward_op_count() const { return last_backward_ops_; }

 private:
  int assign_id(const Tensor& t);
  std::vector<OpRecord> ops_;
  int next_id_ = 0;
  std::size_t last_backward_ops_ = 0;
};

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  void init(int channels);
};

// test hook: scales the named op's input gradients by 2 during backward
void set_gradient_fault(const std::string& op_name);
void clear_gradient_fault();
double gradient_fault_scale(const char* op_name);

// --- differentiable ops (tape==nullptr runs forward only) ---

// 3x3 cross-correlation, padding 0 or 1
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int padding,
              Tape* tape);

// per-channel normalization over spatial positions; train mode uses batch
// statistics and updates running stats, eval mode uses the running stats
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool train, Tape* tape);

Tensor relu(const Tensor& input, Tape* tape);
Tensor sigmoid(const Tensor& input, Tape* tape);

// non-overlapping 2x2 max pooling, floor semantics, first-in-row-major ties
Tensor maxpool2d(const Tensor& input, Tape* tape);

// weights [out,in] * input [in] + bias [out]
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias, Tape* tape);

// stack [C_i,H,W] blocks along the channel axis
Tensor concat_channels(const std::vector<Tensor>& inputs, Tape* tape);

// flatten-and-join arbitrary tensors into one rank-1 tensor
Tensor concat_flat(const std::vector<Tensor>& inputs, Tape* tape);

Tensor global_avg_pool(const Tensor& input, Tape* tape);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
Tensor scale(const Tensor& a, double factor, Tape* tape);
Tensor mul_scalar(const Tensor& scalar_gate, const Tensor& t, Tape* tape);
Tensor reshape(const Tensor& t, std::vector<int> shape, Tape* tape);

// sum of all elements as a scalar
Tensor reduce_sum(const Tensor& t, Tape* tape);
// sum((a-b)^2) as a scalar
Tensor sq_diff_sum(const Tensor& a, const Tensor& b, Tape* tape);
// mean((v-target)^2) as a scalar
Tensor mse_vs_targets(const Tensor& v, const std::vector<double>& targets, Tape* tape);
// mean(|v|) as a scalar
Tensor mean_abs(const Tensor& v, Tape* tape);
// a + wb*b + wc*c over scalars, in exactly that association order
Tensor weighted_sum3(const Tensor& a, const Tensor& b, const Tensor& c, double wb, double wc,
                     Tape* tape);

// Adam with bias correction; parameter groups carry their own learning rate.
class Adam {
 public:
  struct Group {
    std::vector<Tensor> params;
    double base_lr;
    double lr_scale = 1.0;  // schedule multiplier
    std::vector<std::vector<double>> m, v;
  };

  void add_group(std::vector<Tensor> params, double lr);
  void set_lr_scale(double scale);  // applied to every group
  void step();
  void zero_grad();
  std::int64_t step_count() const { return step_count_; }
  std::vector<Group>& groups() { return groups_; }

  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

 private:
  std::vector<Group> groups_;
  std::int64_t step_count_ = 0;
};

}  // namespace abnet
