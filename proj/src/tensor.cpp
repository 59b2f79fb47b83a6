#include "abnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace abnet {

namespace {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension " + std::to_string(d));
    n *= d;
  }
  return n;
}

// ---- small GEMM kernel -------------------------------------------------
// C[m][n] += sum_k AT[k*M+m] * B[k*N+n].  AT is the K x M operand (i.e. A
// transposed), which keeps the m-axis contiguous for vector loads.

#if defined(__AVX512F__) || defined(__AVX2__) || defined(__SSE2__)
typedef double v8d __attribute__((vector_size(64), aligned(8), may_alias));
typedef double v4d __attribute__((vector_size(32), aligned(8), may_alias));

inline v8d load8(const double* p) { return *(const v8d*)p; }
inline v4d load4(const double* p) { return *(const v4d*)p; }

void gemm_block16(const double* AT, const double* B, double* C, int M, int K, int N, int m0,
                  int n0, int nb) {
  if (nb == 4) {
    v8d a00{}, a01{}, a02{}, a03{}, a10{}, a11{}, a12{}, a13{};
    const double* a = AT + m0;
    const double* b = B + n0;
    for (int k = 0; k < K; ++k, a += M, b += N) {
      const v8d x0 = load8(a), x1 = load8(a + 8);
      const double b0 = b[0], b1 = b[1], b2 = b[2], b3 = b[3];
      a00 += x0 * b0; a10 += x1 * b0;
      a01 += x0 * b1; a11 += x1 * b1;
      a02 += x0 * b2; a12 += x1 * b2;
      a03 += x0 * b3; a13 += x1 * b3;
    }
    const v8d acc[2][4] = {{a00, a01, a02, a03}, {a10, a11, a12, a13}};
    for (int h = 0; h < 2; ++h)
      for (int j = 0; j < 4; ++j)
        for (int i = 0; i < 8; ++i)
          C[(std::size_t)(m0 + h * 8 + i) * N + n0 + j] += acc[h][j][i];
  } else {
    for (int j = 0; j < nb; ++j) {
      v8d a0{}, a1{};
      const double* a = AT + m0;
      const double* b = B + n0 + j;
      for (int k = 0; k < K; ++k, a += M, b += N) {
        const double bv = b[0];
        a0 += load8(a) * bv;
        a1 += load8(a + 8) * bv;
      }
      for (int i = 0; i < 8; ++i) C[(std::size_t)(m0 + i) * N + n0 + j] += a0[i];
      for (int i = 0; i < 8; ++i) C[(std::size_t)(m0 + 8 + i) * N + n0 + j] += a1[i];
    }
  }
}

void gemm_block8(const double* AT, const double* B, double* C, int M, int K, int N, int m0,
                 int n0, int nb) {
  for (int j = 0; j < nb; ++j) {
    v8d acc{};
    const double* a = AT + m0;
    const double* b = B + n0 + j;
    for (int k = 0; k < K; ++k, a += M, b += N) acc += load8(a) * b[0];
    for (int i = 0; i < 8; ++i) C[(std::size_t)(m0 + i) * N + n0 + j] += acc[i];
  }
}
#endif

void gemm_at(const double* AT, const double* B, double* C, int M, int K, int N) {
  int m0 = 0;
#if defined(__AVX512F__) || defined(__AVX2__) || defined(__SSE2__)
  for (; m0 + 16 <= M; m0 += 16)
    for (int n0 = 0; n0 < N; n0 += 4) gemm_block16(AT, B, C, M, K, N, m0, n0, std::min(4, N - n0));
  for (; m0 + 8 <= M; m0 += 8)
    for (int n0 = 0; n0 < N; n0 += 4) gemm_block8(AT, B, C, M, K, N, m0, n0, std::min(4, N - n0));
#endif
  for (; m0 < M; ++m0) {
    for (int n0 = 0; n0 < N; ++n0) {
      double acc = 0.0;
      const double* a = AT + m0;
      const double* b = B + n0;
      for (int k = 0; k < K; ++k, a += M, b += N) acc += a[0] * b[0];
      C[(std::size_t)m0 * N + n0] += acc;
    }
  }
}

void transpose(const double* src, int rows, int cols, double* dst) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) dst[(std::size_t)c * rows + r] = src[(std::size_t)r * cols + c];
}

thread_local std::vector<double> tl_col, tl_at, tl_scratch, tl_scratch2;

const std::string* fault_op_name() {
  static std::string name;
  return &name;
}
std::string& fault_op_mut() { return const_cast<std::string&>(*fault_op_name()); }

void check_chw(const Tensor& t, const char* op, const char* what) {
  if (t.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": " + what + " must be rank-3 [C,H,W], got rank " +
                                std::to_string(t.rank()));
}

}  // namespace

// ---- Tensor ------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape) {
  auto impl = std::make_shared<Impl>();
  std::int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign((std::size_t)n, 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  std::int64_t n = shape_numel(shape);
  if ((std::int64_t)values.size() != n)
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values for shape of " + std::to_string(n) + " elements");
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on)
    impl_->grad.assign(impl_->data.size(), 0.0);
  else
    impl_->grad.clear();
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::scalar() const {
  if (!impl_ || impl_->data.size() != 1)
    throw std::invalid_argument("tensor: scalar() on tensor of size " +
                                std::to_string(impl_ ? impl_->data.size() : 0));
  return impl_->data[0];
}

bool Tensor::all_finite() const {
  for (double v : impl_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- Tape --------------------------------------------------------------

int Tape::assign_id(const Tensor& t) {
  if (t.impl()->tape_id < 0) t.impl()->tape_id = next_id_++;
  return t.impl()->tape_id;
}

void Tape::record(const char* name, std::initializer_list<Tensor> inputs, Tensor& output,
                  std::function<void()> backward) {
  record(name, std::vector<Tensor>(inputs), output, std::move(backward));
}

void Tape::record(const char* name, const std::vector<Tensor>& inputs, Tensor& output,
                  std::function<void()> backward) {
  OpRecord op;
  op.name = name;
  for (const Tensor& in : inputs) op.input_ids.push_back(assign_id(in));
  op.output_id = assign_id(output);
  op.backward = std::move(backward);
  op.output = output.impl_ptr();
  ops_.push_back(std::move(op));
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got size " +
                                std::to_string(loss.size()));
  // grads of recorded outputs are transient per backward pass; leaves keep theirs
  for (OpRecord& op : ops_) {
    if (op.output->requires_grad) std::fill(op.output->grad.begin(), op.output->grad.end(), 0.0);
  }
  if (loss.requires_grad()) loss.impl()->grad[0] += 1.0;
  last_backward_ops_ = 0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    it->backward();
    ++last_backward_ops_;
  }
}

void Tape::clear() {
  ops_.clear();
  next_id_ = 0;
}

void BatchNormState::init(int channels) {
  running_mean.assign(channels, 0.0);
  running_var.assign(channels, 1.0);
}

void set_gradient_fault(const std::string& op_name) { fault_op_mut() = op_name; }
void clear_gradient_fault() { fault_op_mut().clear(); }
double gradient_fault_scale(const char* op_name) {
  return *fault_op_name() == op_name ? 2.0 : 1.0;
}

// ---- op helpers ---------------------------------------------------------

namespace {

Tensor make_output(std::vector<int> shape, std::initializer_list<Tensor> inputs, Tape* tape) {
  Tensor out = Tensor::zeros(std::move(shape));
  if (tape) {
    bool needs = false;
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
    if (needs) out.set_requires_grad(true);
  }
  return out;
}

bool should_record(Tape* tape, const Tensor& out) { return tape && out.requires_grad(); }

}  // namespace

// ---- conv2d -------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int padding,
              Tape* tape) {
  check_chw(input, "conv2d", "input");
  if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3)
    throw std::invalid_argument("conv2d: kernels must be [C_out,C_in,3,3]");
  if (padding != 0 && padding != 1)
    throw std::invalid_argument("conv2d: padding must be 0 or 1, got " + std::to_string(padding));
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int CO = kernels.dim(0);
  if (kernels.dim(1) != C)
    throw std::invalid_argument("conv2d: kernel input channels " + std::to_string(kernels.dim(1)) +
                                " != input channels " + std::to_string(C));
  if (bias.rank() != 1 || bias.dim(0) != CO)
    throw std::invalid_argument("conv2d: bias length " + std::to_string(bias.size()) +
                                " != output channels " + std::to_string(CO));
  if (padding == 0 && (H < 3 || W < 3))
    throw std::invalid_argument("conv2d: spatial dims " + std::to_string(H) + "x" +
                                std::to_string(W) + " < 3 with padding 0");
  const int OH = H + 2 * padding - 2, OW = W + 2 * padding - 2;
  const int K = C * 9, N = OH * OW;

  Tensor out = make_output({CO, OH, OW}, {input, kernels, bias}, tape);

  auto im2col = [=](const double* in, double* col) {
    for (int ci = 0; ci < C; ++ci) {
      const double* ch = in + (std::size_t)ci * H * W;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          double* row = col + (std::size_t)((ci * 3 + ky) * 3 + kx) * N;
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = oy + ky - padding;
            double* dst = row + (std::size_t)oy * OW;
            if (iy < 0 || iy >= H) {
              std::fill(dst, dst + OW, 0.0);
              continue;
            }
            const int ix0 = kx - padding;
            int x0 = std::max(0, -ix0), x1 = std::min(OW, W - ix0);
            for (int ox = 0; ox < x0; ++ox) dst[ox] = 0.0;
            const double* src = ch + (std::size_t)iy * W + ix0;
            for (int ox = x0; ox < x1; ++ox) dst[ox] = src[ox];
            for (int ox = x1; ox < OW; ++ox) dst[ox] = 0.0;
          }
        }
    }
  };

  tl_col.resize((std::size_t)K * N);
  im2col(input.data(), tl_col.data());
  tl_at.resize((std::size_t)K * CO);
  transpose(kernels.data(), CO, K, tl_at.data());
  for (int co = 0; co < CO; ++co)
    std::fill(out.data() + (std::size_t)co * N, out.data() + (std::size_t)(co + 1) * N,
              bias.data()[co]);
  gemm_at(tl_at.data(), tl_col.data(), out.data(), CO, K, N);

  if (should_record(tape, out)) {
    Tensor in = input, k = kernels, b = bias, o = out;
    tape->record("conv2d", {input, kernels, bias}, out, [=]() mutable {
      const double fs = gradient_fault_scale("conv2d");
      const double* dout = o.grad();
      tl_col.resize((std::size_t)K * N);
      im2col(in.data(), tl_col.data());
      if (b.requires_grad()) {
        double* db = b.grad();
        for (int co = 0; co < CO; ++co) {
          double s = 0.0;
          const double* row = dout + (std::size_t)co * N;
          for (int n = 0; n < N; ++n) s += row[n];
          db[co] += fs * s;
        }
      }
      if (k.requires_grad()) {
        // dW[co][k] += sum_n dout[co][n] * col[k][n]
        tl_scratch.resize((std::size_t)N * CO);
        transpose(dout, CO, N, tl_scratch.data());
        tl_scratch2.resize((std::size_t)N * K);
        transpose(tl_col.data(), K, N, tl_scratch2.data());
        if (fs == 1.0) {
          gemm_at(tl_scratch.data(), tl_scratch2.data(), k.grad(), CO, N, K);
        } else {
          std::vector<double> dk((std::size_t)CO * K, 0.0);
          gemm_at(tl_scratch.data(), tl_scratch2.data(), dk.data(), CO, N, K);
          double* g = k.grad();
          for (std::size_t i = 0; i < dk.size(); ++i) g[i] += fs * dk[i];
        }
      }
      if (in.requires_grad()) {
        // dcol[k][n] = sum_co W[co][k] * dout[co][n], then fold back
        tl_scratch.assign((std::size_t)K * N, 0.0);
        gemm_at(k.data(), dout, tl_scratch.data(), K, CO, N);
        double* din = in.grad();
        for (int ci = 0; ci < C; ++ci) {
          double* ch = din + (std::size_t)ci * H * W;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const double* row = tl_scratch.data() + (std::size_t)((ci * 3 + ky) * 3 + kx) * N;
              for (int oy = 0; oy < OH; ++oy) {
                const int iy = oy + ky - padding;
                if (iy < 0 || iy >= H) continue;
                const int ix0 = kx - padding;
                int x0 = std::max(0, -ix0), x1 = std::min(OW, W - ix0);
                double* dst = ch + (std::size_t)iy * W + ix0;
                const double* src = row + (std::size_t)oy * OW;
                for (int ox = x0; ox < x1; ++ox) dst[ox] += fs * src[ox];
              }
            }
        }
      }
    });
  }
  return out;
}

// ---- batchnorm ----------------------------------------------------------

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool train, Tape* tape) {
  check_chw(input, "batchnorm", "input");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int HW = H * W;
  if (gamma.size() != C || beta.size() != C)
    throw std::invalid_argument("batchnorm: gamma/beta length " + std::to_string(gamma.size()) +
                                " != channels " + std::to_string(C));
  if ((int)state.running_mean.size() != C)
    throw std::invalid_argument("batchnorm: running stats have " +
                                std::to_string(state.running_mean.size()) + " channels, input has " +
                                std::to_string(C));
  constexpr double kEps = 1e-5;

  Tensor out = make_output({C, H, W}, {input, gamma, beta}, tape);
  std::vector<double> mean(C), invstd(C);
  const double* x = input.data();
  for (int c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      mu = 0.0;
      const double* ch = x + (std::size_t)c * HW;
      for (int i = 0; i < HW; ++i) mu += ch[i];
      mu /= HW;
      var = 0.0;
      for (int i = 0; i < HW; ++i) {
        const double d = ch[i] - mu;
        var += d * d;
      }
      var /= HW;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    mean[c] = mu;
    invstd[c] = 1.0 / std::sqrt(var + kEps);
  }
  double* y = out.data();
  for (int c = 0; c < C; ++c) {
    const double g = gamma.data()[c], b = beta.data()[c], mu = mean[c], is = invstd[c];
    const double* ch = x + (std::size_t)c * HW;
    double* oc = y + (std::size_t)c * HW;
    for (int i = 0; i < HW; ++i) oc[i] = g * (ch[i] - mu) * is + b;
  }

  if (should_record(tape, out)) {
    Tensor in = input, ga = gamma, be = beta, o = out;
    auto mu = std::make_shared<std::vector<double>>(std::move(mean));
    auto is = std::make_shared<std::vector<double>>(std::move(invstd));
    tape->record("batchnorm", {input, gamma, beta}, out, [=]() mutable {
      const double fs = gradient_fault_scale("batchnorm");
      const double* dy = o.grad();
      const double* xv = in.data();
      for (int c = 0; c < C; ++c) {
        const double g = ga.data()[c], m = (*mu)[c], s = (*is)[c];
        const double* ch = xv + (std::size_t)c * HW;
        const double* dyc = dy + (std::size_t)c * HW;
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int i = 0; i < HW; ++i) {
          sum_dy += dyc[i];
          sum_dy_xhat += dyc[i] * (ch[i] - m) * s;
        }
        if (ga.requires_grad()) ga.grad()[c] += fs * sum_dy_xhat;
        if (be.requires_grad()) be.grad()[c] += fs * sum_dy;
        if (in.requires_grad()) {
          double* dx = in.grad() + (std::size_t)c * HW;
          if (train) {
            const double inv_n = 1.0 / HW;
            for (int i = 0; i < HW; ++i) {
              const double xhat = (ch[i] - m) * s;
              dx[i] += fs * g * s * (dyc[i] - inv_n * sum_dy - inv_n * xhat * sum_dy_xhat);
            }
          } else {
            for (int i = 0; i < HW; ++i) dx[i] += fs * g * s * dyc[i];
          }
        }
      }
    });
  }
  return out;
}

// ---- elementwise activations ---------------------------------------------

Tensor relu(const Tensor& input, Tape* tape) {
  Tensor out = make_output(input.shape(), {input}, tape);
  const double* x = input.data();
  double* y = out.data();
  const std::int64_t n = input.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (should_record(tape, out)) {
    Tensor in = input, o = out;
    tape->record("relu", {input}, out, [=]() mutable {
      const double fs = gradient_fault_scale("relu");
      const double* xv = in.data();
      const double* dy = o.grad();
      double* dx = in.grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (xv[i] > 0.0) dx[i] += fs * dy[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& input, Tape* tape) {
  Tensor out = make_output(input.shape(), {input}, tape);
  const double* x = input.data();
  double* y = out.data();
  const std::int64_t n = input.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
  if (should_record(tape, out)) {
    Tensor in = input, o = out;
    tape->record("sigmoid", {input}, out, [=]() mutable {
      const double fs = gradient_fault_scale("sigmoid");
      const double* yv = o.data();
      const double* dy = o.grad();
      double* dx = in.grad();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += fs * dy[i] * yv[i] * (1.0 - yv[i]);
    });
  }
  return out;
}

// ---- maxpool2d ------------------------------------------------------------

Tensor maxpool2d(const Tensor& input, Tape* tape) {
  check_chw(input, "maxpool2d", "input");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H < 2 || W < 2)
    throw std::invalid_argument("maxpool2d: spatial dims " + std::to_string(H) + "x" +
                                std::to_string(W) + " < 2");
  const int OH = H / 2, OW = W / 2;
  Tensor out = make_output({C, OH, OW}, {input}, tape);
  auto argmax = std::make_shared<std::vector<std::int32_t>>((std::size_t)C * OH * OW);
  const double* x = input.data();
  double* y = out.data();
  for (int c = 0; c < C; ++c) {
    const double* ch = x + (std::size_t)c * H * W;
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        int best = (oy * 2) * W + ox * 2;
        // first occurrence in row-major order wins ties
        const int cand[3] = {(oy * 2) * W + ox * 2 + 1, (oy * 2 + 1) * W + ox * 2,
                             (oy * 2 + 1) * W + ox * 2 + 1};
        for (int idx : cand)
          if (ch[idx] > ch[best]) best = idx;
        const std::size_t oidx = ((std::size_t)c * OH + oy) * OW + ox;
        y[oidx] = ch[best];
        (*argmax)[oidx] = best;
      }
  }
  if (should_record(tape, out)) {
    Tensor in = input, o = out;
    tape->record("maxpool2d", {input}, out, [=]() mutable {
      const double fs = gradient_fault_scale("maxpool2d");
      const double* dy = o.grad();
      double* dx = in.grad();
      const std::int64_t on = (std::int64_t)C * OH * OW;
      for (std::int64_t i = 0; i < on; ++i) {
        const int c = (int)(i / (OH * OW));
        dx[(std::size_t)c * H * W + (*argmax)[i]] += fs * dy[i];
      }
    });
  }
  return out;
}

// ---- dense -----------------------------------------------------------------

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias, Tape* tape) {
  if (input.rank() != 1) throw std::invalid_argument("dense: input must be rank-1");
  if (weights.rank() != 2)
    throw std::invalid_argument("dense: weights must be rank-2 [out,in]");
  const int DI = input.dim(0), DO = weights.dim(0);
  if (weights.dim(1) != DI)
    throw std::invalid_argument("dense: weight columns " + std::to_string(weights.dim(1)) +
                                " != input length " + std::to_string(DI));
  if (bias.size() != DO)
    throw std::invalid_argument("dense: bias length " + std::to_string(bias.size()) +
                                " != output length " + std::to_string(DO));
  Tensor out = make_output({DO}, {input, weights, bias}, tape);
  const double* x = input.data();
  const double* w = weights.data();
  double* y = out.data();
  for (int o = 0; o < DO; ++o) {
    double acc = bias.data()[o];
    const double* row = w + (std::size_t)o * DI;
    for (int i = 0; i < DI; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  if (should_record(tape, out)) {
    Tensor in = input, wt = weights, b = bias, ot = out;
    tape->record("dense", {input, weights, bias}, out, [=]() mutable {
      const double fs = gradient_fault_scale("dense");
      const double* dy = ot.grad();
      if (b.requires_grad()) {
        double* db = b.grad();
        for (int o = 0; o < DO; ++o) db[o] += fs * dy[o];
      }
      if (wt.requires_grad()) {
        double* dw = wt.grad();
        const double* xv = in.data();
        for (int o = 0; o < DO; ++o) {
          const double g = fs * dy[o];
          double* row = dw + (std::size_t)o * DI;
          for (int i = 0; i < DI; ++i) row[i] += g * xv[i];
        }
      }
      if (in.requires_grad()) {
        double* dx = in.grad();
        const double* wv = wt.data();
        for (int o = 0; o < DO; ++o) {
          const double g = fs * dy[o];
          const double* row = wv + (std::size_t)o * DI;
          for (int i = 0; i < DI; ++i) dx[i] += g * row[i];
        }
      }
    });
  }
  return out;
}

// ---- concat ----------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& inputs, Tape* tape) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  check_chw(inputs[0], "concat_channels", "input");
  const int H = inputs[0].dim(1), W = inputs[0].dim(2);
  int C = 0;
  for (const Tensor& t : inputs) {
    check_chw(t, "concat_channels", "input");
    if (t.dim(1) != H || t.dim(2) != W)
      throw std::invalid_argument("concat_channels: spatial mismatch " + std::to_string(t.dim(1)) +
                                  "x" + std::to_string(t.dim(2)) + " vs " + std::to_string(H) +
                                  "x" + std::to_string(W));
    C += t.dim(0);
  }
  Tensor out = Tensor::zeros({C, H, W});
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (tape && needs) out.set_requires_grad(true);
  double* y = out.data();
  std::size_t off = 0;
  for (const Tensor& t : inputs) {
    std::memcpy(y + off, t.data(), (std::size_t)t.size() * sizeof(double));
    off += t.size();
  }
  if (should_record(tape, out)) {
    auto ins = std::make_shared<std::vector<Tensor>>(inputs);
    Tensor o = out;
    tape->record("concat_channels", inputs, out, [ins, o]() mutable {
      const double* dy = o.grad();
      std::size_t off2 = 0;
      for (Tensor& t : *ins) {
        if (t.requires_grad()) {
          double* dx = t.grad();
          const std::int64_t n = t.size();
          for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[off2 + i];
        }
        off2 += t.size();
      }
    });
  }
  return out;
}

Tensor concat_flat(const std::vector<Tensor>& inputs, Tape* tape) {
  if (inputs.empty()) throw std::invalid_argument("concat_flat: no inputs");
  std::int64_t n = 0;
  for (const Tensor& t : inputs) n += t.size();
  Tensor out = Tensor::zeros({(int)n});
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (tape && needs) out.set_requires_grad(true);
  double* y = out.data();
  std::size_t off = 0;
  for (const Tensor& t : inputs) {
    std::memcpy(y + off, t.data(), (std::size_t)t.size() * sizeof(double));
    off += t.size();
  }
  if (should_record(tape, out)) {
    auto ins = std::make_shared<std::vector<Tensor>>(inputs);
    Tensor o = out;
    tape->record("concat_flat", inputs, out, [ins, o]() mutable {
      const double* dy = o.grad();
      std::size_t off2 = 0;
      for (Tensor& t : *ins) {
        if (t.requires_grad()) {
          double* dx = t.grad();
          const std::int64_t m = t.size();
          for (std::int64_t i = 0; i < m; ++i) dx[i] += dy[off2 + i];
        }
        off2 += t.size();
      }
    });
  }
  return out;
}

// ---- global_avg_pool --------------------------------------------------------

Tensor global_avg_pool(const Tensor& input, Tape* tape) {
  check_chw(input, "global_avg_pool", "input");
  const int C = input.dim(0), HW = input.dim(1) * input.dim(2);
  Tensor out = make_output({C}, {input}, tape);
  const double* x = input.data();
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    const double* ch = x + (std::size_t)c * HW;
    for (int i = 0; i < HW; ++i) s += ch[i];
    out.data()[c] = s / HW;
  }
  if (should_record(tape, out)) {
    Tensor in = input, o = out;
    tape->record("global_avg_pool", {input}, out, [=]() mutable {
      const double* dy = o.grad();
      double* dx = in.grad();
      for (int c = 0; c < C; ++c) {
        const double g = dy[c] / HW;
        double* ch = dx + (std::size_t)c * HW;
        for (int i = 0; i < HW; ++i) ch[i] += g;
      }
    });
  }
  return out;
}

// ---- arithmetic ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  Tensor out = make_output(a.shape(), {a, b}, tape);
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (should_record(tape, out)) {
    Tensor ta = a, tb = b, o = out;
    tape->record("add", {a, b}, out, [=]() mutable {
      const double* dy = o.grad();
      if (ta.requires_grad())
        for (std::int64_t i = 0; i < n; ++i) ta.grad()[i] += dy[i];
      if (tb.requires_grad())
        for (std::int64_t i = 0; i < n; ++i) tb.grad()[i] += dy[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor, Tape* tape) {
  Tensor out = make_output(a.shape(), {a}, tape);
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = factor * a.data()[i];
  if (should_record(tape, out)) {
    Tensor ta = a;
    Tensor o = out;
    tape->record("scale", {a}, out, [=]() mutable {
      const double* dy = o.grad();
      for (std::int64_t i = 0; i < n; ++i) ta.grad()[i] += factor * dy[i];
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& scalar_gate, const Tensor& t, Tape* tape) {
  if (scalar_gate.size() != 1) throw std::invalid_argument("mul_scalar: gate must be scalar");
  Tensor out = make_output(t.shape(), {scalar_gate, t}, tape);
  const double s = scalar_gate.data()[0];
  const std::int64_t n = t.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = s * t.data()[i];
  if (should_record(tape, out)) {
    Tensor g = scalar_gate, tt = t, o = out;
    tape->record("mul_scalar", {scalar_gate, t}, out, [=]() mutable {
      const double* dy = o.grad();
      if (g.requires_grad()) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += dy[i] * tt.data()[i];
        g.grad()[0] += acc;
      }
      if (tt.requires_grad()) {
        const double sv = g.data()[0];
        for (std::int64_t i = 0; i < n; ++i) tt.grad()[i] += sv * dy[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& t, std::vector<int> shape, Tape* tape) {
  if (shape_numel(shape) != t.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out = make_output(shape, {t}, tape);
  std::memcpy(out.data(), t.data(), (std::size_t)t.size() * sizeof(double));
  if (should_record(tape, out)) {
    Tensor in = t, o = out;
    const std::int64_t n = t.size();
    tape->record("reshape", {t}, out, [=]() mutable {
      const double* dy = o.grad();
      double* dx = in.grad();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i];
    });
  }
  return out;
}

Tensor reduce_sum(const Tensor& t, Tape* tape) {
  Tensor out = make_output({1}, {t}, tape);
  const std::int64_t n = t.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += t.data()[i];
  out.data()[0] = s;
  if (should_record(tape, out)) {
    Tensor in = t, o = out;
    tape->record("reduce_sum", {t}, out, [=]() mutable {
      const double g = o.grad()[0];
      double* dx = in.grad();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor sq_diff_sum(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) throw std::invalid_argument("sq_diff_sum: shape mismatch");
  Tensor out = make_output({1}, {a, b}, tape);
  const std::int64_t n = a.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  out.data()[0] = s;
  if (should_record(tape, out)) {
    Tensor ta = a, tb = b, o = out;
    tape->record("sq_diff_sum", {a, b}, out, [=]() mutable {
      const double g = o.grad()[0];
      for (std::int64_t i = 0; i < n; ++i) {
        const double d = 2.0 * g * (ta.data()[i] - tb.data()[i]);
        if (ta.requires_grad()) ta.grad()[i] += d;
        if (tb.requires_grad()) tb.grad()[i] -= d;
      }
    });
  }
  return out;
}

Tensor mse_vs_targets(const Tensor& v, const std::vector<double>& targets, Tape* tape) {
  if ((std::int64_t)targets.size() != v.size())
    throw std::invalid_argument("mse_vs_targets: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(v.size()) + " values");
  Tensor out = make_output({1}, {v}, tape);
  const std::int64_t n = v.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = v.data()[i] - targets[i];
    s += d * d;
  }
  out.data()[0] = s / n;
  if (should_record(tape, out)) {
    Tensor tv = v, o = out;
    auto tg = std::make_shared<std::vector<double>>(targets);
    tape->record("mse_vs_targets", {v}, out, [=]() mutable {
      const double g = o.grad()[0];
      for (std::int64_t i = 0; i < n; ++i)
        tv.grad()[i] += g * 2.0 * (tv.data()[i] - (*tg)[i]) / n;
    });
  }
  return out;
}

Tensor mean_abs(const Tensor& v, Tape* tape) {
  Tensor out = make_output({1}, {v}, tape);
  const std::int64_t n = v.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += std::abs(v.data()[i]);
  out.data()[0] = s / n;
  if (should_record(tape, out)) {
    Tensor tv = v, o = out;
    tape->record("mean_abs", {v}, out, [=]() mutable {
      const double g = o.grad()[0];
      for (std::int64_t i = 0; i < n; ++i) {
        const double x = tv.data()[i];
        tv.grad()[i] += g * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)) / n;
      }
    });
  }
  return out;
}

Tensor weighted_sum3(const Tensor& a, const Tensor& b, const Tensor& c, double wb, double wc,
                     Tape* tape) {
  if (a.size() != 1 || b.size() != 1 || c.size() != 1)
    throw std::invalid_argument("weighted_sum3: scalar inputs required");
  Tensor out = make_output({1}, {a, b, c}, tape);
  out.data()[0] = a.data()[0] + wb * b.data()[0] + wc * c.data()[0];
  if (should_record(tape, out)) {
    Tensor ta = a, tb = b, tc = c, o = out;
    tape->record("weighted_sum3", {a, b, c}, out, [=]() mutable {
      const double g = o.grad()[0];
      if (ta.requires_grad()) ta.grad()[0] += g;
      if (tb.requires_grad()) tb.grad()[0] += wb * g;
      if (tc.requires_grad()) tc.grad()[0] += wc * g;
    });
  }
  return out;
}

// ---- Adam -----------------------------------------------------------------

void Adam::add_group(std::vector<Tensor> params, double lr) {
  Group g;
  g.params = std::move(params);
  g.base_lr = lr;
  for (Tensor& p : g.params) {
    g.m.emplace_back(p.size(), 0.0);
    g.v.emplace_back(p.size(), 0.0);
  }
  groups_.push_back(std::move(g));
}

void Adam::set_lr_scale(double scale) {
  for (Group& g : groups_) g.lr_scale = scale;
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1, (double)step_count_);
  const double bc2 = 1.0 - std::pow(beta2, (double)step_count_);
  for (Group& g : groups_) {
    const double lr = g.base_lr * g.lr_scale;
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      Tensor& p = g.params[pi];
      const double* grad = p.grad();
      double* mv = g.m[pi].data();
      double* vv = g.v[pi].data();
      double* x = p.data();
      const std::int64_t n = p.size();
      for (std::int64_t i = 0; i < n; ++i) {
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * grad[i];
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = mv[i] / bc1;
        const double vhat = vv[i] / bc2;
        x[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
}

void Adam::zero_grad() {
  for (Group& g : groups_)
    for (Tensor& p : g.params) p.zero_grad();
}

}  // namespace abnet
