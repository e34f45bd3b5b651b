#include "vitta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "op_common.hpp"

namespace vitta {

std::int64_t numel_of(const Dims& dims) {
  std::int64_t n = 1;
  for (auto d : dims) {
    if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + dims_to_string(dims));
    n *= d;
  }
  return n;
}

std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
float* TensorImpl::grad_ptr() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad.data();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Dims dims, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  std::int64_t n = numel_of(dims);
  impl->dims = std::move(dims);
  impl->data.assign(static_cast<std::size_t>(n), 0.0f);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Dims dims, float value) {
  Tensor t = zeros(std::move(dims));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Dims dims, std::vector<float> data, bool requires_grad) {
  std::int64_t n = numel_of(dims);
  if (n != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("from_data: " + dims_to_string(dims) + " needs " + std::to_string(n) +
                                " values, got " + std::to_string(data.size()));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->dims = std::move(dims);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar, dims " + dims_to_string(dims()));
  return impl_->data[0];
}

Tensor Tensor::detached() const {
  return Tensor::from_data(impl_->dims, impl_->data, false);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local Tape* t_active_tape = nullptr;
}

Tape::Tape() : prev_(t_active_tape) { t_active_tape = this; }

Tape::~Tape() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

void Tape::record(std::vector<std::shared_ptr<detail::TensorImpl>> outputs,
                  std::function<void()> fn) {
  nodes_.push_back(Node{std::move(outputs), std::move(fn)});
}

void record_node(std::vector<std::shared_ptr<detail::TensorImpl>> outputs,
                 std::function<void()> fn) {
  if (Tape* t = Tape::active()) t->record(std::move(outputs), std::move(fn));
}

Tensor make_op_output(Dims dims, const std::vector<const Tensor*>& inputs) {
  Tensor out = Tensor::zeros(std::move(dims));
  if (Tape::active()) {
    for (const Tensor* in : inputs) {
      if (in->defined() && wants_grad(*in->impl())) {
        out.impl()->grad_required = true;
        break;
      }
    }
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("Tape::backward: tape already consumed; re-record the forward");
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("Tape::backward: loss must be scalar");
  if (!loss.impl()->grad_required && !nodes_.empty())
    throw std::runtime_error("Tape::backward: loss was not recorded on the active tape");
  consumed_ = true;
  loss.impl()->grad.assign(1, 1.0f);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->fn();
    // An impl is written by exactly one node; once that node has propagated,
    // its output grads are dead. Leaves are never op outputs.
    for (auto& out : it->outputs) {
      out->grad.clear();
      out->grad.shrink_to_fit();
    }
    it->fn = nullptr;  // release captured activations as we go
  }
  nodes_.clear();
}

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

bool all_finite(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.dims() == b.dims(),
          "add: shape mismatch " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
  Tensor out = make_op_output(a.dims(), {&a, &b});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.mutable_data().data();
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (out.impl()->grad_required) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record_node({oi}, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      std::int64_t n = oi->numel();
      if (wants_grad(*ai)) {
        float* ga = ai->grad_ptr();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (wants_grad(*bi)) {
        float* gb = bi->grad_ptr();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = make_op_output(a.dims(), {&a});
  const float* pa = a.data().data();
  float* po = out.mutable_data().data();
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = c * pa[i];
  if (out.impl()->grad_required) {
    auto ai = a.impl();
    auto oi = out.impl();
    record_node({oi}, [ai, oi, c] {
      if (oi->grad.empty() || !wants_grad(*ai)) return;
      const float* g = oi->grad.data();
      float* ga = ai->grad_ptr();
      std::int64_t n = oi->numel();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += c * g[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_op_output({1}, {&x});
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  out.mutable_data()[0] = static_cast<float>(acc);
  if (out.impl()->grad_required) {
    auto xi = x.impl();
    auto oi = out.impl();
    record_node({oi}, [xi, oi] {
      if (oi->grad.empty() || !wants_grad(*xi)) return;
      float g = oi->grad[0];
      float* gx = xi->grad_ptr();
      std::int64_t n = xi->numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = make_op_output(x.dims(), {&x});
  const float* px = x.data().data();
  float* po = out.mutable_data().data();
  std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > 0.0f ? px[i] : 0.0f;
  if (out.impl()->grad_required) {
    auto xi = x.impl();
    auto oi = out.impl();
    record_node({oi}, [xi, oi] {
      if (oi->grad.empty() || !wants_grad(*xi)) return;
      const float* g = oi->grad.data();
      const float* px = xi->data.data();
      float* gx = xi->grad_ptr();
      std::int64_t n = xi->numel();
      for (std::int64_t i = 0; i < n; ++i)
        if (px[i] > 0.0f) gx[i] += g[i];  // subgradient 0 at x == 0
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.dims().size() == 2, "linear: input must be [N,C], got " + dims_to_string(x.dims()));
  require(w.dims().size() == 2, "linear: weight must be [K,C], got " + dims_to_string(w.dims()));
  std::int64_t N = x.dims()[0], C = x.dims()[1], K = w.dims()[0];
  require(w.dims()[1] == C, "linear: weight columns " + std::to_string(w.dims()[1]) +
                                " != input channels " + std::to_string(C));
  require(b.dims() == Dims{K}, "linear: bias must be [K]");
  Tensor out = make_op_output({N, K}, {&x, &w, &b});
  const float* px = x.data().data();
  const float* pw = w.data().data();
  const float* pb = b.data().data();
  float* po = out.mutable_data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t k = 0; k < K; ++k) {
      double acc = pb[k];
      const float* xr = px + n * C;
      const float* wr = pw + k * C;
      for (std::int64_t c = 0; c < C; ++c) acc += static_cast<double>(xr[c]) * wr[c];
      po[n * K + k] = static_cast<float>(acc);
    }
  }
  if (out.impl()->grad_required) {
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    record_node({oi}, [xi, wi, bi, oi, N, C, K] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      if (wants_grad(*xi)) {
        float* gx = xi->grad_ptr();
        const float* pw = wi->data.data();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t k = 0; k < K; ++k) {
            float gv = g[n * K + k];
            for (std::int64_t c = 0; c < C; ++c) gx[n * C + c] += gv * pw[k * C + c];
          }
      }
      if (wants_grad(*wi)) {
        float* gw = wi->grad_ptr();
        const float* px = xi->data.data();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t k = 0; k < K; ++k) {
            float gv = g[n * K + k];
            for (std::int64_t c = 0; c < C; ++c) gw[k * C + c] += gv * px[n * C + c];
          }
      }
      if (wants_grad(*bi)) {
        float* gb = bi->grad_ptr();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t k = 0; k < K; ++k) gb[k] += g[n * K + k];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  require(x.dims().size() == 2, "softmax: input must be [N,K], got " + dims_to_string(x.dims()));
  std::int64_t N = x.dims()[0], K = x.dims()[1];
  Tensor out = make_op_output(x.dims(), {&x});
  const float* px = x.data().data();
  float* po = out.mutable_data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    const float* xr = px + n * K;
    float* orow = po + n * K;
    float mx = xr[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
    double denom = 0.0;
    for (std::int64_t k = 0; k < K; ++k) {
      orow[k] = std::exp(xr[k] - mx);
      denom += orow[k];
    }
    float inv = static_cast<float>(1.0 / denom);
    for (std::int64_t k = 0; k < K; ++k) orow[k] *= inv;
  }
  if (out.impl()->grad_required) {
    auto xi = x.impl();
    auto oi = out.impl();
    record_node({oi}, [xi, oi, N, K] {
      if (oi->grad.empty() || !wants_grad(*xi)) return;
      const float* g = oi->grad.data();
      const float* s = oi->data.data();
      float* gx = xi->grad_ptr();
      for (std::int64_t n = 0; n < N; ++n) {
        double dot = 0.0;
        for (std::int64_t k = 0; k < K; ++k) dot += static_cast<double>(g[n * K + k]) * s[n * K + k];
        for (std::int64_t k = 0; k < K; ++k)
          gx[n * K + k] += s[n * K + k] * (g[n * K + k] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor avg_pool_hw2(const Tensor& x) {
  require(x.dims().size() == 5, "avg_pool_hw2: input must be [N,C,T,H,W]");
  std::int64_t N = x.dims()[0], C = x.dims()[1], T = x.dims()[2], H = x.dims()[3], W = x.dims()[4];
  require(H % 2 == 0 && W % 2 == 0,
          "avg_pool_hw2: H and W must be even, got " + dims_to_string(x.dims()));
  std::int64_t Ho = H / 2, Wo = W / 2;
  Tensor out = make_op_output({N, C, T, Ho, Wo}, {&x});
  const float* px = x.data().data();
  float* po = out.mutable_data().data();
  std::int64_t planes = N * C * T;
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* ip = px + p * H * W;
    float* op = po + p * Ho * Wo;
    for (std::int64_t ho = 0; ho < Ho; ++ho)
      for (std::int64_t wo = 0; wo < Wo; ++wo) {
        const float* q = ip + (2 * ho) * W + 2 * wo;
        op[ho * Wo + wo] = 0.25f * (q[0] + q[1] + q[W] + q[W + 1]);
      }
  }
  if (out.impl()->grad_required) {
    auto xi = x.impl();
    auto oi = out.impl();
    record_node({oi}, [xi, oi, planes, H, W, Ho, Wo] {
      if (oi->grad.empty() || !wants_grad(*xi)) return;
      const float* g = oi->grad.data();
      float* gx = xi->grad_ptr();
      for (std::int64_t p = 0; p < planes; ++p) {
        const float* gp = g + p * Ho * Wo;
        float* gxp = gx + p * H * W;
        for (std::int64_t ho = 0; ho < Ho; ++ho)
          for (std::int64_t wo = 0; wo < Wo; ++wo) {
            float gv = 0.25f * gp[ho * Wo + wo];
            float* q = gxp + (2 * ho) * W + 2 * wo;
            q[0] += gv;
            q[1] += gv;
            q[W] += gv;
            q[W + 1] += gv;
          }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.dims().size() == 5, "global_avg_pool: input must be [N,C,T,H,W]");
  std::int64_t N = x.dims()[0], C = x.dims()[1];
  std::int64_t V = x.dims()[2] * x.dims()[3] * x.dims()[4];
  Tensor out = make_op_output({N, C}, {&x});
  const float* px = x.data().data();
  float* po = out.mutable_data().data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const float* p = px + nc * V;
    for (std::int64_t v = 0; v < V; ++v) acc += p[v];
    po[nc] = static_cast<float>(acc / static_cast<double>(V));
  }
  if (out.impl()->grad_required) {
    auto xi = x.impl();
    auto oi = out.impl();
    record_node({oi}, [xi, oi, N, C, V] {
      if (oi->grad.empty() || !wants_grad(*xi)) return;
      const float* g = oi->grad.data();
      float* gx = xi->grad_ptr();
      float inv = 1.0f / static_cast<float>(V);
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        float gv = g[nc] * inv;
        float* p = gx + nc * V;
        for (std::int64_t v = 0; v < V; ++v) p[v] += gv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace {

struct ChannelMoments {
  std::vector<float> mean, var;  // population variance
};

ChannelMoments batch_moments(const Tensor& x) {
  std::int64_t N = x.dims()[0], C = x.dims()[1];
  std::int64_t V = x.dims()[2] * x.dims()[3] * x.dims()[4];
  ChannelMoments m;
  m.mean.resize(C);
  m.var.resize(C);
  const float* px = x.data().data();
  const double cnt = static_cast<double>(N * V);
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const float* p = px + (n * C + c) * V;
      for (std::int64_t v = 0; v < V; ++v) {
        double d = p[v];
        s += d;
        s2 += d * d;
      }
    }
    double mu = s / cnt;
    m.mean[c] = static_cast<float>(mu);
    m.var[c] = static_cast<float>(std::max(0.0, s2 / cnt - mu * mu));
  }
  return m;
}

}  // namespace

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BatchNormMode mode,
                  float eps, float momentum) {
  require(eps > 0.0f, "batch_norm: eps must be > 0");
  require(x.dims().size() == 5, "batch_norm: input must be [N,C,T,H,W]");
  std::int64_t N = x.dims()[0], C = x.dims()[1];
  std::int64_t V = x.dims()[2] * x.dims()[3] * x.dims()[4];
  require(gamma.dims() == Dims{C} && beta.dims() == Dims{C},
          "batch_norm: gamma/beta must be [" + std::to_string(C) + "]");
  require(running_mean.dims() == Dims{C} && running_var.dims() == Dims{C},
          "batch_norm: running buffers must be [" + std::to_string(C) + "]");

  std::vector<float> mean(C), var(C);
  bool use_batch = (mode != BatchNormMode::Eval);
  if (use_batch) {
    ChannelMoments m = batch_moments(x);
    mean = std::move(m.mean);
    var = std::move(m.var);
    if (mode == BatchNormMode::Train) {
      float* rm = running_mean.mutable_data().data();
      float* rv = running_var.mutable_data().data();
      for (std::int64_t c = 0; c < C; ++c) {
        rm[c] = (1.0f - momentum) * rm[c] + momentum * mean[c];
        rv[c] = (1.0f - momentum) * rv[c] + momentum * var[c];
      }
    }
  } else {
    const float* rm = running_mean.data().data();
    const float* rv = running_var.data().data();
    std::copy(rm, rm + C, mean.begin());
    std::copy(rv, rv + C, var.begin());
  }

  std::vector<float> invstd(C);
  for (std::int64_t c = 0; c < C; ++c)
    invstd[c] = 1.0f / std::sqrt(var[c] + eps);

  Tensor out = make_op_output(x.dims(), {&x, &gamma, &beta});
  const float* px = x.data().data();
  const float* pg = gamma.data().data();
  const float* pb = beta.data().data();
  float* po = out.mutable_data().data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float* ip = px + (n * C + c) * V;
      float* op = po + (n * C + c) * V;
      float a = pg[c] * invstd[c];
      float b2 = pb[c] - mean[c] * a;
      for (std::int64_t v = 0; v < V; ++v) op[v] = a * ip[v] + b2;
    }

  if (out.impl()->grad_required) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    auto mean_c = std::make_shared<std::vector<float>>(std::move(mean));
    auto invstd_c = std::make_shared<std::vector<float>>(std::move(invstd));
    record_node({oi}, [xi, gi, bi, oi, mean_c, invstd_c, N, C, V, use_batch] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* px = xi->data.data();
      const float* pg = gi->data.data();
      const double cnt = static_cast<double>(N * V);
      for (std::int64_t c = 0; c < C; ++c) {
        float mu = (*mean_c)[c], is = (*invstd_c)[c];
        double sum_g = 0.0, sum_gx = 0.0;  // sum(dy), sum(dy * xhat)
        for (std::int64_t n = 0; n < N; ++n) {
          const float* gp = g + (n * C + c) * V;
          const float* ip = px + (n * C + c) * V;
          for (std::int64_t v = 0; v < V; ++v) {
            sum_g += gp[v];
            sum_gx += static_cast<double>(gp[v]) * ((ip[v] - mu) * is);
          }
        }
        if (wants_grad(*gi)) gi->grad_ptr()[c] += static_cast<float>(sum_gx);
        if (wants_grad(*bi)) bi->grad_ptr()[c] += static_cast<float>(sum_g);
        if (wants_grad(*xi)) {
          float* gx = xi->grad.empty() ? (xi->grad_ptr()) : xi->grad.data();
          float a = pg[c] * is;
          if (use_batch) {
            float k1 = static_cast<float>(sum_g / cnt);
            float k2 = static_cast<float>(sum_gx / cnt);
            for (std::int64_t n = 0; n < N; ++n) {
              const float* gp = g + (n * C + c) * V;
              const float* ip = px + (n * C + c) * V;
              float* gxp = gx + (n * C + c) * V;
              for (std::int64_t v = 0; v < V; ++v) {
                float xhat = (ip[v] - mu) * is;
                gxp[v] += a * (gp[v] - k1 - xhat * k2);
              }
            }
          } else {
            for (std::int64_t n = 0; n < N; ++n) {
              const float* gp = g + (n * C + c) * V;
              float* gxp = gx + (n * C + c) * V;
              for (std::int64_t v = 0; v < V; ++v) gxp[v] += a * gp[v];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps) {
  require(eps > 0.0f, "group_norm: eps must be > 0");
  require(x.dims().size() == 5, "group_norm: input must be [N,C,T,H,W]");
  std::int64_t N = x.dims()[0], C = x.dims()[1];
  std::int64_t V = x.dims()[2] * x.dims()[3] * x.dims()[4];
  require(groups >= 1 && C % groups == 0,
          "group_norm: channels " + std::to_string(C) + " not divisible by groups " +
              std::to_string(groups));
  require(gamma.dims() == Dims{C} && beta.dims() == Dims{C},
          "group_norm: gamma/beta must be [" + std::to_string(C) + "]");
  std::int64_t Cg = C / groups;
  std::int64_t slab = Cg * V;

  Tensor out = make_op_output(x.dims(), {&x, &gamma, &beta});
  const float* px = x.data().data();
  const float* pg = gamma.data().data();
  const float* pb = beta.data().data();
  float* po = out.mutable_data().data();

  std::vector<float> mean(static_cast<std::size_t>(N) * groups);
  std::vector<float> invstd(static_cast<std::size_t>(N) * groups);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
      const float* p = px + n * C * V + gidx * slab;
      double s = 0.0, s2 = 0.0;
      for (std::int64_t i = 0; i < slab; ++i) {
        double d = p[i];
        s += d;
        s2 += d * d;
      }
      double mu = s / static_cast<double>(slab);
      double var = std::max(0.0, s2 / static_cast<double>(slab) - mu * mu);
      mean[n * groups + gidx] = static_cast<float>(mu);
      invstd[n * groups + gidx] = static_cast<float>(1.0 / std::sqrt(var + eps));
    }

  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      std::int64_t gidx = c / Cg;
      float mu = mean[n * groups + gidx], is = invstd[n * groups + gidx];
      float a = pg[c] * is;
      float b2 = pb[c] - mu * a;
      const float* ip = px + (n * C + c) * V;
      float* op = po + (n * C + c) * V;
      for (std::int64_t v = 0; v < V; ++v) op[v] = a * ip[v] + b2;
    }

  if (out.impl()->grad_required) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    auto mean_c = std::make_shared<std::vector<float>>(std::move(mean));
    auto invstd_c = std::make_shared<std::vector<float>>(std::move(invstd));
    std::int64_t G = groups;
    record_node({oi}, [xi, gi, bi, oi, mean_c, invstd_c, N, C, V, G, Cg, slab] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* px = xi->data.data();
      const float* pg = gi->data.data();
      if (wants_grad(*gi) || wants_grad(*bi)) {
        for (std::int64_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t n = 0; n < N; ++n) {
            std::int64_t gidx = c / Cg;
            float mu = (*mean_c)[n * G + gidx], is = (*invstd_c)[n * G + gidx];
            const float* gp = g + (n * C + c) * V;
            const float* ip = px + (n * C + c) * V;
            for (std::int64_t v = 0; v < V; ++v) {
              sum_g += gp[v];
              sum_gx += static_cast<double>(gp[v]) * ((ip[v] - mu) * is);
            }
          }
          if (wants_grad(*gi)) gi->grad_ptr()[c] += static_cast<float>(sum_gx);
          if (wants_grad(*bi)) bi->grad_ptr()[c] += static_cast<float>(sum_g);
        }
      }
      if (wants_grad(*xi)) {
        float* gx = xi->grad_ptr();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t gidx = 0; gidx < G; ++gidx) {
            float mu = (*mean_c)[n * G + gidx], is = (*invstd_c)[n * G + gidx];
            // ghat = dy * gamma_c; dx = is/M * (M*ghat - sum(ghat) - xhat*sum(ghat*xhat))
            double sum_gh = 0.0, sum_ghx = 0.0;
            for (std::int64_t cc = 0; cc < Cg; ++cc) {
              std::int64_t c = gidx * Cg + cc;
              const float* gp = g + (n * C + c) * V;
              const float* ip = px + (n * C + c) * V;
              for (std::int64_t v = 0; v < V; ++v) {
                double gh = static_cast<double>(gp[v]) * pg[c];
                sum_gh += gh;
                sum_ghx += gh * ((ip[v] - mu) * is);
              }
            }
            float k1 = static_cast<float>(sum_gh / static_cast<double>(slab));
            float k2 = static_cast<float>(sum_ghx / static_cast<double>(slab));
            for (std::int64_t cc = 0; cc < Cg; ++cc) {
              std::int64_t c = gidx * Cg + cc;
              const float* gp = g + (n * C + c) * V;
              const float* ip = px + (n * C + c) * V;
              float* gxp = gx + (n * C + c) * V;
              for (std::int64_t v = 0; v < V; ++v) {
                float xhat = (ip[v] - mu) * is;
                gxp[v] += is * (gp[v] * pg[c] - k1 - xhat * k2);
              }
            }
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics & losses
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> channel_stats(const Tensor& x) {
  require(x.dims().size() == 5, "channel_stats: input must be [N,C,T,H,W], got " + dims_to_string(x.dims()));
  std::int64_t N = x.dims()[0], C = x.dims()[1];
  std::int64_t V = x.dims()[2] * x.dims()[3] * x.dims()[4];
  require(N * V > 0, "channel_stats: empty reduction range");
  Tensor mean = make_op_output({C}, {&x});
  Tensor var = make_op_output({C}, {&x});
  const float* px = x.data().data();
  float* pm = mean.mutable_data().data();
  float* pv = var.mutable_data().data();
  const double cnt = static_cast<double>(N * V);
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const float* p = px + (n * C + c) * V;
      for (std::int64_t v = 0; v < V; ++v) {
        double d = p[v];
        s += d;
        s2 += d * d;
      }
    }
    double mu = s / cnt;
    pm[c] = static_cast<float>(mu);
    pv[c] = static_cast<float>(std::max(0.0, s2 / cnt - mu * mu));
  }
  if (mean.impl()->grad_required || var.impl()->grad_required) {
    auto xi = x.impl();
    auto mi = mean.impl(), vi = var.impl();
    record_node({mi, vi}, [xi, mi, vi, N, C, V] {
      if (!wants_grad(*xi)) return;
      bool has_m = !mi->grad.empty(), has_v = !vi->grad.empty();
      if (!has_m && !has_v) return;
      const float* gm = has_m ? mi->grad.data() : nullptr;
      const float* gv = has_v ? vi->grad.data() : nullptr;
      const float* pm = mi->data.data();
      const float* px = xi->data.data();
      float* gx = xi->grad_ptr();
      const float inv_cnt = 1.0f / static_cast<float>(N * V);
      for (std::int64_t c = 0; c < C; ++c) {
        float gmc = has_m ? gm[c] * inv_cnt : 0.0f;
        float gvc = has_v ? gv[c] * 2.0f * inv_cnt : 0.0f;
        float mu = pm[c];
        for (std::int64_t n = 0; n < N; ++n) {
          const float* ip = px + (n * C + c) * V;
          float* gp = gx + (n * C + c) * V;
          for (std::int64_t v = 0; v < V; ++v) gp[v] += gmc + gvc * (ip[v] - mu);
        }
      }
    });
  }
  return {mean, var};
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
  require(a.dims() == b.dims(),
          "l1_loss: shape mismatch " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
  Tensor out = make_op_output({1}, {&a, &b});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  double acc = 0.0;
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(pa[i]) - pb[i]);
  out.mutable_data()[0] = static_cast<float>(acc);
  if (out.impl()->grad_required) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record_node({oi}, [ai, bi, oi, n] {
      if (oi->grad.empty()) return;
      float g = oi->grad[0];
      const float* pa = ai->data.data();
      const float* pb = bi->data.data();
      float* ga = wants_grad(*ai) ? ai->grad_ptr() : nullptr;
      float* gb = wants_grad(*bi) ? bi->grad_ptr() : nullptr;
      for (std::int64_t i = 0; i < n; ++i) {
        float d = pa[i] - pb[i];
        float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
        if (ga) ga[i] += g * s;
        if (gb) gb[i] -= g * s;
      }
    });
  }
  return out;
}

Tensor entropy_loss(const Tensor& probs) {
  require(probs.dims().size() == 2, "entropy_loss: input must be [N,K]");
  std::int64_t N = probs.dims()[0], K = probs.dims()[1];
  Tensor out = make_op_output({1}, {&probs});
  const float* p = probs.data().data();
  double acc = 0.0;
  constexpr double kFloor = 1e-12;
  for (std::int64_t i = 0; i < N * K; ++i) {
    double v = p[i];
    if (v > kFloor) acc -= v * std::log(v);
  }
  out.mutable_data()[0] = static_cast<float>(acc / static_cast<double>(N));
  if (out.impl()->grad_required) {
    auto pi = probs.impl();
    auto oi = out.impl();
    record_node({oi}, [pi, oi, N, K] {
      if (oi->grad.empty() || !wants_grad(*pi)) return;
      float g = oi->grad[0] / static_cast<float>(N);
      const float* p = pi->data.data();
      float* gp = pi->grad_ptr();
      for (std::int64_t i = 0; i < N * K; ++i) {
        double v = p[i];
        if (v > 1e-12) gp[i] += g * static_cast<float>(-(std::log(v) + 1.0));
      }
    });
  }
  return out;
}

Tensor cross_entropy_loss(const Tensor& probs, std::span<const int> labels) {
  require(probs.dims().size() == 2, "cross_entropy_loss: input must be [N,K]");
  std::int64_t N = probs.dims()[0], K = probs.dims()[1];
  require(static_cast<std::int64_t>(labels.size()) == N,
          "cross_entropy_loss: label count " + std::to_string(labels.size()) + " != batch " +
              std::to_string(N));
  for (int l : labels)
    require(l >= 0 && l < K, "cross_entropy_loss: label " + std::to_string(l) + " out of range");
  Tensor out = make_op_output({1}, {&probs});
  const float* p = probs.data().data();
  double acc = 0.0;
  constexpr float kFloor = 1e-12f;
  for (std::int64_t n = 0; n < N; ++n)
    acc -= std::log(std::max(p[n * K + labels[n]], kFloor));
  out.mutable_data()[0] = static_cast<float>(acc / static_cast<double>(N));
  if (out.impl()->grad_required) {
    auto pi = probs.impl();
    auto oi = out.impl();
    std::vector<int> labels_c(labels.begin(), labels.end());
    record_node({oi}, [pi, oi, labels_c, N, K] {
      if (oi->grad.empty() || !wants_grad(*pi)) return;
      float g = oi->grad[0] / static_cast<float>(N);
      const float* p = pi->data.data();
      float* gp = pi->grad_ptr();
      for (std::int64_t n = 0; n < N; ++n) {
        std::int64_t idx = n * K + labels_c[n];
        gp[idx] -= g / std::max(p[idx], 1e-12f);
      }
    });
  }
  return out;
}

Tensor consistency_loss(const Tensor& view_probs) {
  require(view_probs.dims().size() == 2, "consistency_loss: input must be [M,K]");
  std::int64_t M = view_probs.dims()[0], K = view_probs.dims()[1];
  require(M >= 1, "consistency_loss: need at least one view");
  Tensor out = make_op_output({1}, {&view_probs});
  const float* p = view_probs.data().data();
  std::vector<float> ybar(K);
  for (std::int64_t k = 0; k < K; ++k) {
    double s = 0.0;
    for (std::int64_t m = 0; m < M; ++m) s += p[m * K + k];
    ybar[k] = static_cast<float>(s / static_cast<double>(M));
  }
  double acc = 0.0;
  for (std::int64_t m = 0; m < M; ++m)
    for (std::int64_t k = 0; k < K; ++k) acc += std::abs(static_cast<double>(p[m * K + k]) - ybar[k]);
  out.mutable_data()[0] = static_cast<float>(acc);
  if (out.impl()->grad_required) {
    auto pi = view_probs.impl();
    auto oi = out.impl();
    auto ybar_c = std::make_shared<std::vector<float>>(std::move(ybar));
    record_node({oi}, [pi, oi, ybar_c, M, K] {
      if (oi->grad.empty() || !wants_grad(*pi)) return;
      float g = oi->grad[0];
      const float* p = pi->data.data();
      float* gp = pi->grad_ptr();
      // d/dp_mk [ sum_m' |p_m'k - ybar_k| ] = sign(p_mk - ybar_k) - mean_m' sign(p_m'k - ybar_k)
      for (std::int64_t k = 0; k < K; ++k) {
        float ssum = 0.0f;
        for (std::int64_t m = 0; m < M; ++m) {
          float d = p[m * K + k] - (*ybar_c)[k];
          ssum += d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
        }
        float corr = ssum / static_cast<float>(M);
        for (std::int64_t m = 0; m < M; ++m) {
          float d = p[m * K + k] - (*ybar_c)[k];
          float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
          gp[m * K + k] += g * (s - corr);
        }
      }
    });
  }
  return out;
}

}  // namespace vitta
