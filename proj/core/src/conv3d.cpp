#include <algorithm>
#include <cstring>
#include <mutex>

#include "op_common.hpp"
#include "vitta/tensor.hpp"
#include "vitta/thread_pool.hpp"

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace vitta {

namespace {

// BLAS runs single-threaded; parallelism lives in the pool so that results
// depend only on the configured thread count, never on scheduling.
void ensure_blas_single_threaded() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

struct ConvGeometry {
  std::int64_t N, Ci, T, H, W;
  std::int64_t Co, Kt, Kh, Kw;
  std::int64_t To, Ho, Wo;
  int st, sh, sw, pt, ph, pw;
  std::int64_t patch() const { return Ci * Kt * Kh * Kw; }
  std::int64_t out_voxels() const { return To * Ho * Wo; }
};

ConvGeometry resolve_geometry(const Tensor& x, const Tensor& w, const Tensor& b,
                              std::array<int, 3> stride, std::array<int, 3> pad) {
  require(x.dims().size() == 5, "conv3d: input must be [N,Ci,T,H,W], got " + dims_to_string(x.dims()));
  require(w.dims().size() == 5, "conv3d: weight must be [Co,Ci,Kt,Kh,Kw], got " + dims_to_string(w.dims()));
  ConvGeometry g;
  g.N = x.dims()[0];
  g.Ci = x.dims()[1];
  g.T = x.dims()[2];
  g.H = x.dims()[3];
  g.W = x.dims()[4];
  g.Co = w.dims()[0];
  g.Kt = w.dims()[2];
  g.Kh = w.dims()[3];
  g.Kw = w.dims()[4];
  require(w.dims()[1] == g.Ci, "conv3d: weight expects " + std::to_string(w.dims()[1]) +
                                   " input channels, input has " + std::to_string(g.Ci));
  require(b.dims() == Dims{g.Co}, "conv3d: bias must be [" + std::to_string(g.Co) + "], got " +
                                      dims_to_string(b.dims()));
  g.st = stride[0];
  g.sh = stride[1];
  g.sw = stride[2];
  require(g.st >= 1 && g.sh >= 1 && g.sw >= 1, "conv3d: strides must be >= 1");
  g.pt = pad[0];
  g.ph = pad[1];
  g.pw = pad[2];
  require(g.pt >= 0 && g.ph >= 0 && g.pw >= 0, "conv3d: padding must be >= 0");
  std::int64_t et = g.T + 2 * g.pt, eh = g.H + 2 * g.ph, ew = g.W + 2 * g.pw;
  require(g.Kt <= et && g.Kh <= eh && g.Kw <= ew,
          "conv3d: kernel " + dims_to_string(w.dims()) + " exceeds padded input " +
              dims_to_string({g.N, g.Ci, et, eh, ew}));
  g.To = (et - g.Kt) / g.st + 1;
  g.Ho = (eh - g.Kh) / g.sh + 1;
  g.Wo = (ew - g.Kw) / g.sw + 1;
  return g;
}

// Writes patch matrix col[patch x out_voxels] for one sample.
void im2col(const ConvGeometry& g, const float* in, float* col) {
  std::int64_t S = g.out_voxels();
  for (std::int64_t ci = 0; ci < g.Ci; ++ci) {
    const float* in_c = in + ci * g.T * g.H * g.W;
    for (std::int64_t kt = 0; kt < g.Kt; ++kt)
      for (std::int64_t kh = 0; kh < g.Kh; ++kh)
        for (std::int64_t kw = 0; kw < g.Kw; ++kw) {
          float* row = col + (((ci * g.Kt + kt) * g.Kh + kh) * g.Kw + kw) * S;
          for (std::int64_t to = 0; to < g.To; ++to) {
            std::int64_t ti = to * g.st - g.pt + kt;
            if (ti < 0 || ti >= g.T) {
              std::memset(row + to * g.Ho * g.Wo, 0, sizeof(float) * g.Ho * g.Wo);
              continue;
            }
            for (std::int64_t ho = 0; ho < g.Ho; ++ho) {
              std::int64_t hi = ho * g.sh - g.ph + kh;
              float* dst = row + (to * g.Ho + ho) * g.Wo;
              if (hi < 0 || hi >= g.H) {
                std::memset(dst, 0, sizeof(float) * g.Wo);
                continue;
              }
              const float* src = in_c + (ti * g.H + hi) * g.W;
              if (g.sw == 1) {
                std::int64_t wi0 = -g.pw + kw;                       // wi at wo = 0
                std::int64_t lo = std::max<std::int64_t>(0, -wi0);   // first valid wo
                std::int64_t hi_w = std::min<std::int64_t>(g.Wo, g.W - wi0);
                if (lo > 0) std::memset(dst, 0, sizeof(float) * std::min(lo, g.Wo));
                if (hi_w > lo) std::memcpy(dst + lo, src + wi0 + lo, sizeof(float) * (hi_w - lo));
                if (hi_w < g.Wo)
                  std::memset(dst + std::max<std::int64_t>(hi_w, 0), 0,
                              sizeof(float) * (g.Wo - std::max<std::int64_t>(hi_w, 0)));
              } else {
                for (std::int64_t wo = 0; wo < g.Wo; ++wo) {
                  std::int64_t wi = wo * g.sw - g.pw + kw;
                  dst[wo] = (wi >= 0 && wi < g.W) ? src[wi] : 0.0f;
                }
              }
            }
          }
        }
  }
}

// Scatter-adds dcol back into the input gradient; restricted to one input
// channel so disjoint channels can run in parallel.
void col2im_channel(const ConvGeometry& g, const float* dcol, float* din, std::int64_t ci) {
  std::int64_t S = g.out_voxels();
  float* din_c = din + ci * g.T * g.H * g.W;
  for (std::int64_t kt = 0; kt < g.Kt; ++kt)
    for (std::int64_t kh = 0; kh < g.Kh; ++kh)
      for (std::int64_t kw = 0; kw < g.Kw; ++kw) {
        const float* row = dcol + (((ci * g.Kt + kt) * g.Kh + kh) * g.Kw + kw) * S;
        for (std::int64_t to = 0; to < g.To; ++to) {
          std::int64_t ti = to * g.st - g.pt + kt;
          if (ti < 0 || ti >= g.T) continue;
          for (std::int64_t ho = 0; ho < g.Ho; ++ho) {
            std::int64_t hi = ho * g.sh - g.ph + kh;
            if (hi < 0 || hi >= g.H) continue;
            const float* src = row + (to * g.Ho + ho) * g.Wo;
            float* dst = din_c + (ti * g.H + hi) * g.W;
            if (g.sw == 1) {
              std::int64_t wi0 = -g.pw + kw;
              std::int64_t lo = std::max<std::int64_t>(0, -wi0);
              std::int64_t hi_w = std::min<std::int64_t>(g.Wo, g.W - wi0);
              for (std::int64_t wo = lo; wo < hi_w; ++wo) dst[wi0 + wo] += src[wo];
            } else {
              for (std::int64_t wo = 0; wo < g.Wo; ++wo) {
                std::int64_t wi = wo * g.sw - g.pw + kw;
                if (wi >= 0 && wi < g.W) dst[wi] += src[wo];
              }
            }
          }
        }
      }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::array<int, 3> stride, std::array<int, 3> pad) {
  ensure_blas_single_threaded();
  ConvGeometry g = resolve_geometry(x, w, b, stride, pad);
  const std::int64_t S = g.out_voxels();
  const std::int64_t K = g.patch();

  Tensor out = make_op_output({g.N, g.Co, g.To, g.Ho, g.Wo}, {&x, &w, &b});
  const float* px = x.data().data();
  const float* pw = w.data().data();
  const float* pb = b.data().data();
  float* po = out.mutable_data().data();

  auto col = std::make_shared<std::vector<float>>(static_cast<std::size_t>(g.N) * K * S);
  parallel_for(g.N, [&](std::int64_t n) {
    im2col(g, px + n * g.Ci * g.T * g.H * g.W, col->data() + n * K * S);
  });

  // Seed output rows with the bias, then accumulate the patch GEMM onto them.
  // Chunk over output channels when the batch alone cannot fill the pool.
  std::int64_t cc = g.N >= num_threads() ? 1 : std::min<std::int64_t>(g.Co, num_threads());
  std::int64_t rows_per = (g.Co + cc - 1) / cc;
  parallel_for(g.N * cc, [&](std::int64_t idx) {
    std::int64_t n = idx / cc;
    std::int64_t r0 = (idx % cc) * rows_per;
    std::int64_t r1 = std::min(g.Co, r0 + rows_per);
    if (r0 >= r1) return;
    float* out_n = po + n * g.Co * S;
    for (std::int64_t co = r0; co < r1; ++co)
      std::fill(out_n + co * S, out_n + (co + 1) * S, pb[co]);
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(r1 - r0),
                static_cast<int>(S), static_cast<int>(K), 1.0f, pw + r0 * K,
                static_cast<int>(K), col->data() + n * K * S, static_cast<int>(S), 1.0f,
                out_n + r0 * S, static_cast<int>(S));
  });

  if (out.impl()->grad_required) {
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    record_node({oi}, [xi, wi, bi, oi, g, S, K] {
      if (oi->grad.empty()) return;
      const float* go = oi->grad.data();
      if (wants_grad(*bi)) {
        float* gb = bi->grad_ptr();
        for (std::int64_t co = 0; co < g.Co; ++co) {
          double acc = 0.0;
          for (std::int64_t n = 0; n < g.N; ++n) {
            const float* p = go + (n * g.Co + co) * S;
            for (std::int64_t s = 0; s < S; ++s) acc += p[s];
          }
          gb[co] += static_cast<float>(acc);
        }
      }

      const bool need_w = wants_grad(*wi);
      const bool need_x = wants_grad(*xi);
      if (!need_w && !need_x) return;
      float* gw = need_w ? wi->grad_ptr() : nullptr;
      float* gx = need_x ? xi->grad_ptr() : nullptr;
      const float* pw = wi->data.data();
      const float* px = xi->data.data();

      std::vector<float> col(static_cast<std::size_t>(K) * S);
      std::vector<float> dcol(need_x ? static_cast<std::size_t>(K) * S : 0);
      std::int64_t cc = std::min<std::int64_t>(num_threads(), g.Co);
      std::int64_t rows_per = (g.Co + cc - 1) / cc;
      std::int64_t kc = std::min<std::int64_t>(num_threads(), K);
      std::int64_t krows_per = (K + kc - 1) / kc;

      for (std::int64_t n = 0; n < g.N; ++n) {
        const float* go_n = go + n * g.Co * S;
        if (need_w) {
          im2col(g, px + n * g.Ci * g.T * g.H * g.W, col.data());
          // dW[r,:] += dOut[r,:] * col^T, accumulated in fixed sample order.
          parallel_for(cc, [&](std::int64_t c) {
            std::int64_t r0 = c * rows_per, r1 = std::min(g.Co, r0 + rows_per);
            if (r0 >= r1) return;
            cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(r1 - r0),
                        static_cast<int>(K), static_cast<int>(S), 1.0f, go_n + r0 * S,
                        static_cast<int>(S), col.data(), static_cast<int>(S), 1.0f,
                        gw + r0 * K, static_cast<int>(K));
          });
        }
        if (need_x) {
          // dcol = W^T * dOut, then scatter back per input channel.
          parallel_for(kc, [&](std::int64_t c) {
            std::int64_t r0 = c * krows_per, r1 = std::min(K, r0 + krows_per);
            if (r0 >= r1) return;
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(r1 - r0),
                        static_cast<int>(S), static_cast<int>(g.Co), 1.0f, pw + r0,
                        static_cast<int>(K), go_n, static_cast<int>(S), 0.0f,
                        dcol.data() + r0 * S, static_cast<int>(S));
          });
          float* gx_n = gx + n * g.Ci * g.T * g.H * g.W;
          parallel_for(g.Ci, [&](std::int64_t ci) { col2im_channel(g, dcol.data(), gx_n, ci); });
        }
      }
    });
  }
  return out;
}

}  // namespace vitta
