#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vitta/tensor.hpp"

namespace vitta {

// Thrown where an operation needs stored normalization statistics and the
// architecture has none (group-norm nets).
class UnsupportedArchitectureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class NormKind { Batch, Group };

struct NetConfig {
  NormKind norm = NormKind::Batch;
  int in_channels = 1;
  int num_classes = 8;
  int frames = 16;
  int height = 32;
  int width = 32;
};

// How normalization layers behave during a forward pass.
enum class NormMode {
  Eval,        // stored statistics (BN); GN is unaffected
  Train,       // batch statistics + running buffer update (BN)
  BatchStats,  // batch statistics, buffers untouched (NORM baseline)
  DuaAdapt,    // update running buffers by EMA of the input stats, then Eval
};

struct ForwardResult {
  Tensor probs;                // [N, num_classes], rows sum to 1
  std::map<int, Tensor> taps;  // block index -> post-norm pre-pool activation
};

// Four conv blocks (3x3x3, stride 1, pad 1 -> norm -> relu -> 2x2 spatial
// avg-pool), channel widths 16/32/64/64, temporal extent preserved, then
// global average pooling into a linear softmax head.
class ToyVideoNet {
 public:
  static constexpr int kNumBlocks = 4;
  static constexpr int kWidths[kNumBlocks] = {16, 32, 64, 64};
  static constexpr int kGroupNormGroups = 8;
  static constexpr float kNormEps = 1e-5f;

  static ToyVideoNet create(const NetConfig& cfg, std::uint64_t seed);

  // clips: [N, C, T, H, W]. Requested taps must be within 1..4. Capturing a
  // tap never changes the computation.
  ForwardResult forward(const Tensor& clips, const std::set<int>& taps,
                        NormMode mode = NormMode::Eval, float dua_momentum = 0.0f);

  const NetConfig& config() const { return cfg_; }
  int block_channels(int block) const;
  // Declared tap dims [c_l, t_l, h_l, w_l] (batch excluded).
  Dims tap_dims(int block) const;

  std::vector<Tensor> parameters();             // full parameter vector
  std::vector<Tensor> norm_affine_parameters(); // gamma/beta only
  void set_requires_grad(bool on);

  struct NormLayer {
    Tensor gamma, beta;
    Tensor running_mean, running_var;  // defined only for batch norm
  };
  NormLayer& norm_layer(int block);
  const NormLayer& norm_layer(int block) const;

  ToyVideoNet clone() const;  // deep copy (independent parameters/buffers)

  void save_checkpoint(const std::string& path) const;
  static ToyVideoNet load_checkpoint(const std::string& path);

 private:
  struct Block {
    Tensor conv_w, conv_b;
    NormLayer norm;
  };
  NetConfig cfg_;
  std::vector<Block> blocks_;
  Tensor head_w, head_b;
};

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

// Yields (clip [C,T,H,W], label) for an index in [0, count).
using ClipProvider = std::function<std::pair<Tensor, int>(std::int64_t)>;

struct TrainOptions {
  int epochs = 30;
  float lr = 0.02f;
  float momentum = 0.9f;
  int batch_size = 8;
  std::uint64_t seed = 1;
  // Horizontal flips change the meaning of motion classes; the dataset
  // supplies the label permutation applied to flipped samples.
  std::vector<int> flip_label_map;
};

struct TrainLogRow {
  int epoch;
  double mean_loss;
  double train_accuracy;
  double wall_ms;
};

// Cross-entropy + SGD(momentum). Deterministic for a fixed seed and thread
// count. Throws on divergence (non-finite loss) naming the epoch/batch.
std::vector<TrainLogRow> train_source(ToyVideoNet& net, const ClipProvider& provider,
                                      std::int64_t count, const TrainOptions& options);

// Mean top-1 accuracy of eval-mode forwards over the provider.
double evaluate_accuracy(ToyVideoNet& net, const ClipProvider& provider, std::int64_t count,
                         int batch_size = 8);

// SGD with classical momentum: v <- m*v + g; p <- p - lr*v. Consumes and
// clears parameter gradients on step().
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, float lr, float momentum);
  void step();
  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  float lr_, momentum_;
};

// Flip along W; used by training augmentation and its tests.
Tensor flip_horizontal(const Tensor& clip);

}  // namespace vitta
