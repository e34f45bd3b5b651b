#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "vitta/net.hpp"
#include "vitta/tensor.hpp"

namespace vitta {

enum class StatsProvenance { TrainComputed, NormStored, Foreign };

std::string provenance_to_string(StatsProvenance p);
StatsProvenance provenance_from_string(const std::string& s);

// Per-layer, per-channel feature mean and population variance.
struct LayerStats {
  int block = 0;
  std::vector<float> mean;
  std::vector<float> var;
  StatsProvenance provenance = StatsProvenance::TrainComputed;
  std::int64_t sample_count = 0;
};

// Per-channel mean/variance of a feature map [N,c,t,h,w], expectation over
// N,t,h,w; differentiable. Alias of the tensor kernel under its domain name.
inline std::pair<Tensor, Tensor> compute_stats(const Tensor& feature) {
  return channel_stats(feature);
}

// One streaming pass over the whole set; equals the statistics of the
// concatenated features exactly (sums aggregated in 64-bit), not a mean of
// per-batch variances. Forwards run in eval mode.
std::vector<LayerStats> capture_train_stats(ToyVideoNet& net, const ClipProvider& provider,
                                            std::int64_t count, const std::set<int>& taps,
                                            int batch_size = 8);

// Copies the running buffers of the tapped blocks' norm layers. Throws
// UnsupportedArchitectureError for group norm nets.
std::vector<LayerStats> extract_norm_stats(const ToyVideoNet& net, const std::set<int>& taps);

// Statistics container (entries "block{l}.mean" / "block{l}.var") plus a JSON
// sidecar "<path>.json" carrying provenance and sample_count.
void save_stats(const std::string& path, const std::vector<LayerStats>& stats);
std::vector<LayerStats> load_stats(const std::string& path);

// Exponential moving averages of per-layer statistics. State is kept in
// 64-bit so long-run estimates match the closed-form weighted sum tightly;
// gradients flow only through the current sample's term (callers mix the
// history in as a constant).
class EmaEstimator {
 public:
  // alpha in (0,1]; initial estimates are the alignment targets.
  EmaEstimator(double alpha, const std::vector<LayerStats>& init);

  double alpha() const { return alpha_; }
  std::int64_t step_count() const { return step_; }
  const std::vector<int>& blocks() const { return blocks_; }

  const std::vector<double>& mean(int block) const;
  const std::vector<double>& var(int block) const;

  struct Sample {
    int block;
    std::vector<float> mean, var;
  };
  // est <- alpha * sample + (1 - alpha) * est, exactly; increments the step
  // counter. Layer set and channel counts must match.
  void update(const std::vector<Sample>& sample_stats);

 private:
  int index_of(int block) const;
  double alpha_;
  std::int64_t step_ = 0;
  std::vector<int> blocks_;
  std::vector<std::vector<double>> mean_, var_;
};

}  // namespace vitta
