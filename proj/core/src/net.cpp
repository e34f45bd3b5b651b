#include "vitta/net.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "op_common.hpp"
#include "vitta/container.hpp"
#include "vitta/rng.hpp"

namespace vitta {

namespace {

Tensor he_normal(Dims dims, std::int64_t fan_in, Rng& rng) {
  std::int64_t n = numel_of(dims);
  std::vector<float> data(static_cast<std::size_t>(n));
  float std_dev = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (auto& v : data) v = std_dev * static_cast<float>(rng.gaussian());
  return Tensor::from_data(std::move(dims), std::move(data), true);
}

}  // namespace

constexpr int ToyVideoNet::kWidths[];

ToyVideoNet ToyVideoNet::create(const NetConfig& cfg, std::uint64_t seed) {
  require(cfg.in_channels >= 1 && cfg.num_classes >= 2, "net: invalid channel/class config");
  require(cfg.height % 16 == 0 && cfg.width % 16 == 0,
          "net: spatial dims must be divisible by 16 for four pooling stages");
  ToyVideoNet net;
  net.cfg_ = cfg;
  Rng rng(Rng::mix(seed, 0x4e455449));
  int ci = cfg.in_channels;
  for (int b = 0; b < kNumBlocks; ++b) {
    int co = kWidths[b];
    Block blk;
    blk.conv_w = he_normal({co, ci, 3, 3, 3}, static_cast<std::int64_t>(ci) * 27, rng);
    blk.conv_b = Tensor::zeros({co}, true);
    blk.norm.gamma = Tensor::full({co}, 1.0f);
    blk.norm.gamma.set_requires_grad(true);
    blk.norm.beta = Tensor::zeros({co}, true);
    if (cfg.norm == NormKind::Batch) {
      blk.norm.running_mean = Tensor::zeros({co});
      blk.norm.running_var = Tensor::full({co}, 1.0f);
    }
    net.blocks_.push_back(std::move(blk));
    ci = co;
  }
  net.head_w = he_normal({cfg.num_classes, kWidths[kNumBlocks - 1]}, kWidths[kNumBlocks - 1], rng);
  net.head_b = Tensor::zeros({cfg.num_classes}, true);
  return net;
}

int ToyVideoNet::block_channels(int block) const {
  require(block >= 1 && block <= kNumBlocks, "net: block index " + std::to_string(block) + " outside 1..4");
  return kWidths[block - 1];
}

Dims ToyVideoNet::tap_dims(int block) const {
  require(block >= 1 && block <= kNumBlocks, "net: tap index " + std::to_string(block) + " outside 1..4");
  // Tap sits after the norm layer, before pooling: spatial extent is the
  // block's input extent (halved once per preceding block).
  std::int64_t h = cfg_.height, w = cfg_.width;
  for (int b = 1; b < block; ++b) {
    h /= 2;
    w /= 2;
  }
  return {kWidths[block - 1], cfg_.frames, h, w};
}

ToyVideoNet::NormLayer& ToyVideoNet::norm_layer(int block) {
  require(block >= 1 && block <= kNumBlocks, "net: block index outside 1..4");
  return blocks_[block - 1].norm;
}

const ToyVideoNet::NormLayer& ToyVideoNet::norm_layer(int block) const {
  require(block >= 1 && block <= kNumBlocks, "net: block index outside 1..4");
  return blocks_[block - 1].norm;
}

ForwardResult ToyVideoNet::forward(const Tensor& clips, const std::set<int>& taps,
                                   NormMode mode, float dua_momentum) {
  require(clips.dims().size() == 5, "net: input must be [N,C,T,H,W], got " + dims_to_string(clips.dims()));
  require(clips.dims()[1] == cfg_.in_channels && clips.dims()[2] == cfg_.frames &&
              clips.dims()[3] == cfg_.height && clips.dims()[4] == cfg_.width,
          "net: input " + dims_to_string(clips.dims()) + " does not match configured " +
              dims_to_string({clips.dims()[0], cfg_.in_channels, cfg_.frames, cfg_.height, cfg_.width}));
  for (int t : taps)
    require(t >= 1 && t <= kNumBlocks, "net: tap index " + std::to_string(t) + " outside 1..4");
  if (cfg_.norm == NormKind::Group &&
      (mode == NormMode::BatchStats || mode == NormMode::DuaAdapt))
    throw UnsupportedArchitectureError(
        "gn-net has no stored normalization statistics; NORM/DUA modes need batch norm");

  ForwardResult result;
  Tensor x = clips;
  for (int b = 0; b < kNumBlocks; ++b) {
    Block& blk = blocks_[b];
    x = conv3d(x, blk.conv_w, blk.conv_b, {1, 1, 1}, {1, 1, 1});
    if (cfg_.norm == NormKind::Batch) {
      BatchNormMode bn_mode = BatchNormMode::Eval;
      switch (mode) {
        case NormMode::Eval: bn_mode = BatchNormMode::Eval; break;
        case NormMode::Train: bn_mode = BatchNormMode::Train; break;
        case NormMode::BatchStats: bn_mode = BatchNormMode::UseBatchStats; break;
        case NormMode::DuaAdapt: {
          // Fold the sample statistics into the running buffers, then
          // normalize with the updated buffers (adapt, then infer).
          auto [m, v] = channel_stats(x.detached());
          float* rm = blk.norm.running_mean.mutable_data().data();
          float* rv = blk.norm.running_var.mutable_data().data();
          for (std::int64_t c = 0; c < m.numel(); ++c) {
            rm[c] = (1.0f - dua_momentum) * rm[c] + dua_momentum * m.data()[c];
            rv[c] = (1.0f - dua_momentum) * rv[c] + dua_momentum * v.data()[c];
          }
          bn_mode = BatchNormMode::Eval;
          break;
        }
      }
      x = batch_norm(x, blk.norm.gamma, blk.norm.beta, blk.norm.running_mean,
                     blk.norm.running_var, bn_mode, kNormEps);
    } else {
      x = group_norm(x, kGroupNormGroups, blk.norm.gamma, blk.norm.beta, kNormEps);
    }
    if (taps.count(b + 1)) result.taps[b + 1] = x;
    x = relu(x);
    x = avg_pool_hw2(x);
  }
  x = global_avg_pool(x);
  result.probs = softmax(linear(x, head_w, head_b));
  return result;
}

std::vector<Tensor> ToyVideoNet::parameters() {
  std::vector<Tensor> ps;
  for (auto& blk : blocks_) {
    ps.push_back(blk.conv_w);
    ps.push_back(blk.conv_b);
    ps.push_back(blk.norm.gamma);
    ps.push_back(blk.norm.beta);
  }
  ps.push_back(head_w);
  ps.push_back(head_b);
  return ps;
}

std::vector<Tensor> ToyVideoNet::norm_affine_parameters() {
  std::vector<Tensor> ps;
  for (auto& blk : blocks_) {
    ps.push_back(blk.norm.gamma);
    ps.push_back(blk.norm.beta);
  }
  return ps;
}

void ToyVideoNet::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.set_requires_grad(on);
}

ToyVideoNet ToyVideoNet::clone() const {
  ToyVideoNet c;
  c.cfg_ = cfg_;
  for (const auto& blk : blocks_) {
    Block nb;
    nb.conv_w = blk.conv_w.detached();
    nb.conv_w.set_requires_grad(true);
    nb.conv_b = blk.conv_b.detached();
    nb.conv_b.set_requires_grad(true);
    nb.norm.gamma = blk.norm.gamma.detached();
    nb.norm.gamma.set_requires_grad(true);
    nb.norm.beta = blk.norm.beta.detached();
    nb.norm.beta.set_requires_grad(true);
    if (blk.norm.running_mean.defined()) {
      nb.norm.running_mean = blk.norm.running_mean.detached();
      nb.norm.running_var = blk.norm.running_var.detached();
    }
    c.blocks_.push_back(std::move(nb));
  }
  c.head_w = head_w.detached();
  c.head_w.set_requires_grad(true);
  c.head_b = head_b.detached();
  c.head_b.set_requires_grad(true);
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

void ToyVideoNet::save_checkpoint(const std::string& path) const {
  ContainerWriter w;
  w.add("meta.norm_kind", Tensor::scalar(cfg_.norm == NormKind::Batch ? 0.0f : 1.0f));
  w.add("meta.in_channels", Tensor::scalar(static_cast<float>(cfg_.in_channels)));
  w.add("meta.num_classes", Tensor::scalar(static_cast<float>(cfg_.num_classes)));
  w.add("meta.frames", Tensor::scalar(static_cast<float>(cfg_.frames)));
  w.add("meta.height", Tensor::scalar(static_cast<float>(cfg_.height)));
  w.add("meta.width", Tensor::scalar(static_cast<float>(cfg_.width)));
  for (int b = 0; b < kNumBlocks; ++b) {
    const Block& blk = blocks_[b];
    std::string p = "block" + std::to_string(b + 1) + ".";
    w.add(p + "conv.weight", blk.conv_w);
    w.add(p + "conv.bias", blk.conv_b);
    w.add(p + "norm.gamma", blk.norm.gamma);
    w.add(p + "norm.beta", blk.norm.beta);
    if (cfg_.norm == NormKind::Batch) {
      w.add(p + "norm.running_mean", blk.norm.running_mean);
      w.add(p + "norm.running_var", blk.norm.running_var);
    }
  }
  w.add("head.linear.weight", head_w);
  w.add("head.linear.bias", head_b);
  w.write(path);
}

ToyVideoNet ToyVideoNet::load_checkpoint(const std::string& path) {
  ContainerReader r(path);
  NetConfig cfg;
  cfg.norm = r.get("meta.norm_kind").item() == 0.0f ? NormKind::Batch : NormKind::Group;
  cfg.in_channels = static_cast<int>(r.get("meta.in_channels").item());
  cfg.num_classes = static_cast<int>(r.get("meta.num_classes").item());
  cfg.frames = static_cast<int>(r.get("meta.frames").item());
  cfg.height = static_cast<int>(r.get("meta.height").item());
  cfg.width = static_cast<int>(r.get("meta.width").item());
  ToyVideoNet net = create(cfg, 0);
  for (int b = 0; b < kNumBlocks; ++b) {
    Block& blk = net.blocks_[b];
    std::string p = "block" + std::to_string(b + 1) + ".";
    auto load_into = [&](Tensor& dst, const std::string& name, bool grad) {
      Tensor src = r.get(name);
      require(src.dims() == dst.dims(), "checkpoint: " + name + " has dims " +
                                            dims_to_string(src.dims()) + ", expected " +
                                            dims_to_string(dst.dims()));
      dst = src.detached();
      dst.set_requires_grad(grad);
    };
    load_into(blk.conv_w, p + "conv.weight", true);
    load_into(blk.conv_b, p + "conv.bias", true);
    load_into(blk.norm.gamma, p + "norm.gamma", true);
    load_into(blk.norm.beta, p + "norm.beta", true);
    if (cfg.norm == NormKind::Batch) {
      load_into(blk.norm.running_mean, p + "norm.running_mean", false);
      load_into(blk.norm.running_var, p + "norm.running_var", false);
    }
  }
  Tensor hw = r.get("head.linear.weight");
  Tensor hb = r.get("head.linear.bias");
  net.head_w = hw.detached();
  net.head_w.set_requires_grad(true);
  net.head_b = hb.detached();
  net.head_b.set_requires_grad(true);
  return net;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

SgdMomentum::SgdMomentum(std::vector<Tensor> params, float lr, float momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  for (auto& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
}

void SgdMomentum::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    float* v = velocity_[i].data();
    const float* g = p.grad().data();
    float* w = p.mutable_data().data();
    std::int64_t n = p.numel();
    for (std::int64_t j = 0; j < n; ++j) {
      v[j] = momentum_ * v[j] + g[j];
      w[j] -= lr_ * v[j];
    }
    p.zero_grad();
  }
}

Tensor flip_horizontal(const Tensor& clip) {
  require(clip.dims().size() == 4, "flip_horizontal: clip must be [C,T,H,W]");
  std::int64_t W = clip.dims()[3];
  std::vector<float> out(clip.data().begin(), clip.data().end());
  std::int64_t rows = clip.numel() / W;
  const float* src = clip.data().data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t w = 0; w < W; ++w) out[r * W + w] = src[r * W + (W - 1 - w)];
  return Tensor::from_data(clip.dims(), std::move(out));
}

namespace {

Tensor stack_clips(const std::vector<Tensor>& clips) {
  const Dims& d = clips[0].dims();
  Dims out_dims = {static_cast<std::int64_t>(clips.size()), d[0], d[1], d[2], d[3]};
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(numel_of(out_dims)));
  for (const auto& c : clips) data.insert(data.end(), c.data().begin(), c.data().end());
  return Tensor::from_data(std::move(out_dims), std::move(data));
}

int argmax_row(const float* row, std::int64_t k) {
  int best = 0;
  for (std::int64_t i = 1; i < k; ++i)
    if (row[i] > row[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace

std::vector<TrainLogRow> train_source(ToyVideoNet& net, const ClipProvider& provider,
                                      std::int64_t count, const TrainOptions& options) {
  require(count > 0, "train_source: empty training set");
  require(options.epochs >= 1 && options.batch_size >= 1, "train_source: bad epochs/batch");
  SgdMomentum opt(net.parameters(), options.lr, options.momentum);
  std::vector<TrainLogRow> log;
  std::vector<std::int64_t> order(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) order[i] = i;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng(Rng::mix(options.seed, 0x54524100 + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t correct = 0, seen = 0, batches = 0;
    for (std::int64_t start = 0; start < count; start += options.batch_size) {
      std::int64_t end = std::min<std::int64_t>(start + options.batch_size, count);
      std::vector<Tensor> clips;
      std::vector<int> labels;
      for (std::int64_t i = start; i < end; ++i) {
        auto [clip, label] = provider(order[i]);
        if (!options.flip_label_map.empty() && rng.uniform() < 0.5) {
          clip = flip_horizontal(clip);
          label = options.flip_label_map[static_cast<std::size_t>(label)];
        }
        clips.push_back(std::move(clip));
        labels.push_back(label);
      }
      Tensor batch = stack_clips(clips);
      Tape tape;
      ForwardResult fr = net.forward(batch, {}, NormMode::Train);
      Tensor loss = cross_entropy_loss(fr.probs, labels);
      float lv = loss.item();
      if (!std::isfinite(lv))
        throw std::runtime_error("train_source: divergence (non-finite loss) at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(batches));
      tape.backward(loss);
      opt.step();
      loss_sum += lv;
      ++batches;
      const float* probs = fr.probs.data().data();
      std::int64_t k = fr.probs.dims()[1];
      for (std::size_t i = 0; i < labels.size(); ++i, ++seen)
        if (argmax_row(probs + static_cast<std::int64_t>(i) * k, k) == labels[i]) ++correct;
    }
    auto t1 = std::chrono::steady_clock::now();
    log.push_back({epoch + 1, loss_sum / static_cast<double>(batches),
                   static_cast<double>(correct) / static_cast<double>(seen),
                   std::chrono::duration<double, std::milli>(t1 - t0).count()});
  }
  return log;
}

double evaluate_accuracy(ToyVideoNet& net, const ClipProvider& provider, std::int64_t count,
                         int batch_size) {
  require(count > 0, "evaluate_accuracy: empty set");
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < count; start += batch_size) {
    std::int64_t end = std::min<std::int64_t>(start + batch_size, count);
    std::vector<Tensor> clips;
    std::vector<int> labels;
    for (std::int64_t i = start; i < end; ++i) {
      auto [clip, label] = provider(i);
      clips.push_back(std::move(clip));
      labels.push_back(label);
    }
    Tensor batch = stack_clips(clips);
    ForwardResult fr = net.forward(batch, {}, NormMode::Eval);
    const float* probs = fr.probs.data().data();
    std::int64_t k = fr.probs.dims()[1];
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (argmax_row(probs + static_cast<std::int64_t>(i) * k, k) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(count);
}

}  // namespace vitta
