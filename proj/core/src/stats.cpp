#include "vitta/stats.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "op_common.hpp"
#include "vitta/container.hpp"

namespace vitta {

std::string provenance_to_string(StatsProvenance p) {
  switch (p) {
    case StatsProvenance::TrainComputed: return "train-computed";
    case StatsProvenance::NormStored: return "norm-stored";
    case StatsProvenance::Foreign: return "foreign-dataset";
  }
  return "train-computed";
}

StatsProvenance provenance_from_string(const std::string& s) {
  if (s == "train-computed") return StatsProvenance::TrainComputed;
  if (s == "norm-stored") return StatsProvenance::NormStored;
  if (s == "foreign-dataset") return StatsProvenance::Foreign;
  throw std::invalid_argument("stats: unknown provenance '" + s + "'");
}

std::vector<LayerStats> capture_train_stats(ToyVideoNet& net, const ClipProvider& provider,
                                            std::int64_t count, const std::set<int>& taps,
                                            int batch_size) {
  require(count > 0, "capture_train_stats: empty dataset");
  require(!taps.empty(), "capture_train_stats: no taps requested");
  struct Acc {
    int block;
    std::vector<double> sum, sumsq;
    double n = 0.0;
  };
  std::vector<Acc> accs;
  for (int t : taps)
    accs.push_back({t, std::vector<double>(static_cast<std::size_t>(net.block_channels(t)), 0.0),
                    std::vector<double>(static_cast<std::size_t>(net.block_channels(t)), 0.0)});

  for (std::int64_t start = 0; start < count; start += batch_size) {
    std::int64_t end = std::min<std::int64_t>(start + batch_size, count);
    std::vector<float> data;
    Dims d;
    for (std::int64_t i = start; i < end; ++i) {
      auto [clip, label] = provider(i);
      (void)label;
      if (d.empty()) d = clip.dims();
      data.insert(data.end(), clip.data().begin(), clip.data().end());
    }
    Tensor batch = Tensor::from_data({end - start, d[0], d[1], d[2], d[3]}, std::move(data));
    ForwardResult fr = net.forward(batch, taps, NormMode::Eval);
    for (auto& acc : accs) {
      const Tensor& f = fr.taps.at(acc.block);
      std::int64_t N = f.dims()[0], C = f.dims()[1];
      std::int64_t V = f.dims()[2] * f.dims()[3] * f.dims()[4];
      const float* p = f.data().data();
      for (std::int64_t c = 0; c < C; ++c) {
        double s = 0.0, s2 = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const float* q = p + (n * C + c) * V;
          for (std::int64_t v = 0; v < V; ++v) {
            double x = q[v];
            s += x;
            s2 += x * x;
          }
        }
        acc.sum[c] += s;
        acc.sumsq[c] += s2;
      }
      acc.n += static_cast<double>(N * V);
    }
  }

  std::vector<LayerStats> out;
  for (auto& acc : accs) {
    LayerStats ls;
    ls.block = acc.block;
    ls.provenance = StatsProvenance::TrainComputed;
    ls.sample_count = count;
    std::size_t C = acc.sum.size();
    ls.mean.resize(C);
    ls.var.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      double mu = acc.sum[c] / acc.n;
      ls.mean[c] = static_cast<float>(mu);
      ls.var[c] = static_cast<float>(std::max(0.0, acc.sumsq[c] / acc.n - mu * mu));
    }
    out.push_back(std::move(ls));
  }
  return out;
}

std::vector<LayerStats> extract_norm_stats(const ToyVideoNet& net, const std::set<int>& taps) {
  if (net.config().norm != NormKind::Batch)
    throw UnsupportedArchitectureError(
        "extract_norm_stats: gn-net stores no normalization statistics");
  require(!taps.empty(), "extract_norm_stats: no taps requested");
  std::vector<LayerStats> out;
  for (int t : taps) {
    const auto& norm = net.norm_layer(t);
    LayerStats ls;
    ls.block = t;
    ls.provenance = StatsProvenance::NormStored;
    ls.sample_count = 0;
    ls.mean.assign(norm.running_mean.data().begin(), norm.running_mean.data().end());
    ls.var.assign(norm.running_var.data().begin(), norm.running_var.data().end());
    out.push_back(std::move(ls));
  }
  return out;
}

void save_stats(const std::string& path, const std::vector<LayerStats>& stats) {
  require(!stats.empty(), "save_stats: nothing to save");
  ContainerWriter w;
  for (const auto& ls : stats) {
    std::string p = "block" + std::to_string(ls.block) + ".";
    w.add(p + "mean", Tensor::from_data({static_cast<std::int64_t>(ls.mean.size())}, ls.mean));
    w.add(p + "var", Tensor::from_data({static_cast<std::int64_t>(ls.var.size())}, ls.var));
  }
  w.write(path);

  nlohmann::ordered_json meta;
  meta["provenance"] = provenance_to_string(stats.front().provenance);
  meta["sample_count"] = stats.front().sample_count;
  std::vector<int> blocks;
  for (const auto& ls : stats) blocks.push_back(ls.block);
  meta["blocks"] = blocks;
  std::ofstream os(path + ".json", std::ios::trunc);
  if (!os) throw std::runtime_error("save_stats: cannot write " + path + ".json");
  os << meta.dump(2) << "\n";
}

std::vector<LayerStats> load_stats(const std::string& path) {
  ContainerReader r(path);
  std::ifstream is(path + ".json");
  if (!is) throw std::runtime_error("load_stats: missing sidecar " + path + ".json");
  nlohmann::json meta = nlohmann::json::parse(is);
  StatsProvenance prov = provenance_from_string(meta.at("provenance").get<std::string>());
  std::int64_t sample_count = meta.at("sample_count").get<std::int64_t>();
  std::vector<LayerStats> out;
  for (int block : meta.at("blocks").get<std::vector<int>>()) {
    std::string p = "block" + std::to_string(block) + ".";
    LayerStats ls;
    ls.block = block;
    ls.provenance = prov;
    ls.sample_count = sample_count;
    Tensor m = r.get(p + "mean"), v = r.get(p + "var");
    ls.mean.assign(m.data().begin(), m.data().end());
    ls.var.assign(v.data().begin(), v.data().end());
    out.push_back(std::move(ls));
  }
  return out;
}

// ---------------------------------------------------------------------------
// EmaEstimator
// ---------------------------------------------------------------------------

EmaEstimator::EmaEstimator(double alpha, const std::vector<LayerStats>& init) : alpha_(alpha) {
  require(alpha > 0.0 && alpha <= 1.0, "ema: alpha must be in (0,1]");
  require(!init.empty(), "ema: empty layer set");
  for (const auto& ls : init) {
    blocks_.push_back(ls.block);
    mean_.emplace_back(ls.mean.begin(), ls.mean.end());
    var_.emplace_back(ls.var.begin(), ls.var.end());
  }
}

int EmaEstimator::index_of(int block) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i] == block) return static_cast<int>(i);
  throw std::invalid_argument("ema: unknown block " + std::to_string(block));
}

const std::vector<double>& EmaEstimator::mean(int block) const { return mean_[index_of(block)]; }
const std::vector<double>& EmaEstimator::var(int block) const { return var_[index_of(block)]; }

void EmaEstimator::update(const std::vector<Sample>& sample_stats) {
  require(sample_stats.size() == blocks_.size(),
          "ema: sample layer count " + std::to_string(sample_stats.size()) + " != estimator's " +
              std::to_string(blocks_.size()));
  for (const auto& s : sample_stats) {
    int i = index_of(s.block);
    require(s.mean.size() == mean_[i].size() && s.var.size() == var_[i].size(),
            "ema: channel count mismatch for block " + std::to_string(s.block));
    for (std::size_t c = 0; c < mean_[i].size(); ++c) {
      mean_[i][c] = alpha_ * static_cast<double>(s.mean[c]) + (1.0 - alpha_) * mean_[i][c];
      var_[i][c] = alpha_ * static_cast<double>(s.var[c]) + (1.0 - alpha_) * var_[i][c];
    }
  }
  ++step_;
}

}  // namespace vitta
