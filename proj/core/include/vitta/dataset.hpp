#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitta/tensor.hpp"

namespace vitta {

// MovingShapes: synthetic clips whose class is decidable only from motion.
// Every class draws shape type, position (toroidal), orientation and size
// from the same per-frame distributions; classes differ purely in how those
// attributes evolve over time (drift / spin / scale).
struct MovingShapesConfig {
  int num_classes = 8;  // translate-L/R/U/D, rotate-cw/ccw, zoom-in/out
  int shapes_per_clip = 2;
  std::int64_t train_size = 800;
  std::int64_t val_size = 1600;
  int channels = 1;
  int frames = 16;
  int height = 32;
  int width = 32;
  std::uint64_t seed = 7;
  std::string palette = "default";  // "default" | "alt" (cross-dataset statistics protocol)
};

struct VideoSample {
  Tensor clip;  // [C,T,H,W], values in [0,1]
  int label = 0;
  std::int64_t sample_id = 0;
  std::string corruption = "none";
  int severity = 0;
};

const char* class_name(int label);

// Label permutation under horizontal flips (left/right and cw/ccw swap).
std::vector<int> flip_label_map(int num_classes);

// Deterministic render of one clip; sample ids are global across the
// train/val split of a dataset directory.
Tensor render_clip(const MovingShapesConfig& cfg, std::int64_t sample_id);
int label_of(const MovingShapesConfig& cfg, std::int64_t sample_id);

// Writes train.vtc/val.vtc, manifests train.csv/val.csv
// (header: sample_id,label,file,entry) and dataset.txt (config echo).
void generate_dataset(const MovingShapesConfig& cfg, const std::string& out_dir);

class DatasetReader {
 public:
  DatasetReader(const std::string& dir, const std::string& split);  // "train" | "val"

  std::int64_t size() const { return static_cast<std::int64_t>(rows_.size()); }
  VideoSample get(std::int64_t index) const;
  const std::vector<int>& labels() const { return labels_; }
  const MovingShapesConfig& config() const { return cfg_; }

 private:
  struct Row {
    std::int64_t sample_id;
    int label;
    std::string entry;
  };
  std::vector<Row> rows_;
  std::vector<int> labels_;
  MovingShapesConfig cfg_;
  std::string container_path_;
  std::shared_ptr<class ContainerReader> reader_;
};

MovingShapesConfig load_dataset_config(const std::string& dir);

}  // namespace vitta
