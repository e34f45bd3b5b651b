#pragma once

#include <string>
#include <vector>

#include "vitta/tensor.hpp"

namespace vitta {

// Tensor container file: magic "VTT1", little-endian u32 entry count, then per
// entry: u16 name length, UTF-8 name, u8 dtype code (0 = f32), u8 rank,
// rank x u64 dims, raw little-endian f32 payload. Used for checkpoints,
// statistics files and dataset clips.
struct ContainerEntry {
  std::string name;
  Tensor tensor;
};

class ContainerWriter {
 public:
  void add(const std::string& name, const Tensor& t);
  bool contains(const std::string& name) const;
  // Writes the whole container; byte-identical for identical contents.
  void write(const std::string& path) const;

 private:
  std::vector<ContainerEntry> entries_;
};

class ContainerReader {
 public:
  explicit ContainerReader(const std::string& path);  // throws on bad magic/dtype/truncation

  const std::vector<ContainerEntry>& entries() const { return entries_; }
  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;  // throws if missing

 private:
  std::vector<ContainerEntry> entries_;
  std::string path_;
};

}  // namespace vitta
