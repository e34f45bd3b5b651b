#include "vitta/container.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vitta {

namespace {

constexpr char kMagic[4] = {'V', 'T', 'T', '1'};

void put_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void put_le(std::string& buf, T v) {
  // Host is little-endian on every supported target; memcpy keeps it explicit.
  put_bytes(buf, &v, sizeof(T));
}

class Cursor {
 public:
  Cursor(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  void read(void* dst, std::size_t n) {
    if (pos_ + n > data_.size())
      throw std::runtime_error("container: truncated file " + path_);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  template <typename T>
  T get() {
    T v;
    read(&v, sizeof(T));
    return v;
  }

  std::string get_string(std::size_t n) {
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

 private:
  const std::string& data_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void ContainerWriter::add(const std::string& name, const Tensor& t) {
  if (name.empty() || name.size() > 0xFFFF)
    throw std::invalid_argument("container: entry name length out of range: " + name);
  if (contains(name)) throw std::invalid_argument("container: duplicate entry " + name);
  if (!t.defined()) throw std::invalid_argument("container: undefined tensor for " + name);
  entries_.push_back({name, t});
}

bool ContainerWriter::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

void ContainerWriter::write(const std::string& path) const {
  std::string buf;
  put_bytes(buf, kMagic, 4);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(e.name.size()));
    put_bytes(buf, e.name.data(), e.name.size());
    put_le<std::uint8_t>(buf, 0);  // dtype f32
    put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(e.tensor.dims().size()));
    for (auto d : e.tensor.dims()) put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
    put_bytes(buf, e.tensor.data().data(), e.tensor.data().size() * sizeof(float));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("container: cannot open for write: " + path);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("container: write failed: " + path);
}

ContainerReader::ContainerReader(const std::string& path) : path_(path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("container: cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Cursor cur(data, path);
  char magic[4];
  cur.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("container: bad magic in " + path + " (expected VTT1)");
  std::uint32_t count = cur.get<std::uint32_t>();
  entries_.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = cur.get<std::uint16_t>();
    std::string name = cur.get_string(name_len);
    std::uint8_t dtype = cur.get<std::uint8_t>();
    if (dtype != 0)
      throw std::runtime_error("container: unsupported dtype code " + std::to_string(dtype) +
                               " for entry " + name + " in " + path);
    std::uint8_t rank = cur.get<std::uint8_t>();
    Dims dims(rank);
    std::int64_t numel = 1;
    for (int r = 0; r < rank; ++r) {
      dims[r] = static_cast<std::int64_t>(cur.get<std::uint64_t>());
      numel *= dims[r];
    }
    std::vector<float> payload(static_cast<std::size_t>(numel));
    cur.read(payload.data(), payload.size() * sizeof(float));
    entries_.push_back({std::move(name), Tensor::from_data(std::move(dims), std::move(payload))});
  }
}

bool ContainerReader::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

Tensor ContainerReader::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw std::runtime_error("container: missing entry " + name + " in " + path_);
}

}  // namespace vitta
