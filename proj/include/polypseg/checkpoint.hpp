#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "polypseg/architectures.hpp"
#include "polypseg/error.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

inline constexpr char kCheckpointMagic[4] = {'S', 'E', 'G', 'C'};
inline constexpr char kTensorDumpMagic[4] = {'S', 'E', 'G', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainProgress {
  std::uint32_t epoch = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::uint32_t best_epoch = 0;
  std::uint32_t evals_since_best = 0;

  friend bool operator==(const TrainProgress&, const TrainProgress&) = default;
};

/// Everything needed to evaluate a model or continue training it exactly.
struct Checkpoint {
  ModelSpec spec;
  ModelParams<float> model;
  std::map<std::string, Tensor<float>> adam_m;
  std::map<std::string, Tensor<float>> adam_v;
  std::uint64_t seed = 0;
  std::uint64_t step_count = 0;
  TrainProgress progress;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace io {

// Little-endian writer into a byte buffer.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<std::uint8_t>& data() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::vector<std::uint8_t> buf, std::string what) : buf_(std::move(buf)), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw CheckpointFormatError(what_ + ": truncated file");
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& what() const { return what_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline void write_tensor(Writer& w, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xFFFF) throw InvalidArgument("tensor name too long: " + name);
  if (t.rank() > 0xFF) throw InvalidArgument("tensor rank too large: " + name);
  w.uint<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.uint<std::uint8_t>(0);  // dtype f32
  w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.uint<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (float v : t.vec()) w.f32(v);
}

inline std::pair<std::string, Tensor<float>> read_tensor(Reader& r) {
  const auto len = r.uint<std::uint16_t>();
  std::string name(len, '\0');
  r.bytes(name.data(), len);
  if (r.uint<std::uint8_t>() != 0) throw CheckpointFormatError(r.what() + ": unsupported dtype for " + name);
  const auto rank = r.uint<std::uint8_t>();
  if (rank == 0) throw CheckpointFormatError(r.what() + ": zero-rank tensor " + name);
  Shape shape(rank);
  std::size_t numel = 1;
  for (auto& d : shape) {
    d = r.uint<std::uint32_t>();
    if (d == 0) throw CheckpointFormatError(r.what() + ": empty dimension in " + name);
    numel *= d;
  }
  r.need(numel * 4);
  std::vector<float> data(numel);
  for (auto& v : data) v = r.f32();
  return {name, Tensor<float>(std::move(shape), std::move(data))};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw FileError("cannot write '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void expect_magic(Reader& r, const char (&magic)[4]) {
  char m[4];
  r.bytes(m, 4);
  if (std::memcmp(m, magic, 4) != 0) throw CheckpointFormatError(r.what() + ": bad magic bytes");
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointFormatError(r.what() + ": unsupported format version " + std::to_string(version));
  }
}

}  // namespace io

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  io::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint8_t>(c.spec.kind == ModelKind::efcn8 ? 0 : 1);
  for (auto v : {c.spec.in_channels, c.spec.num_classes, c.spec.base_width, c.spec.input_h, c.spec.input_w})
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.f64(c.spec.dropout_rate);
  const std::size_t count =
      c.model.params.size() + c.model.buffers.size() + c.adam_m.size() + c.adam_v.size();
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(count));
  for (const auto& [k, t] : c.model.params) io::write_tensor(w, "param/" + k, t);
  for (const auto& [k, t] : c.model.buffers) io::write_tensor(w, "buffer/" + k, t);
  for (const auto& [k, t] : c.adam_m) io::write_tensor(w, "adam.m/" + k, t);
  for (const auto& [k, t] : c.adam_v) io::write_tensor(w, "adam.v/" + k, t);
  w.uint<std::uint64_t>(c.seed);
  w.uint<std::uint64_t>(c.step_count);
  w.uint<std::uint32_t>(c.progress.epoch);
  w.f64(c.progress.best_metric);
  w.uint<std::uint32_t>(c.progress.best_epoch);
  w.uint<std::uint32_t>(c.progress.evals_since_best);
  return w.data();
}

/// Parses and validates: the parameter and buffer sets must be exactly those
/// the stored spec builds, with matching shapes.
inline Checkpoint deserialize_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
  io::Reader r(std::move(bytes), what);
  io::expect_magic(r, kCheckpointMagic);
  Checkpoint c;
  const auto kind = r.uint<std::uint8_t>();
  if (kind > 1) throw CheckpointFormatError(what + ": unknown model kind");
  c.spec.kind = kind == 0 ? ModelKind::efcn8 : ModelKind::esegnet;
  c.spec.in_channels = r.uint<std::uint32_t>();
  c.spec.num_classes = r.uint<std::uint32_t>();
  c.spec.base_width = r.uint<std::uint32_t>();
  c.spec.input_h = r.uint<std::uint32_t>();
  c.spec.input_w = r.uint<std::uint32_t>();
  c.spec.dropout_rate = r.f64();
  try {
    c.spec.validate();
  } catch (const InvalidArgument& e) {
    throw CheckpointFormatError(what + ": " + e.what());
  }
  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = io::read_tensor(r);
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash), key = slash == std::string::npos ? "" : name.substr(slash + 1);
    std::map<std::string, Tensor<float>>* dst = group == "param"    ? &c.model.params
                                                : group == "buffer" ? &c.model.buffers
                                                : group == "adam.m" ? &c.adam_m
                                                : group == "adam.v" ? &c.adam_v
                                                                    : nullptr;
    if (!dst || key.empty()) throw CheckpointFormatError(what + ": unexpected tensor '" + name + "'");
    if (!dst->emplace(key, std::move(t)).second) {
      throw CheckpointFormatError(what + ": duplicate tensor '" + name + "'");
    }
  }
  c.seed = r.uint<std::uint64_t>();
  c.step_count = r.uint<std::uint64_t>();
  c.progress.epoch = r.uint<std::uint32_t>();
  c.progress.best_metric = r.f64();
  c.progress.best_epoch = r.uint<std::uint32_t>();
  c.progress.evals_since_best = r.uint<std::uint32_t>();
  if (!r.at_end()) throw CheckpointFormatError(what + ": trailing bytes after checkpoint");

  Rng probe(0);
  const auto expected = build_model<float>(c.spec, probe);
  auto check_group = [&](const std::map<std::string, Tensor<float>>& want,
                         const std::map<std::string, Tensor<float>>& got, const char* group,
                         bool optional) {
    if (optional && got.empty()) return;
    if (got.size() != want.size()) {
      throw CheckpointFormatError(what + ": " + group + " set does not match the model spec");
    }
    for (const auto& [k, t] : want) {
      auto it = got.find(k);
      if (it == got.end() || it->second.shape() != t.shape()) {
        throw CheckpointFormatError(what + ": " + group + " '" + k + "' missing or misshapen");
      }
    }
  };
  check_group(expected.params, c.model.params, "param", false);
  check_group(expected.buffers, c.model.buffers, "buffer", false);
  check_group(expected.params, c.adam_m, "adam.m", true);
  check_group(expected.params, c.adam_v, "adam.v", true);
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path), path.string());
}

/// Named float tensors in the checkpoint tensor record format, for raw dumps
/// of uncertainty and saliency maps.
inline void save_tensor_dump(const std::map<std::string, Tensor<float>>& tensors,
                             const std::filesystem::path& path) {
  io::Writer w;
  w.bytes(kTensorDumpMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [k, t] : tensors) io::write_tensor(w, k, t);
  io::write_file(path, w.data());
}

inline std::map<std::string, Tensor<float>> load_tensor_dump(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  io::expect_magic(r, kTensorDumpMagic);
  std::map<std::string, Tensor<float>> out;
  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) out.insert(io::read_tensor(r));
  if (!r.at_end()) throw CheckpointFormatError(path.string() + ": trailing bytes");
  return out;
}

}  // namespace polypseg
