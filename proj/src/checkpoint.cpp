#include "disjoint/checkpoint.hpp"

#include "disjoint/data.hpp"

#include <cstring>
#include <fstream>

namespace disjoint {

namespace {

constexpr char kMagic[4] = {'A', 'D', 'S', 'J'};

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("checkpoint: cannot write " + path);
  }
  void raw(const void* p, size_t n) { out_.write(static_cast<const char*>(p), n); }
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  void check(const std::string& path) {
    if (!out_) throw IoError("checkpoint: short write on " + path);
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("checkpoint: cannot open " + path);
  }
  void raw(void* p, size_t n, const char* field) {
    in_.read(static_cast<char*>(p), n);
    if (!in_)
      throw IoError("checkpoint: " + path_ + " truncated while reading " + field);
  }
  template <typename T>
  T pod(const char* field) {
    T v;
    raw(&v, sizeof(T), field);
    return v;
  }
  std::string str(const char* field) {
    const uint16_t n = pod<uint16_t>(field);
    std::string s(n, '\0');
    raw(s.data(), n, field);
    return s;
  }

 private:
  std::string path_;
  std::ifstream in_;
};

void write_config(Writer& w, const ModelConfig& mc) {
  w.pod(static_cast<uint8_t>(mc.arch));
  w.pod(static_cast<uint32_t>(mc.classes));
  w.pod(static_cast<uint8_t>(mc.input_shape.size()));
  for (Index d : mc.input_shape) w.pod(static_cast<int64_t>(d));
  w.pod(static_cast<uint32_t>(mc.hidden.size()));
  for (Index d : mc.hidden) w.pod(static_cast<int64_t>(d));
  w.pod(static_cast<int64_t>(mc.conv1_channels));
  w.pod(static_cast<int64_t>(mc.conv2_channels));
  w.pod(static_cast<int64_t>(mc.dense_width));
}

ModelConfig read_config(Reader& r) {
  ModelConfig mc;
  mc.arch = static_cast<Arch>(r.pod<uint8_t>("arch"));
  mc.classes = static_cast<int>(r.pod<uint32_t>("class count"));
  const uint8_t nd = r.pod<uint8_t>("input rank");
  for (uint8_t i = 0; i < nd; ++i) mc.input_shape.push_back(r.pod<int64_t>("input shape"));
  const uint32_t nh = r.pod<uint32_t>("hidden count");
  for (uint32_t i = 0; i < nh; ++i) mc.hidden.push_back(r.pod<int64_t>("hidden widths"));
  mc.conv1_channels = r.pod<int64_t>("conv1 channels");
  mc.conv2_channels = r.pod<int64_t>("conv2 channels");
  mc.dense_width = r.pod<int64_t>("dense width");
  return mc;
}

}  // namespace

void save_checkpoint(const ModelSet<float>& set, const CheckpointMeta& meta,
                     const std::string& path) {
  Writer w(path);
  w.raw(kMagic, 4);
  w.pod(kCheckpointVersion);
  write_config(w, set.config);
  w.pod(static_cast<uint8_t>(set.provenance));
  w.pod(static_cast<uint32_t>(set.members.size()));
  for (const auto& m : set.members) {
    w.pod(static_cast<uint32_t>(m.tensors.size()));
    for (const auto& nt : m.tensors) {
      w.str(nt.name);
      w.pod(static_cast<uint8_t>(nt.t.shape.size()));
      for (Index d : nt.t.shape) w.pod(static_cast<int64_t>(d));
      w.raw(nt.t.v.data(), sizeof(float) * nt.t.v.size());
    }
  }
  w.pod(meta.train_config_hash);
  w.pod(meta.seed);
  w.check(path);
}

ModelSet<float> load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  Reader r(path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: " + path + " has bad magic, not a checkpoint file");
  const uint32_t version = r.pod<uint32_t>("version");
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: " + path + " has format version " + std::to_string(version) +
                  ", expected " + std::to_string(kCheckpointVersion));
  ModelSet<float> set;
  set.config = read_config(r);
  set.provenance = static_cast<Provenance>(r.pod<uint8_t>("provenance"));
  const uint32_t members = r.pod<uint32_t>("member count");
  for (uint32_t m = 0; m < members; ++m) {
    Params<float> p;
    const uint32_t tensors = r.pod<uint32_t>("tensor count");
    for (uint32_t t = 0; t < tensors; ++t) {
      NamedTensor<float> nt;
      nt.name = r.str("tensor name");
      const uint8_t nd = r.pod<uint8_t>("tensor rank");
      Shape shape;
      for (uint8_t i = 0; i < nd; ++i) shape.push_back(r.pod<int64_t>("tensor shape"));
      nt.t = Tensor<float>::zeros(shape);
      r.raw(nt.t.v.data(), sizeof(float) * nt.t.v.size(), ("values of " + nt.name).c_str());
      p.tensors.push_back(std::move(nt));
    }
    set.members.push_back(std::move(p));
  }
  CheckpointMeta local;
  local.train_config_hash = r.pod<uint64_t>("training-config hash");
  local.seed = r.pod<uint64_t>("seed record");
  if (meta) *meta = local;
  return set;
}

}  // namespace disjoint
