#include "disjoint/data.hpp"

#include "disjoint/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace disjoint {

namespace {

constexpr Index kCifarRecord = 3073;
constexpr Index kCifarPixels = 3072;

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff n = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  in.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!in) throw IoError("short read on " + path);
  return bytes;
}

uint32_t read_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_cifar_records(const std::string& path, std::vector<float>& pixels,
                          std::vector<int>& labels, Index limit) {
  const std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() % kCifarRecord != 0)
    throw ParseError(path + ": malformed record length, file size " + std::to_string(bytes.size()) +
                         " is not a multiple of " + std::to_string(kCifarRecord),
                     bytes.size() - bytes.size() % kCifarRecord);
  const Index records = static_cast<Index>(bytes.size()) / kCifarRecord;
  for (Index r = 0; r < records; ++r) {
    if (limit > 0 && static_cast<Index>(labels.size()) >= limit) return;
    const size_t at = static_cast<size_t>(r) * kCifarRecord;
    const uint8_t label = bytes[at];
    if (label >= 10)
      throw ParseError(path + ": label " + std::to_string(int(label)) + " out of range [0,10)", at);
    labels.push_back(label);
    for (Index i = 0; i < kCifarPixels; ++i)
      pixels.push_back(static_cast<float>(bytes[at + 1 + i]) / 255.0f);
  }
}

Dataset finish_images(std::vector<float>&& pixels, std::vector<int>&& labels, Shape sample_shape,
                      int classes) {
  Dataset d;
  d.classes = classes;
  Shape shape{static_cast<Index>(labels.size())};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  FlatArray<float> v(static_cast<Index>(pixels.size()));
  std::memcpy(v.data(), pixels.data(), pixels.size() * sizeof(float));
  d.x = Tensor<float>(std::move(shape), std::move(v));
  d.labels = std::move(labels);
  return d;
}

}  // namespace

Dataset Dataset::head(Index n) const {
  n = std::min(n, size());
  Dataset out;
  out.classes = classes;
  out.labels.assign(labels.begin(), labels.begin() + n);
  Shape shape = x.shape;
  shape[0] = n;
  out.x = Tensor<float>(std::move(shape), x.v.segment(0, n * x.cols()));
  return out;
}

Dataset Dataset::select(const std::vector<Index>& idx) const {
  Dataset out;
  out.classes = classes;
  const Index row = x.cols();
  Shape shape = x.shape;
  shape[0] = static_cast<Index>(idx.size());
  out.x = Tensor<float>::zeros(shape);
  out.labels.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    out.x.v.segment(static_cast<Index>(i) * row, row) = x.v.segment(idx[i] * row, row);
    out.labels[i] = labels[idx[i]];
  }
  return out;
}

Dataset load_cifar10_file(const std::string& path, Index limit) {
  std::vector<float> pixels;
  std::vector<int> labels;
  append_cifar_records(path, pixels, labels, limit);
  return finish_images(std::move(pixels), std::move(labels), {3, 32, 32}, 10);
}

Dataset load_cifar10(const std::string& dir, Cifar10Split split, Index limit) {
  std::vector<std::string> files;
  if (split == Cifar10Split::kTrain) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back(dir + "/test_batch.bin");
  }
  std::vector<float> pixels;
  std::vector<int> labels;
  for (const auto& f : files) {
    if (limit > 0 && static_cast<Index>(labels.size()) >= limit) break;
    append_cifar_records(f, pixels, labels, limit);
  }
  return finish_images(std::move(pixels), std::move(labels), {3, 32, 32}, 10);
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, Index limit) {
  const std::vector<uint8_t> img = read_file(images_path);
  if (img.size() < 16) throw ParseError(images_path + ": truncated IDX header", img.size());
  if (read_be32(img.data()) != 0x00000803u)
    throw ParseError(images_path + ": bad IDX image magic", 0);
  Index count = read_be32(img.data() + 4);
  const Index rows = read_be32(img.data() + 8);
  const Index cols = read_be32(img.data() + 12);
  if (static_cast<Index>(img.size()) != 16 + count * rows * cols)
    throw ParseError(images_path + ": IDX payload does not match header dimensions", img.size());

  const std::vector<uint8_t> lab = read_file(labels_path);
  if (lab.size() < 8) throw ParseError(labels_path + ": truncated IDX header", lab.size());
  if (read_be32(lab.data()) != 0x00000801u)
    throw ParseError(labels_path + ": bad IDX label magic", 0);
  if (static_cast<Index>(read_be32(lab.data() + 4)) != count)
    throw ParseError(labels_path + ": label count differs from image count", 4);

  if (limit > 0) count = std::min(count, limit);
  std::vector<float> pixels;
  pixels.reserve(count * rows * cols);
  std::vector<int> labels;
  int max_label = 0;
  for (Index i = 0; i < count; ++i) {
    labels.push_back(lab[8 + i]);
    max_label = std::max(max_label, labels.back());
    for (Index p = 0; p < rows * cols; ++p)
      pixels.push_back(static_cast<float>(img[16 + i * rows * cols + p]) / 255.0f);
  }
  return finish_images(std::move(pixels), std::move(labels), {1, rows, cols}, max_label + 1);
}

Dataset make_blobs(int classes, Index count, double noise, uint64_t seed) {
  Dataset d;
  d.classes = classes;
  d.x = Tensor<float>::zeros({count, 2});
  d.labels.resize(count);
  const double radius = 0.32;
  for (Index i = 0; i < count; ++i) {
    RngStream rng(derive_seed(seed, static_cast<uint64_t>(i)));
    const int k = static_cast<int>(i % classes);
    const double angle = 6.283185307179586 * k / classes;
    const double px = 0.5 + radius * std::cos(angle) + noise * rng.normal();
    const double py = 0.5 + radius * std::sin(angle) + noise * rng.normal();
    d.x.v[2 * i] = static_cast<float>(std::clamp(px, 0.0, 1.0));
    d.x.v[2 * i + 1] = static_cast<float>(std::clamp(py, 0.0, 1.0));
    d.labels[i] = k;
  }
  return d;
}

Dataset make_arcs(Index count, double noise, uint64_t seed) {
  Dataset d;
  d.classes = 2;
  d.x = Tensor<float>::zeros({count, 2});
  d.labels.resize(count);
  for (Index i = 0; i < count; ++i) {
    RngStream rng(derive_seed(seed, static_cast<uint64_t>(i)));
    const int k = static_cast<int>(i % 2);
    const double t = 3.141592653589793 * rng.uniform();
    double px = k == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double py = k == 0 ? std::sin(t) : 0.5 - std::sin(t);
    px = 0.5 + 0.28 * px + noise * rng.normal();
    py = 0.4 + 0.28 * py + noise * rng.normal();
    d.x.v[2 * i] = static_cast<float>(std::clamp(px, 0.0, 1.0));
    d.x.v[2 * i + 1] = static_cast<float>(std::clamp(py, 0.0, 1.0));
    d.labels[i] = k;
  }
  return d;
}

Dataset make_synth_images(const SynthImageSpec& spec) {
  const Index c = spec.channels, h = spec.height, w = spec.width;
  const Index dim = c * h * w;

  // smooth class templates: a few low-frequency sinusoids per channel
  std::vector<std::vector<double>> templates(spec.classes, std::vector<double>(dim, 0.0));
  for (int k = 0; k < spec.classes; ++k) {
    RngStream rng(derive_seed(spec.template_seed, static_cast<uint64_t>(k)));
    for (Index ch = 0; ch < c; ++ch) {
      double fx[4], fy[4], ph[4], amp[4];
      for (int j = 0; j < 4; ++j) {
        fx[j] = 1.0 + static_cast<double>(rng.uniform_int(3));
        fy[j] = 1.0 + static_cast<double>(rng.uniform_int(3));
        ph[j] = rng.uniform(0.0, 6.283185307179586);
        amp[j] = rng.uniform(0.5, 1.0);
      }
      double peak = 1e-9;
      std::vector<double> field(h * w);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          double s = 0;
          for (int j = 0; j < 4; ++j)
            s += amp[j] * std::sin(6.283185307179586 *
                                       (fx[j] * x / double(w) + fy[j] * y / double(h)) +
                                   ph[j]);
          field[y * w + x] = s;
          peak = std::max(peak, std::abs(s));
        }
      for (Index p = 0; p < h * w; ++p) templates[k][ch * h * w + p] = field[p] / peak;
    }
  }

  Dataset d;
  d.classes = spec.classes;
  d.x = Tensor<float>::zeros({spec.count, c, h, w});
  d.labels.resize(spec.count);
  std::vector<double> clutter(spec.clutter > 0 ? dim : 0);
  for (Index i = 0; i < spec.count; ++i) {
    RngStream rng(derive_seed(spec.seed, static_cast<uint64_t>(i)));
    const int k = static_cast<int>(i % spec.classes);
    d.labels[i] = k;
    if (spec.clutter > 0) {
      // a smooth per-image distractor from the same sinusoid family
      for (Index ch = 0; ch < c; ++ch) {
        double fx[3], fy[3], ph[3], amp[3];
        for (int j = 0; j < 3; ++j) {
          fx[j] = 1.0 + static_cast<double>(rng.uniform_int(3));
          fy[j] = 1.0 + static_cast<double>(rng.uniform_int(3));
          ph[j] = rng.uniform(0.0, 6.283185307179586);
          amp[j] = rng.uniform(0.4, 1.0);
        }
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            double s = 0;
            for (int j = 0; j < 3; ++j)
              s += amp[j] * std::sin(6.283185307179586 *
                                         (fx[j] * x / double(w) + fy[j] * y / double(h)) +
                                     ph[j]);
            clutter[ch * h * w + y * w + x] = s / 3.0;
          }
      }
    }
    for (Index p = 0; p < dim; ++p) {
      double raw = 0.5 + spec.signal * templates[k][p] + spec.noise * rng.normal();
      if (spec.clutter > 0) raw += spec.clutter * clutter[p];
      const int byte = static_cast<int>(std::lround(std::clamp(raw, 0.0, 1.0) * 255.0));
      d.x.v[i * dim + p] = static_cast<float>(byte) / 255.0f;
    }
  }
  return d;
}

void write_cifar10_file(const Dataset& data, const std::string& path) {
  if (data.sample_shape() != Shape{3, 32, 32})
    throw IoError("write_cifar10_file: dataset samples are " + shape_str(data.sample_shape()) +
                  ", expected [3x32x32]");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  const Index n = data.size();
  std::vector<uint8_t> record(kCifarRecord);
  for (Index i = 0; i < n; ++i) {
    record[0] = static_cast<uint8_t>(data.labels[i]);
    for (Index p = 0; p < kCifarPixels; ++p)
      record[1 + p] = static_cast<uint8_t>(std::lround(data.x.v[i * kCifarPixels + p] * 255.0f));
    out.write(reinterpret_cast<const char*>(record.data()), kCifarRecord);
  }
  if (!out) throw IoError("short write on " + path);
}

}  // namespace disjoint
