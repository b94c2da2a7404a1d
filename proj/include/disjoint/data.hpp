// Dataset ingestion: CIFAR-10 binary directories, IDX image/label pairs, and
// seeded synthetic generators. Pixels are stored as float32 in [0,1];
// quantized sources (bytes/255) stay exactly representable.
#pragma once

#include "disjoint/tensor.hpp"

#include <string>
#include <vector>

namespace disjoint {

struct ParseError : std::runtime_error {
  size_t offset;
  ParseError(const std::string& msg, size_t at)
      : std::runtime_error(msg + " (byte offset " + std::to_string(at) + ")"), offset(at) {}
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Tensor<float> x;  // [n, sample dims...]
  std::vector<int> labels;
  int classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Shape sample_shape() const { return Shape(x.shape.begin() + 1, x.shape.end()); }

  Dataset head(Index n) const;
  Dataset select(const std::vector<Index>& idx) const;

  template <typename S>
  Tensor<S> batch(Index from, Index count) const {
    const Index row = x.cols();
    Shape shape = x.shape;
    shape[0] = count;
    Tensor<float> sub(shape, x.v.segment(from * row, count * row));
    return sub.cast<S>();
  }
  std::vector<int> batch_labels(Index from, Index count) const {
    return {labels.begin() + from, labels.begin() + from + count};
  }
};

enum class Cifar10Split { kTrain, kTest };

// CIFAR-10 binary version: records of 1 label byte + 3072 pixel bytes
// (row-major R, G, B planes). Train split reads data_batch_1..5.bin,
// test split reads test_batch.bin.
Dataset load_cifar10(const std::string& dir, Cifar10Split split, Index limit = 0);

// Single CIFAR-10-format binary file.
Dataset load_cifar10_file(const std::string& path, Index limit = 0);

// IDX image/label pair (magic 0x00000803 / 0x00000801), pixels scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path, Index limit = 0);

// Gaussian blobs: k class centers on a circle inside the unit square.
Dataset make_blobs(int classes, Index count, double noise, uint64_t seed);

// Two interleaved arcs (half moons) scaled into the unit square.
Dataset make_arcs(Index count, double noise, uint64_t seed);

struct SynthImageSpec {
  int classes = 10;
  Index count = 5000;
  Index channels = 3;
  Index height = 32;
  Index width = 32;
  double signal = 0.14;    // class-template amplitude around mid-gray
  double noise = 0.12;     // per-pixel gaussian noise
  double clutter = 0.0;    // per-image smooth distractor field amplitude
  uint64_t seed = 0;
  uint64_t template_seed = 7;  // class templates; shared between splits
};

// Procedural image classes: smooth low-frequency class templates plus pixel
// noise, quantized to bytes so files written in CIFAR-10 format round-trip
// exactly.
Dataset make_synth_images(const SynthImageSpec& spec);

// Writes a dataset of 3x32x32 byte-quantized images as one CIFAR-10 binary
// format file.
void write_cifar10_file(const Dataset& data, const std::string& path);

}  // namespace disjoint
