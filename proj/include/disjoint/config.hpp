// Experiment configuration: a JSON document with dataset/model/train/attacks/
// eval/simulate sections, schema-validated before any compute starts.
// Unknown keys are rejected.
#pragma once

#include "disjoint/attacks.hpp"
#include "disjoint/data.hpp"
#include "disjoint/deploy.hpp"
#include "disjoint/train.hpp"

#include <string>
#include <vector>

namespace disjoint {

struct DatasetSpec {
  enum class Kind { kCifar10, kCifarFile, kIdx, kBlobs, kArcs, kSynthImages };
  Kind kind = Kind::kSynthImages;
  std::string dir;     // cifar10
  std::string path;    // cifar_file
  Cifar10Split split = Cifar10Split::kTrain;
  std::string images, labels;  // idx
  Index limit = 0;
  int classes = 10;
  Index count = 1000;
  double noise = 0.12;
  double signal = 0.14;
  double clutter = 0.0;
  uint64_t seed = 1;
  uint64_t template_seed = 7;
};

Dataset load_dataset(const DatasetSpec& spec);

struct EvalConfig {
  Index count = 1000;            // evaluation subset size
  int source_member = 0;         // `attack` subcommand source
  std::vector<std::vector<int>> subsets;  // eval-ensemble; empty = all subsets
  std::vector<double> sweep;     // eval-sweep epsilons
  Index export_count = 1000;     // export-gradients rows
  bool cache = true;             // cache crafted examples under out/cache
};

struct SimulateConfig {
  DeploymentPolicy policy;
  AdversaryModel adversary;
  Index trials = 10000;
  std::string matrix_csv;  // fast mode when set; exact mode otherwise
};

struct ExperimentConfig {
  DatasetSpec train_data;
  DatasetSpec eval_data;
  ModelConfig model;
  DisjointTrainConfig train;
  AttackSpec at_attack;           // adversary for train-at
  std::string base_checkpoint;    // add_one variant
  std::vector<std::pair<std::string, AttackSpec>> attacks;
  EvalConfig eval;
  SimulateConfig simulate;
  uint64_t config_hash = 0;  // of the canonical serialized document
};

// Parses and validates a config document; throws ValueError on schema errors.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

std::string attack_spec_to_json(const AttackSpec& spec);
AttackSpec attack_spec_from_json(const std::string& json_text);

}  // namespace disjoint
