// CSV/JSON artifact emitters and the per-run manifest.
#pragma once

#include "disjoint/deploy.hpp"
#include "disjoint/eval.hpp"
#include "disjoint/train.hpp"

#include <string>
#include <vector>

namespace disjoint {

// RFC-4180-style CSV: header row, fields quoted when needed.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

void write_matrix_csv(const std::string& path, const TransferMatrix& m);
TransferMatrix read_matrix_csv(const std::string& path);

void write_metrics_json(const std::string& path, const std::string& attack_name,
                        const SetMetrics& metrics);

void write_train_log_jsonl(const std::string& path, const TrainLog& log);

void write_gradient_signs_csv(const std::string& path, const GradientSignExport& e);

void write_sim_report_json(const std::string& path, const SimReport& rep, Index trials_requested,
                           uint64_t seed);

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  std::string precision = "f32";
  int threads = 1;
  double wall_time_s = 0;
  std::vector<std::string> artifacts;
};

void write_manifest(const std::string& dir, const Manifest& m);

// Aggregates the JSON/CSV artifacts of a run directory into report.json and
// returns a human-readable summary.
std::string aggregate_report(const std::string& dir);

inline std::string version_string() { return "0.1.0"; }

}  // namespace disjoint
