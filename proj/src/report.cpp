#include "disjoint/report.hpp"

#include "disjoint/data.hpp"
#include "disjoint/hash.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace disjoint {

using nlohmann::json;

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out = open_out(path);
  for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << csv_field(header[i]);
  out << "\r\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_field(row[i]);
    out << "\r\n";
  }
  if (!out) throw IoError("short write on " + path);
}

void write_matrix_csv(const std::string& path, const TransferMatrix& m) {
  std::vector<std::string> header{"source\\target"};
  for (int j = 0; j < m.n; ++j) header.push_back("m" + std::to_string(j));
  std::vector<std::vector<std::string>> rows;
  for (int i = 0; i < m.n; ++i) {
    std::vector<std::string> row{"m" + std::to_string(i)};
    for (int j = 0; j < m.n; ++j) row.push_back(fmt(m.at(i, j)));
    rows.push_back(std::move(row));
  }
  rows.push_back({"attack", m.attack_name});
  rows.push_back({"samples", std::to_string(m.samples)});
  write_csv(path, header, rows);
}

TransferMatrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty matrix file", 0);
  // column count from the header: one comma per target column
  int n = 0;
  for (char c : line) n += c == ',';
  if (n < 1) throw ParseError(path + ": matrix header has no target columns", 0);
  TransferMatrix m;
  m.n = n;
  m.accuracy.assign(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw ParseError(path + ": missing matrix row", 0);
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');  // row label
    for (int j = 0; j < n; ++j) {
      if (!std::getline(ss, field, ',')) throw ParseError(path + ": short matrix row", 0);
      m.at(i, j) = std::stod(field);
    }
  }
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string key, value;
    std::getline(ss, key, ',');
    std::getline(ss, value, ',');
    if (!value.empty() && value.back() == '\r') value.pop_back();
    if (key == "attack") m.attack_name = value;
    if (key == "samples") m.samples = std::stoll(value);
  }
  return m;
}

void write_metrics_json(const std::string& path, const std::string& attack_name,
                        const SetMetrics& metrics) {
  json j;
  j["attack"] = attack_name;
  j["blackbox_mean"] = metrics.blackbox_mean;
  j["blackbox_std"] = metrics.blackbox_std;
  j["wholeset_mean"] = metrics.wholeset_mean;
  j["clean_accuracy"] = metrics.clean_accuracy;
  open_out(path) << j.dump(2) << "\n";
}

void write_train_log_jsonl(const std::string& path, const TrainLog& log) {
  std::ofstream out = open_out(path);
  for (const LossReport& r : log) {
    json j;
    j["epoch"] = r.epoch;
    j["iteration"] = r.iteration;
    j["lr"] = r.lr;
    j["l_class"] = r.l_class;
    j["l_angle"] = r.l_angle;
    j["l_transfer1"] = r.l_transfer1;
    j["l_transfer2"] = r.l_transfer2;
    j["l_total"] = r.l_total;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("short write on " + path);
}

void write_gradient_signs_csv(const std::string& path, const GradientSignExport& e) {
  std::ofstream out = open_out(path);
  out << "image_id,member_id";
  for (Index p = 0; p < e.dim; ++p) out << ",s" << p;
  out << "\r\n";
  for (Index img = 0; img < e.count; ++img)
    for (int m = 0; m < e.members; ++m) {
      out << img << "," << m;
      const size_t base = (static_cast<size_t>(img) * e.members + m) * e.dim;
      for (Index p = 0; p < e.dim; ++p) out << "," << int(e.signs[base + p]);
      out << "\r\n";
    }
  if (!out) throw IoError("short write on " + path);
}

void write_sim_report_json(const std::string& path, const SimReport& rep, Index trials_requested,
                           uint64_t seed) {
  json j;
  j["policy"] = rep.policy;
  j["adversary"] = rep.adversary;
  j["trials"] = trials_requested;
  j["successes"] = rep.successes;
  j["success_rate"] = rep.success_rate;
  j["ci95"] = {rep.ci_low, rep.ci_high};
  j["seed"] = seed;
  open_out(path) << j.dump(2) << "\n";
}

void write_manifest(const std::string& dir, const Manifest& m) {
  json j;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["config_hash"] = hex64(m.config_hash);
  j["seed"] = m.seed;
  j["precision"] = m.precision;
  j["threads"] = m.threads;
  j["version"] = version_string();
  j["wall_time_s"] = m.wall_time_s;
  j["artifacts"] = m.artifacts;
  open_out(dir + "/manifest.json") << j.dump(2) << "\n";
}

std::string aggregate_report(const std::string& dir) {
  namespace fs = std::filesystem;
  json report;
  std::ostringstream text;
  text << "run directory: " << dir << "\n";
  if (!fs::exists(dir)) throw IoError("report: no such directory " + dir);
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(dir)) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  for (const auto& p : entries) {
    const std::string name = p.filename().string();
    if (p.extension() == ".json" && name != "report.json") {
      std::ifstream in(p);
      try {
        report["files"][name] = json::parse(in);
      } catch (const json::exception&) {
        continue;
      }
    } else if (p.extension() == ".csv" && name.rfind("matrix_", 0) == 0) {
      TransferMatrix m = read_matrix_csv(p.string());
      SetMetrics met = metrics_from_matrix(m);
      json j;
      j["n"] = m.n;
      j["attack"] = m.attack_name;
      j["blackbox_mean"] = met.blackbox_mean;
      j["wholeset_mean"] = met.wholeset_mean;
      report["matrices"][name] = j;
      text << name << ": attack=" << m.attack_name << " blackbox_mean=" << met.blackbox_mean
           << " wholeset_mean=" << met.wholeset_mean << "\n";
    }
  }
  open_out(dir + "/report.json") << report.dump(2) << "\n";
  text << "aggregate written to report.json\n";
  return text.str();
}

}  // namespace disjoint
