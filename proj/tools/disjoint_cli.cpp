// Command-line surface: training, attack campaigns, evaluation, deployment
// simulation, and report aggregation. Every run writes its artifacts plus a
// manifest.json sufficient to reproduce the command.
#include <CLI11.hpp>
#include <json.hpp>

#include "disjoint/checkpoint.hpp"
#include "disjoint/config.hpp"
#include "disjoint/report.hpp"

#include <Eigen/Core>

#include <chrono>
#include <fstream>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <filesystem>
#include <iostream>

using namespace disjoint;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir = "out";
  std::string checkpoint;  // defaults to <out>/checkpoint.bin
  uint64_t seed = 0;
  bool seed_set = false;
  std::string precision = "f32";
  int threads = 1;
  std::vector<std::string> argv;
};

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

uint64_t run_seed(const Options& opt, const ExperimentConfig& cfg) {
  return opt.seed_set ? opt.seed : cfg.train.seed;
}

// --seed reseeds the whole run: training directly, attacks by derivation
// unless the config pinned an explicit rng_seed.
AttackSpec seeded(AttackSpec spec, const Options& opt, uint64_t salt) {
  if (opt.seed_set && spec.rng_seed == 0) spec.rng_seed = derive_seed(opt.seed, salt);
  return spec;
}

std::string checkpoint_path(const Options& opt) {
  return opt.checkpoint.empty() ? opt.out_dir + "/checkpoint.bin" : opt.checkpoint;
}

std::string cache_dir(const Options& opt, const ExperimentConfig& cfg) {
  return cfg.eval.cache ? opt.out_dir + "/cache" : "";
}

void finish(const Options& opt, const ExperimentConfig& cfg, const std::string& command,
            const Timer& timer, std::vector<std::string> artifacts) {
  Manifest m;
  m.command = command;
  m.argv = opt.argv;
  m.config_hash = cfg.config_hash;
  m.seed = run_seed(opt, cfg);
  m.precision = opt.precision;
  m.threads = opt.threads;
  m.wall_time_s = timer.seconds();
  m.artifacts = std::move(artifacts);
  write_manifest(opt.out_dir, m);
}

template <typename S>
int cmd_train(const Options& opt, const ExperimentConfig& cfg, const std::string& mode) {
  Timer timer;
  Dataset data = load_dataset(cfg.train_data);
  DisjointTrainConfig tc = cfg.train;
  if (opt.seed_set) tc.seed = opt.seed;

  ModelSet<S> set;
  TrainLog log;
  if (mode == "train-at") {
    std::tie(set, log) = train_adversarial_baseline<S>(data, cfg.model, tc, cfg.at_attack);
  } else if (mode == "train-independent") {
    std::tie(set, log) = train_independent<S>(data, cfg.model, tc);
  } else if (tc.variant == TrainVariant::kAddOne) {
    if (cfg.base_checkpoint.empty())
      throw ValueError("config: add_one variant needs train.base_checkpoint");
    ModelSet<S> base = load_checkpoint_as<S>(cfg.base_checkpoint);
    std::tie(set, log) = train_disjoint_set<S>(data, cfg.model, tc, &base);
  } else {
    std::tie(set, log) = train_disjoint_set<S>(data, cfg.model, tc);
  }

  CheckpointMeta meta;
  meta.train_config_hash = cfg.config_hash;
  meta.seed = tc.seed;
  save_checkpoint_as(set, meta, checkpoint_path(opt));
  write_train_log_jsonl(opt.out_dir + "/train_log.jsonl", log);
  finish(opt, cfg, mode, timer, {"checkpoint.bin", "train_log.jsonl"});
  std::cout << mode << ": trained " << set.n() << " member(s), " << log.size()
            << " iterations, wall " << timer.seconds() << "s\n";
  return 0;
}

template <typename S>
int cmd_attack(const Options& opt, const ExperimentConfig& cfg) {
  Timer timer;
  ModelSet<S> set = load_checkpoint_as<S>(checkpoint_path(opt));
  Dataset data = load_dataset(cfg.eval_data).head(cfg.eval.count);
  const Tensor<S> x = data.batch<S>(0, data.size());
  nlohmann::json out;
  uint64_t salt = 1;
  for (const auto& [name, spec0] : cfg.attacks) {
    AttackSpec spec = seeded(spec0, opt, salt++);
    ModelView<S> view = ModelView<S>::single(set, cfg.eval.source_member);
    AttackResult<S> r = run_attack(view, x, data.labels, spec);
    double succ = 0;
    for (uint8_t s : r.success) succ += s;
    nlohmann::json j;
    j["success_rate"] = data.size() ? succ / data.size() : 0.0;
    j["linf"] = linf_dist(r.x_adv, x);
    j["l2_max"] = max_row_l2_dist(r.x_adv, x);
    j["accuracy_on_source"] =
        member_accuracy(set, cfg.eval.source_member, r.x_adv, data.labels);
    out[name] = j;
  }
  std::ofstream(opt.out_dir + "/attack_report.json") << out.dump(2) << "\n";
  finish(opt, cfg, "attack", timer, {"attack_report.json"});
  std::cout << "attack: " << cfg.attacks.size() << " spec(s) on member "
            << cfg.eval.source_member << "\n";
  return 0;
}

template <typename S>
int cmd_eval_matrix(const Options& opt, const ExperimentConfig& cfg) {
  Timer timer;
  ModelSet<S> set = load_checkpoint_as<S>(checkpoint_path(opt));
  Dataset data = load_dataset(cfg.eval_data).head(cfg.eval.count);
  std::vector<std::string> artifacts;
  uint64_t salt = 1;
  for (const auto& [name, spec0] : cfg.attacks) {
    AttackSpec spec = seeded(spec0, opt, salt++);
    TransferMatrix m = transfer_matrix(set, spec, data, cache_dir(opt, cfg));
    m.attack_name = name;
    SetMetrics met = set_metrics(m, set, data);
    write_matrix_csv(opt.out_dir + "/matrix_" + name + ".csv", m);
    write_metrics_json(opt.out_dir + "/metrics_" + name + ".json", name, met);
    artifacts.push_back("matrix_" + name + ".csv");
    artifacts.push_back("metrics_" + name + ".json");
    std::cout << "eval-matrix " << name << ": blackbox_mean=" << met.blackbox_mean
              << " wholeset_mean=" << met.wholeset_mean << "\n";
  }
  finish(opt, cfg, "eval-matrix", timer, artifacts);
  return 0;
}

template <typename S>
int cmd_eval_ensemble(const Options& opt, const ExperimentConfig& cfg) {
  Timer timer;
  ModelSet<S> set = load_checkpoint_as<S>(checkpoint_path(opt));
  Dataset data = load_dataset(cfg.eval_data).head(cfg.eval.count);
  AttackSpec spec = cfg.attacks.empty() ? attack_preset("pgd2") : cfg.attacks[0].second;
  spec = seeded(spec, opt, 0xe5b1ull);

  std::vector<std::vector<int>> subsets = cfg.eval.subsets;
  if (subsets.empty()) {
    for (uint32_t mask = 1; mask < (1u << set.n()); ++mask) {
      std::vector<int> s;
      for (int i = 0; i < set.n(); ++i)
        if (mask & (1u << i)) s.push_back(i);
      subsets.push_back(std::move(s));
    }
  }

  std::vector<std::string> header{"subset"};
  for (int j = 0; j < set.n(); ++j) header.push_back("m" + std::to_string(j));
  std::vector<std::vector<std::string>> rows;
  for (const auto& subset : subsets) {
    std::vector<double> acc = ensemble_attack_eval(set, subset, spec, data, cache_dir(opt, cfg));
    std::string name;
    for (int i : subset) name += (name.empty() ? "" : "+") + std::to_string(i);
    std::vector<std::string> row{name};
    for (double a : acc) row.push_back(std::to_string(a));
    rows.push_back(std::move(row));
  }
  write_csv(opt.out_dir + "/ensemble_accuracy.csv", header, rows);
  finish(opt, cfg, "eval-ensemble", timer, {"ensemble_accuracy.csv"});
  std::cout << "eval-ensemble: " << subsets.size() << " subset(s)\n";
  return 0;
}

template <typename S>
int cmd_eval_sweep(const Options& opt, const ExperimentConfig& cfg) {
  Timer timer;
  ModelSet<S> set = load_checkpoint_as<S>(checkpoint_path(opt));
  Dataset data = load_dataset(cfg.eval_data).head(cfg.eval.count);
  std::vector<double> eps = cfg.eval.sweep;
  if (eps.empty()) eps = {0.0196, 0.0392, 0.0588, 0.0784, 0.098, 0.117, 0.137, 0.156};
  std::vector<SweepPoint> pts =
      epsilon_sweep(set, eps, data, run_seed(opt, cfg), cache_dir(opt, cfg));
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : pts)
    rows.push_back({std::to_string(p.epsilon), std::to_string(p.metrics.blackbox_mean),
                    std::to_string(p.metrics.blackbox_std),
                    std::to_string(p.metrics.wholeset_mean)});
  write_csv(opt.out_dir + "/sweep.csv",
            {"epsilon", "blackbox_mean", "blackbox_std", "wholeset_mean"}, rows);
  finish(opt, cfg, "eval-sweep", timer, {"sweep.csv"});
  std::cout << "eval-sweep: " << pts.size() << " point(s)\n";
  return 0;
}

template <typename S>
int cmd_export_gradients(const Options& opt, const ExperimentConfig& cfg) {
  Timer timer;
  ModelSet<S> set = load_checkpoint_as<S>(checkpoint_path(opt));
  Dataset data = load_dataset(cfg.eval_data);
  const Index count = std::min<Index>(cfg.eval.export_count, data.size());
  GradientSignExport e = export_gradient_signs(set, data, count);
  write_gradient_signs_csv(opt.out_dir + "/gradient_signs.csv", e);
  nlohmann::json j;
  j["count"] = e.count;
  j["members"] = e.members;
  j["separation_score"] = e.separation_score;
  std::ofstream(opt.out_dir + "/separation.json") << j.dump(2) << "\n";
  finish(opt, cfg, "export-gradients", timer, {"gradient_signs.csv", "separation.json"});
  std::cout << "export-gradients: separation_score=" << e.separation_score << "\n";
  return 0;
}

template <typename S>
int cmd_simulate(const Options& opt, const ExperimentConfig& cfg) {
  Timer timer;
  const SimulateConfig& sc = cfg.simulate;
  SimReport rep;
  const uint64_t seed = run_seed(opt, cfg);
  if (!sc.matrix_csv.empty()) {
    TransferMatrix m = read_matrix_csv(sc.matrix_csv);
    rep = simulate<S>(nullptr, nullptr, &m, sc.policy, sc.adversary, sc.trials, seed);
  } else {
    ModelSet<S> set = load_checkpoint_as<S>(checkpoint_path(opt));
    Dataset data = load_dataset(cfg.eval_data).head(cfg.eval.count);
    rep = simulate<S>(&set, &data, nullptr, sc.policy, sc.adversary, sc.trials, seed,
                      cache_dir(opt, cfg));
  }
  rep.adversary = adversary_kind_name(sc.adversary.kind);
  write_sim_report_json(opt.out_dir + "/sim_report.json", rep, sc.trials, seed);
  finish(opt, cfg, "simulate", timer, {"sim_report.json"});
  std::cout << "simulate: success_rate=" << rep.success_rate << " (" << rep.trials
            << " trials)\n";
  return 0;
}

template <typename S>
int dispatch(const std::string& cmd, const Options& opt, const ExperimentConfig& cfg) {
  fs::create_directories(opt.out_dir);
  if (cmd == "train-disjoint" || cmd == "train-at" || cmd == "train-independent")
    return cmd_train<S>(opt, cfg, cmd);
  if (cmd == "attack") return cmd_attack<S>(opt, cfg);
  if (cmd == "eval-matrix") return cmd_eval_matrix<S>(opt, cfg);
  if (cmd == "eval-ensemble") return cmd_eval_ensemble<S>(opt, cfg);
  if (cmd == "eval-sweep") return cmd_eval_sweep<S>(opt, cfg);
  if (cmd == "export-gradients") return cmd_export_gradients<S>(opt, cfg);
  if (cmd == "simulate") return cmd_simulate<S>(opt, cfg);
  throw ValueError("unknown subcommand " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarially-disjoint model sets: train, attack, evaluate, simulate"};
  app.require_subcommand(1);

  Options opt;
  for (int i = 0; i < argc; ++i) opt.argv.push_back(argv[i]);

  const std::vector<std::string> commands = {
      "train-disjoint", "train-at",    "train-independent", "attack",  "eval-matrix",
      "eval-ensemble",  "eval-sweep",  "export-gradients",  "simulate", "report"};
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : commands) {
    CLI::App* s = app.add_subcommand(name);
    if (name != "report")
      s->add_option("--config", opt.config_path, "experiment config JSON")->required();
    s->add_option("--out", opt.out_dir, "output directory");
    s->add_option("--seed", opt.seed, "override the run seed")
        ->each([&](const std::string&) { opt.seed_set = true; });
    s->add_option("--precision", opt.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    s->add_option("--threads", opt.threads, "kernel thread count")->check(CLI::PositiveNumber);
    if (name != "report" && name.rfind("train", 0) != 0)
      s->add_option("--checkpoint", opt.checkpoint, "model checkpoint path");
    subs[name] = s;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  Eigen::setNbThreads(opt.threads);
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);  // large tapes: keep big blocks on the heap
#endif

  try {
    if (cmd == "report") {
      std::cout << aggregate_report(opt.out_dir);
      return 0;
    }
    ExperimentConfig cfg = load_experiment_config(opt.config_path);
    return opt.precision == "f64" ? dispatch<double>(cmd, opt, cfg)
                                  : dispatch<float>(cmd, opt, cfg);
  } catch (const ValueError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
