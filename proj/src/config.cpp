#include "disjoint/config.hpp"

#include "disjoint/hash.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

namespace disjoint {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ValueError("config: section '" + where + "' must be an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key))
      throw ValueError("config: unknown key '" + key + "' in section '" + where + "'");
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValueError("config: key '" + key + "' has the wrong type");
  }
}

DatasetSpec parse_dataset(const json& j, const std::string& where) {
  check_keys(j, where,
             {"kind", "dir", "path", "split", "images", "labels", "limit", "classes", "count",
              "noise", "signal", "clutter", "seed", "template_seed"});
  DatasetSpec d;
  const std::string kind = get_or<std::string>(j, "kind", "synth_images");
  if (kind == "cifar10")
    d.kind = DatasetSpec::Kind::kCifar10;
  else if (kind == "cifar_file")
    d.kind = DatasetSpec::Kind::kCifarFile;
  else if (kind == "idx")
    d.kind = DatasetSpec::Kind::kIdx;
  else if (kind == "blobs")
    d.kind = DatasetSpec::Kind::kBlobs;
  else if (kind == "arcs")
    d.kind = DatasetSpec::Kind::kArcs;
  else if (kind == "synth_images")
    d.kind = DatasetSpec::Kind::kSynthImages;
  else
    throw ValueError("config: unknown dataset kind '" + kind + "' in " + where);
  d.dir = get_or<std::string>(j, "dir", "");
  d.path = get_or<std::string>(j, "path", "");
  const std::string split = get_or<std::string>(j, "split", "train");
  if (split != "train" && split != "test")
    throw ValueError("config: dataset split must be 'train' or 'test'");
  d.split = split == "train" ? Cifar10Split::kTrain : Cifar10Split::kTest;
  d.images = get_or<std::string>(j, "images", "");
  d.labels = get_or<std::string>(j, "labels", "");
  d.limit = get_or<Index>(j, "limit", 0);
  d.classes = get_or<int>(j, "classes", 10);
  d.count = get_or<Index>(j, "count", 1000);
  d.noise = get_or<double>(j, "noise", 0.12);
  d.signal = get_or<double>(j, "signal", 0.14);
  d.clutter = get_or<double>(j, "clutter", 0.0);
  d.seed = get_or<uint64_t>(j, "seed", 1);
  d.template_seed = get_or<uint64_t>(j, "template_seed", 7);
  return d;
}

ModelConfig parse_model(const json& j) {
  check_keys(j, "model",
             {"arch", "input", "classes", "hidden", "conv1_channels", "conv2_channels",
              "dense_width"});
  ModelConfig mc;
  const std::string arch = get_or<std::string>(j, "arch", "small_conv");
  if (arch == "mlp")
    mc.arch = Arch::kMlp;
  else if (arch == "small_conv")
    mc.arch = Arch::kSmallConv;
  else
    throw ValueError("config: unknown model arch '" + arch + "'");
  mc.input_shape.clear();
  for (Index d : get_or<std::vector<Index>>(j, "input", {3, 32, 32})) mc.input_shape.push_back(d);
  mc.classes = get_or<int>(j, "classes", 10);
  mc.hidden.clear();
  for (Index d : get_or<std::vector<Index>>(j, "hidden", {64})) mc.hidden.push_back(d);
  mc.conv1_channels = get_or<Index>(j, "conv1_channels", 8);
  mc.conv2_channels = get_or<Index>(j, "conv2_channels", 16);
  mc.dense_width = get_or<Index>(j, "dense_width", 64);
  mc.validate();
  return mc;
}

AttackSpec parse_attack(const json& j, const std::string& where) {
  check_keys(j, where,
             {"preset", "kind", "epsilon", "alpha", "steps", "mu", "c", "kappa", "beta",
              "decision_rule", "max_iterations", "learning_rate", "optimizer", "target",
              "rng_seed", "random_start", "name"});
  AttackSpec s;
  if (j.contains("preset")) s = attack_preset(j.at("preset").get<std::string>());
  if (j.contains("kind")) {
    const std::string kind = j.at("kind").get<std::string>();
    bool found = false;
    for (AttackKind k : {AttackKind::kFgsm, AttackKind::kFgm, AttackKind::kRfgsm, AttackKind::kPgd,
                         AttackKind::kMifgsm, AttackKind::kCw, AttackKind::kEad})
      if (kind == attack_kind_name(k)) {
        s.kind = k;
        found = true;
      }
    if (!found) throw ValueError("config: unknown attack kind '" + kind + "' in " + where);
  }
  s.epsilon = get_or<double>(j, "epsilon", s.epsilon);
  s.alpha = get_or<double>(j, "alpha", s.alpha);
  s.steps = get_or<int>(j, "steps", s.steps);
  s.mu = get_or<double>(j, "mu", s.mu);
  s.c = get_or<double>(j, "c", s.c);
  s.kappa = get_or<double>(j, "kappa", s.kappa);
  s.beta = get_or<double>(j, "beta", s.beta);
  if (j.contains("decision_rule")) {
    const std::string rule = j.at("decision_rule").get<std::string>();
    if (rule == "EN")
      s.decision_rule = DecisionRule::kEn;
    else if (rule == "L1")
      s.decision_rule = DecisionRule::kL1;
    else
      throw ValueError("config: decision_rule must be 'EN' or 'L1'");
  }
  s.max_iterations = get_or<int>(j, "max_iterations", s.max_iterations);
  s.learning_rate = get_or<double>(j, "learning_rate", s.learning_rate);
  if (j.contains("optimizer")) {
    const std::string opt = j.at("optimizer").get<std::string>();
    if (opt == "adam")
      s.optimizer = AttackOptim::kAdam;
    else if (opt == "sgd")
      s.optimizer = AttackOptim::kSgd;
    else
      throw ValueError("config: attack optimizer must be 'adam' or 'sgd'");
  }
  s.target = get_or<int>(j, "target", s.target);
  s.rng_seed = get_or<uint64_t>(j, "rng_seed", s.rng_seed);
  s.random_start = get_or<bool>(j, "random_start", s.random_start);
  s.validate();
  return s;
}

DisjointTrainConfig parse_train(const json& j) {
  check_keys(j, "train",
             {"n", "w1", "w2", "w3", "w4", "eps1", "eps2", "epochs", "batch_size", "peak_lr",
              "momentum", "weight_decay", "angle_warmup_epochs", "sample_size", "variant", "seed",
              "base_checkpoint", "at"});
  DisjointTrainConfig t;
  t.n = get_or<int>(j, "n", 3);
  t.w1 = get_or<double>(j, "w1", 1.0);
  t.w2 = get_or<double>(j, "w2", 0.5);
  t.w3 = get_or<double>(j, "w3", 0.5);
  t.w4 = get_or<double>(j, "w4", 0.5);
  t.eps1 = get_or<double>(j, "eps1", 6.0);
  t.eps2 = get_or<double>(j, "eps2", 0.031);
  t.epochs = get_or<int>(j, "epochs", 30);
  t.batch_size = get_or<Index>(j, "batch_size", 64);
  t.peak_lr = get_or<double>(j, "peak_lr", 0.2);
  t.momentum = get_or<double>(j, "momentum", 0.9);
  t.weight_decay = get_or<double>(j, "weight_decay", 1e-4);
  t.angle_warmup_epochs = get_or<int>(j, "angle_warmup_epochs", 8);
  t.sample_size = get_or<int>(j, "sample_size", 0);
  const std::string variant = get_or<std::string>(j, "variant", "joint");
  bool found = false;
  for (TrainVariant v : {TrainVariant::kJoint, TrainVariant::kAddOne, TrainVariant::kSampling,
                         TrainVariant::kAngleOnly, TrainVariant::kTransferOnly})
    if (variant == variant_name(v)) {
      t.variant = v;
      found = true;
    }
  if (!found) throw ValueError("config: unknown training variant '" + variant + "'");
  t.seed = get_or<uint64_t>(j, "seed", 0);
  t.validate();
  return t;
}

EvalConfig parse_eval(const json& j) {
  check_keys(j, "eval", {"count", "source_member", "subsets", "sweep", "export_count", "cache"});
  EvalConfig e;
  e.count = get_or<Index>(j, "count", 1000);
  e.source_member = get_or<int>(j, "source_member", 0);
  if (j.contains("subsets")) e.subsets = j.at("subsets").get<std::vector<std::vector<int>>>();
  if (j.contains("sweep")) e.sweep = j.at("sweep").get<std::vector<double>>();
  e.export_count = get_or<Index>(j, "export_count", 1000);
  e.cache = get_or<bool>(j, "cache", true);
  return e;
}

SimulateConfig parse_simulate(const json& j) {
  check_keys(j, "simulate", {"policy", "adversary", "trials", "matrix_csv"});
  SimulateConfig s;
  if (j.contains("policy")) {
    const json& p = j.at("policy");
    check_keys(p, "simulate.policy", {"kind", "live", "order", "threshold", "window"});
    const std::string kind = get_or<std::string>(p, "kind", "uniform_random");
    if (kind == "uniform_random")
      s.policy.kind = PolicyKind::kUniformRandom;
    else if (kind == "staged_release")
      s.policy.kind = PolicyKind::kStagedRelease;
    else
      throw ValueError("config: unknown policy kind '" + kind + "'");
    s.policy.live = get_or<int>(p, "live", 1);
    if (p.contains("order")) s.policy.release_order = p.at("order").get<std::vector<int>>();
    s.policy.threshold = get_or<double>(p, "threshold", 0.5);
    s.policy.window = get_or<Index>(p, "window", 1000);
  }
  if (j.contains("adversary")) {
    const json& a = j.at("adversary");
    check_keys(a, "simulate.adversary", {"kind", "accessible", "attack"});
    const std::string kind = get_or<std::string>(a, "kind", "static");
    if (kind == "static")
      s.adversary.kind = AdversaryKind::kStatic;
    else if (kind == "skilled")
      s.adversary.kind = AdversaryKind::kSkilled;
    else if (kind == "oracle")
      s.adversary.kind = AdversaryKind::kOracle;
    else
      throw ValueError("config: unknown adversary kind '" + kind + "'");
    if (a.contains("accessible")) s.adversary.accessible = a.at("accessible").get<std::vector<int>>();
    if (a.contains("attack"))
      s.adversary.spec = parse_attack(a.at("attack"), "simulate.adversary.attack");
    else if (s.adversary.kind == AdversaryKind::kSkilled)
      s.adversary.spec = attack_preset("mifgsm2");
  }
  s.trials = get_or<Index>(j, "trials", 10000);
  s.matrix_csv = get_or<std::string>(j, "matrix_csv", "");
  return s;
}

}  // namespace

Dataset load_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetSpec::Kind::kCifar10:
      return load_cifar10(spec.dir, spec.split, spec.limit);
    case DatasetSpec::Kind::kCifarFile:
      return load_cifar10_file(spec.path, spec.limit);
    case DatasetSpec::Kind::kIdx:
      return load_idx(spec.images, spec.labels, spec.limit);
    case DatasetSpec::Kind::kBlobs:
      return make_blobs(spec.classes, spec.count, spec.noise, spec.seed);
    case DatasetSpec::Kind::kArcs:
      return make_arcs(spec.count, spec.noise, spec.seed);
    case DatasetSpec::Kind::kSynthImages: {
      SynthImageSpec s;
      s.classes = spec.classes;
      s.count = spec.count;
      s.noise = spec.noise;
      s.signal = spec.signal;
      s.clutter = spec.clutter;
      s.seed = spec.seed;
      s.template_seed = spec.template_seed;
      return make_synth_images(s);
    }
  }
  throw ValueError("load_dataset: unknown kind");
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValueError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(doc, "<root>", {"dataset", "model", "train", "attacks", "eval", "simulate"});

  ExperimentConfig cfg;
  if (doc.contains("dataset")) {
    const json& d = doc.at("dataset");
    check_keys(d, "dataset", {"train", "eval"});
    if (d.contains("train")) cfg.train_data = parse_dataset(d.at("train"), "dataset.train");
    if (d.contains("eval")) cfg.eval_data = parse_dataset(d.at("eval"), "dataset.eval");
  }
  if (doc.contains("model")) cfg.model = parse_model(doc.at("model"));
  if (doc.contains("train")) {
    cfg.train = parse_train(doc.at("train"));
    cfg.base_checkpoint = get_or<std::string>(doc.at("train"), "base_checkpoint", "");
    if (doc.at("train").contains("at")) cfg.at_attack = parse_attack(doc.at("train").at("at"), "train.at");
    else cfg.at_attack = attack_preset("rfgsm");
  } else {
    cfg.at_attack = attack_preset("rfgsm");
  }
  if (doc.contains("attacks")) {
    if (!doc.at("attacks").is_array()) throw ValueError("config: 'attacks' must be an array");
    int unnamed = 0;
    for (const json& a : doc.at("attacks")) {
      AttackSpec s = parse_attack(a, "attacks[]");
      std::string name = get_or<std::string>(a, "name", "");
      if (name.empty()) name = get_or<std::string>(a, "preset", "");
      if (name.empty()) name = std::string(attack_kind_name(s.kind)) + std::to_string(unnamed++);
      cfg.attacks.emplace_back(name, s);
    }
  }
  if (doc.contains("eval")) cfg.eval = parse_eval(doc.at("eval"));
  if (doc.contains("simulate")) cfg.simulate = parse_simulate(doc.at("simulate"));

  Fnv1a h;
  h.str(doc.dump());
  cfg.config_hash = h.value();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text);
}

std::string attack_spec_to_json(const AttackSpec& s) {
  json j;
  j["kind"] = attack_kind_name(s.kind);
  j["epsilon"] = s.epsilon;
  j["alpha"] = s.alpha;
  j["steps"] = s.steps;
  j["mu"] = s.mu;
  j["c"] = s.c;
  j["kappa"] = s.kappa;
  j["beta"] = s.beta;
  j["decision_rule"] = s.decision_rule == DecisionRule::kEn ? "EN" : "L1";
  j["max_iterations"] = s.max_iterations;
  j["learning_rate"] = s.learning_rate;
  j["optimizer"] = s.optimizer == AttackOptim::kAdam ? "adam" : "sgd";
  j["target"] = s.target;
  j["rng_seed"] = s.rng_seed;
  j["random_start"] = s.random_start;
  return j.dump(2);
}

AttackSpec attack_spec_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValueError(std::string("attack spec: invalid JSON: ") + e.what());
  }
  return parse_attack(j, "attack");
}

}  // namespace disjoint
