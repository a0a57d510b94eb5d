#include "experiment.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "report.hpp"
#include "rng.hpp"

namespace clp {

namespace fs = std::filesystem;
using nlohmann::json;

std::string RunResult::variant_label() const {
  std::string v = cfg.variant();
  if (v == "attack") v += "_t" + cfg.get("target_task");
  return v;
}

std::pair<LabeledImages, LabeledImages> load_base_data(const ExperimentConfig& cfg) {
  const std::string d = cfg.data_dir();
  LabeledImages train =
      load_mnist_idx(d + "/train-images-idx3-ubyte", d + "/train-labels-idx1-ubyte");
  LabeledImages test = load_mnist_idx(d + "/t10k-images-idx3-ubyte", d + "/t10k-labels-idx1-ubyte");
  train = subsample(train, cfg.train_subsample(), derive_seed(cfg.seed(), "subsample:train"));
  test = subsample(test, cfg.test_subsample(), derive_seed(cfg.seed(), "subsample:test"));
  return {std::move(train), std::move(test)};
}

std::vector<TaskDataset> build_tasks(const ExperimentConfig& cfg) {
  auto [train, test] = load_base_data(cfg);
  if (cfg.benchmark() == "permuted")
    return make_permuted_tasks(train, test, cfg.n_tasks(), derive_seed(cfg.seed(), "tasks"));
  return make_split_tasks(train, test);
}

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(pa[i] - pb[i]));
  return m;
}

std::string ckpt_path(const std::string& run_dir, int task) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "/ckpt_task_%02d.bin", task);
  return run_dir + buf;
}

void write_poison_sidecar(const std::string& run_dir, const ExperimentConfig& cfg,
                          const TaskDataset& data, const std::string& kind) {
  json meta;
  meta["schema_version"] = 1;
  meta["kind"] = kind;
  meta["target_task"] = data.descriptor.target_task;
  meta["eps"] = data.descriptor.eps;
  meta["seed"] = cfg.seed();
  meta["config_hash"] = cfg.hash();
  std::ofstream os(run_dir + "/poison_meta.json", std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write poison_meta.json");
  os << meta.dump(2) << "\n";
}

void write_run_meta(const std::string& run_dir) {
  // timestamps live here so results.json stays byte-deterministic
  json meta;
  auto now = std::chrono::system_clock::now().time_since_epoch();
  meta["unix_time"] = std::chrono::duration_cast<std::chrono::seconds>(now).count();
  std::ofstream os(run_dir + "/run_meta.json", std::ios::binary);
  if (os) os << meta.dump(2) << "\n";
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  if (!run_dir.empty()) fs::create_directories(run_dir);

  std::vector<TaskDataset> tasks = build_tasks(cfg);
  const int n = static_cast<int>(tasks.size());

  RunResult out;
  out.cfg = cfg;
  out.n_tasks = n;

  const Method method = cfg.method();
  const TrainHyper hyper = cfg.train_hyper();
  Classifier victim = Classifier::create(MlpSpec{}, derive_seed(cfg.seed(), "victim-init"));
  std::vector<ImportanceMap> maps;

  std::vector<LabeledImages> test_sets;
  test_sets.reserve(static_cast<size_t>(n));
  for (const TaskDataset& t : tasks) test_sets.push_back(t.test);

  for (int k = 1; k <= n; ++k) {
    TaskDataset data_k = tasks[static_cast<size_t>(k - 1)];
    if (k == n && n >= 2 && cfg.variant() != "plain") {
      if (cfg.variant() == "noise") {
        data_k = uniform_noise_baseline(tasks[static_cast<size_t>(k - 1)], cfg.get_double("eps"),
                                        derive_seed(cfg.seed(), "noise"));
      } else {
        AttackSettings settings = cfg.attack_settings();
        settings.new_task_index = n;
        AttackTrainResult attack = train_attack_model(victim, tasks, maps, settings,
                                                      derive_seed(cfg.seed(), "attack"));
        data_k = generate_poisoned_dataset(attack.model, tasks[static_cast<size_t>(k - 1)]);
        data_k.descriptor.target_task = settings.target_task;
        if (!run_dir.empty())
          save_checkpoint(run_dir + "/attack_model.bin", attack.model.params(), "attack");
      }
      out.poison_linf =
          max_abs_diff(data_k.train.images, tasks[static_cast<size_t>(k - 1)].train.images);
      if (!run_dir.empty()) {
        write_mnist_idx(run_dir + "/poisoned-train-images-idx3-ubyte",
                        run_dir + "/poisoned-train-labels-idx1-ubyte", data_k.train);
        write_poison_sidecar(run_dir, cfg, data_k, cfg.variant());
      }
    }

    TrainResult tr = train_task(victim, data_k, method, maps, hyper,
                                derive_seed(cfg.seed(), "task:" + std::to_string(k)), test_sets);
    for (size_t e = 0; e < tr.epoch_eval.size(); ++e)
      out.traces.push_back({k, static_cast<int>(e) + 1, tr.epoch_eval[e]});
    if (tr.new_map) maps.push_back(std::move(*tr.new_map));

    std::vector<double> row;
    row.reserve(test_sets.size());
    for (const LabeledImages& ts : test_sets) row.push_back(victim.accuracy(ts));
    out.R.push_back(std::move(row));

    if (!run_dir.empty()) save_checkpoint(ckpt_path(run_dir, k), victim.params(), "classifier");
  }

  out.final_accuracy = out.R.back();
  if (!run_dir.empty()) {
    cfg.save(run_dir + "/config.txt");
    save_results_json(out, run_dir + "/results.json");
    write_run_meta(run_dir);
  }
  return out;
}

double backward_transfer(const std::vector<std::vector<double>>& R, int t, int N) {
  if (N < 3)
    fail(ErrorKind::invalid_argument,
         "backward transfer needs N >= 3 tasks, got N=" + std::to_string(N));
  if (t < 1 || t >= N)
    fail(ErrorKind::invalid_argument, "backward transfer target " + std::to_string(t) +
                                          " outside [1," + std::to_string(N) + ")");
  if (static_cast<int>(R.size()) < N)
    fail(ErrorKind::invalid_argument, "results matrix has fewer than N rows");
  double sum = 0.0;
  for (int k = 1; k <= N; ++k) {
    if (k == t || k == N) continue;
    sum += R[static_cast<size_t>(N - 1)][static_cast<size_t>(k - 1)] -
           R[static_cast<size_t>(k - 1)][static_cast<size_t>(k - 1)];
  }
  return sum / static_cast<double>(N - 2);
}

RunResult eval_run_dir(const std::string& run_dir, const std::string& data_dir_override) {
  ExperimentConfig cfg = ExperimentConfig::from_file(run_dir + "/config.txt");
  if (!data_dir_override.empty()) cfg.set("data_dir", data_dir_override);
  std::vector<TaskDataset> tasks = build_tasks(cfg);
  const int n = static_cast<int>(tasks.size());

  RunResult out;
  out.cfg = cfg;
  out.n_tasks = n;
  Classifier probe = Classifier::create(MlpSpec{}, 0);
  for (int k = 1; k <= n; ++k) {
    ParamVector p = load_checkpoint(ckpt_path(run_dir, k));
    if (!p.same_layout(probe.params()))
      fail(ErrorKind::data, "checkpoint layout does not match the classifier");
    probe.params() = std::move(p);
    std::vector<double> row;
    for (const TaskDataset& t : tasks) row.push_back(probe.accuracy(t.test));
    out.R.push_back(std::move(row));
  }
  out.final_accuracy = out.R.back();
  return out;
}

void save_results_json(const RunResult& run, const std::string& path) {
  json j;
  j["schema_version"] = 1;
  j["config"] = run.cfg.entries();
  j["config_hash"] = run.cfg.hash();
  j["n_tasks"] = run.n_tasks;
  j["R"] = run.R;
  j["final_accuracy"] = run.final_accuracy;
  j["poison_linf"] = run.poison_linf;
  json traces = json::array();
  for (const auto& t : run.traces)
    traces.push_back({{"task", t.task}, {"epoch", t.epoch}, {"accuracy", t.accuracy}});
  j["traces"] = traces;
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write " + path);
  os << j.dump(2) << "\n";
  if (!os) fail(ErrorKind::io, "failed writing " + path);
}

RunResult load_results_json(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::data, "malformed results file " + path + ": " + e.what());
  }
  RunResult out;
  try {
    for (const auto& [k, v] : j.at("config").items()) out.cfg.set(k, v.get<std::string>());
    out.n_tasks = j.at("n_tasks").get<int>();
    out.R = j.at("R").get<std::vector<std::vector<double>>>();
    out.final_accuracy = j.at("final_accuracy").get<std::vector<double>>();
    out.poison_linf = j.value("poison_linf", 0.0);
    for (const auto& t : j.at("traces")) {
      RunResult::TraceRow row;
      row.task = t.at("task").get<int>();
      row.epoch = t.at("epoch").get<int>();
      row.accuracy = t.at("accuracy").get<std::vector<double>>();
      out.traces.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::data, "results file " + path + " missing fields: " + e.what());
  }
  return out;
}

void emit_attack_artifacts(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (cfg.variant() != "attack")
    fail(ErrorKind::invalid_argument, "attack artifacts need variant=attack");
  fs::create_directories(out_dir);

  std::vector<TaskDataset> tasks = build_tasks(cfg);
  const int n = static_cast<int>(tasks.size());
  const TrainHyper hyper = cfg.train_hyper();
  const Method method = cfg.method();

  Classifier victim = Classifier::create(MlpSpec{}, derive_seed(cfg.seed(), "victim-init"));
  std::vector<ImportanceMap> maps;
  for (int k = 1; k < n; ++k) {
    TrainResult tr = train_task(victim, tasks[static_cast<size_t>(k - 1)], method, maps, hyper,
                                derive_seed(cfg.seed(), "task:" + std::to_string(k)));
    if (tr.new_map) maps.push_back(std::move(*tr.new_map));
  }

  AttackSettings settings = cfg.attack_settings();
  settings.new_task_index = n;
  AttackTrainResult attack =
      train_attack_model(victim, tasks, maps, settings, derive_seed(cfg.seed(), "attack"));
  TaskDataset poisoned = generate_poisoned_dataset(attack.model, tasks[static_cast<size_t>(n - 1)]);
  poisoned.descriptor.target_task = settings.target_task;

  write_mnist_idx(out_dir + "/poisoned-train-images-idx3-ubyte",
                  out_dir + "/poisoned-train-labels-idx1-ubyte", poisoned.train);
  write_poison_sidecar(out_dir, cfg, poisoned, "attack");
  save_checkpoint(out_dir + "/attack_model.bin", attack.model.params(), "attack");
  save_checkpoint(out_dir + "/victim_before_attack.bin", victim.params(), "classifier");
  cfg.save(out_dir + "/config.txt");
}

// ---- grid -------------------------------------------------------------------

namespace {

std::vector<ExperimentConfig> reproduce_cells(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> cells;
  auto push = [&](const std::string& bench, const std::string& method, const std::string& variant,
                  int target, uint64_t seed, bool kd) {
    ExperimentConfig c = base;
    c.set("benchmark", bench);
    c.set("method", method);
    c.set("variant", variant);
    c.set("target_task", std::to_string(target));
    c.set("seed", std::to_string(seed));
    c.set("kd_enabled", kd ? "1" : "0");
    cells.push_back(std::move(c));
  };

  const uint64_t s0 = base.seed();
  for (const std::string bench : {"permuted", "split"}) {
    push(bench, "sgd", "plain", 1, s0, true);
    for (const std::string m : {"ewc", "si"}) {
      push(bench, m, "plain", 1, s0, true);
      push(bench, m, "noise", 1, s0, true);
      push(bench, m, "attack", 1, s0, true);
      push(bench, m, "attack", 2, s0, true);
    }
  }
  // KD ablation (t=1, permuted) over reproduce_seeds seeds
  for (const std::string m : {"ewc", "si"}) {
    for (int i = 0; i < base.reproduce_seeds(); ++i) {
      push("permuted", m, "plain", 1, s0 + static_cast<uint64_t>(i), true);
      push("permuted", m, "attack", 1, s0 + static_cast<uint64_t>(i), true);
      push("permuted", m, "attack", 1, s0 + static_cast<uint64_t>(i), false);
    }
  }

  // dedupe, then order by canonical text so outputs are deterministic
  std::set<std::string> seen;
  std::vector<ExperimentConfig> unique;
  for (auto& c : cells)
    if (seen.insert(c.canonical()).second) unique.push_back(std::move(c));
  std::sort(unique.begin(), unique.end(), [](const ExperimentConfig& a, const ExperimentConfig& b) {
    return a.canonical() < b.canonical();
  });
  return unique;
}

json ablation_summary(const std::vector<RunResult>& runs, const ExperimentConfig& base) {
  // backward transfer of the final task for tasks k not in {t=1, N}
  auto find_run = [&](const std::string& method, const std::string& variant, uint64_t seed,
                      bool kd) -> const RunResult* {
    for (const RunResult& r : runs) {
      if (r.cfg.benchmark() != "permuted" || r.cfg.get("method") != method) continue;
      if (r.cfg.variant() != variant || r.cfg.seed() != seed) continue;
      if (r.cfg.kd_enabled() != kd) continue;
      if (variant == "attack" && r.cfg.target_task() != 1) continue;
      return &r;
    }
    return nullptr;
  };

  json out;
  const int n = base.n_tasks();
  for (const std::string m : {"ewc", "si"}) {
    json per_seed = json::array();
    double sum_plain = 0, sum_kd = 0, sum_nokd = 0;
    int count = 0;
    for (int i = 0; i < base.reproduce_seeds(); ++i) {
      uint64_t seed = base.seed() + static_cast<uint64_t>(i);
      const RunResult* plain = find_run(m, "plain", seed, true);
      const RunResult* kd = find_run(m, "attack", seed, true);
      const RunResult* nokd = find_run(m, "attack", seed, false);
      if (!plain || !kd || !nokd) continue;
      double b_plain = backward_transfer(plain->R, 1, n);
      double b_kd = backward_transfer(kd->R, 1, n);
      double b_nokd = backward_transfer(nokd->R, 1, n);
      per_seed.push_back({{"seed", seed},
                          {"plain", b_plain},
                          {"attack_with_kd", b_kd},
                          {"attack_without_kd", b_nokd}});
      sum_plain += b_plain;
      sum_kd += b_kd;
      sum_nokd += b_nokd;
      ++count;
    }
    if (count > 0) {
      out[m] = {{"per_seed", per_seed},
                {"mean_plain", sum_plain / count},
                {"mean_attack_with_kd", sum_kd / count},
                {"mean_attack_without_kd", sum_nokd / count}};
    }
  }
  return out;
}

}  // namespace

std::vector<RunResult> reproduce(const ExperimentConfig& base, const std::string& out_dir) {
  base.validate();
  fs::create_directories(out_dir);
  std::vector<ExperimentConfig> cells = reproduce_cells(base);

  std::vector<RunResult> results(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<size_t> next{0};
  int jobs = base.jobs() > 0 ? base.jobs()
                             : std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min<int>(jobs, static_cast<int>(cells.size()));

  auto worker = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        results[i] = run_experiment(cells[i], out_dir + "/runs/" + cells[i].hash());
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty())
      fail(ErrorKind::internal, "grid cell " + cells[i].hash() + " failed: " + errors[i]);

  emit_reports(results, out_dir);
  json ab = ablation_summary(results, base);
  std::ofstream os(out_dir + "/ablation.json", std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write ablation.json");
  os << ab.dump(2) << "\n";
  return results;
}

}  // namespace clp
