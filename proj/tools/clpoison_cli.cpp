// Experiment CLI. Everything goes through the public C API in clpoison.h.
#include <CLI11.hpp>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "clpoison.h"

namespace {

struct ConfigHandle {
  clp_config* cfg = clp_config_new();
  ~ConfigHandle() { clp_config_free(cfg); }
};

struct RunHandle {
  clp_run* run = nullptr;
  ~RunHandle() { clp_run_free(run); }
};

[[noreturn]] void die(clp_status st) {
  std::fprintf(stderr, "error: %s (%s)\n", clp_last_error(), clp_status_name(st));
  std::exit(1);
}

void check(clp_status st) {
  if (st != CLP_OK) die(st);
}

// flags shared by the experiment-shaped subcommands
struct CommonOpts {
  std::string config_path, seed, data_dir, out_dir, benchmark, method, variant, target_task,
      subsample, jobs;
  bool first_order = false;
  std::vector<std::string> overrides;  // raw key=value pairs

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "config file (key=value lines)");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--data-dir", data_dir, "directory with the IDX files");
    app->add_option("--out-dir", out_dir, "output directory");
    app->add_option("--benchmark", benchmark, "permuted | split");
    app->add_option("--method", method, "sgd | ewc | si");
    app->add_option("--variant", variant, "plain | noise | attack");
    app->add_option("--target-task", target_task, "attacked task t (1-based, t < n_tasks)");
    app->add_option("--subsample", subsample, "per-task train subsample (0 = full)");
    app->add_option("--jobs", jobs, "worker threads for grids (0 = auto)");
    app->add_flag("--first-order", first_order,
                  "treat the inner gradient as constant w.r.t. the attack parameters");
    app->add_option("--set", overrides, "extra key=value config overrides")
        ->expected(-1);
  }

  void apply(clp_config* cfg) const {
    if (!config_path.empty()) check(clp_config_load(cfg, config_path.c_str()));
    auto set = [&](const char* key, const std::string& value) {
      if (!value.empty()) check(clp_config_set(cfg, key, value.c_str()));
    };
    set("seed", seed);
    set("data_dir", data_dir);
    set("out_dir", out_dir);
    set("benchmark", benchmark);
    set("method", method);
    set("variant", variant);
    set("target_task", target_task);
    set("train_subsample", subsample);
    set("jobs", jobs);
    if (first_order) check(clp_config_set(cfg, "first_order", "1"));
    for (const std::string& kv : overrides) {
      size_t eq = kv.find('=');
      if (eq == std::string::npos) {
        std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
        std::exit(1);
      }
      check(clp_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
    }
  }
};

std::string config_value(const clp_config* cfg, const char* key) {
  char buf[512];
  check(clp_config_get(cfg, key, buf, sizeof(buf)));
  return buf;
}

void print_final_accuracies(const clp_run* run) {
  int n = clp_run_num_tasks(run);
  for (int task = 1; task <= n; ++task) {
    double acc = 0.0;
    check(clp_run_final_accuracy(run, task, &acc));
    std::printf("final accuracy T%d: %.4f\n", task, acc);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual-learning poisoning lab"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic MNIST-shaped IDX corpus");
  std::string synth_dir = "data";
  unsigned long long synth_seed = 1;
  long long synth_train = 0, synth_test = 0;
  synth->add_option("--out-dir", synth_dir, "target directory")->capture_default_str();
  synth->add_option("--seed", synth_seed, "corpus seed")->capture_default_str();
  synth->add_option("--train", synth_train, "train images (default 60000)");
  synth->add_option("--test", synth_test, "test images (default 10000)");

  // train
  auto* train = app.add_subcommand("train", "run one experiment (plain, noise or attack)");
  CommonOpts train_opts;
  train_opts.add_to(train);

  // attack
  auto* attack = app.add_subcommand("attack", "train the attack model and emit the poisoned dataset");
  CommonOpts attack_opts;
  attack_opts.add_to(attack);

  // eval
  auto* eval = app.add_subcommand("eval", "recompute R and B from a saved run's checkpoints");
  std::string eval_run_dir, eval_data_dir, eval_target;
  eval->add_option("--run-dir", eval_run_dir, "run directory")->required();
  eval->add_option("--data-dir", eval_data_dir, "override the data directory");
  eval->add_option("--target-task", eval_target, "also print backward transfer for this target");

  // report
  auto* report = app.add_subcommand("report", "emit CSV/JSON/SVG reports from results.json files");
  std::vector<std::string> report_inputs;
  std::string report_out = "report";
  report->add_option("results", report_inputs, "results.json files")->required()->expected(-1);
  report->add_option("--out-dir", report_out, "report directory")->capture_default_str();

  // reproduce
  auto* reproduce = app.add_subcommand("reproduce", "run the full desk-scale grid");
  CommonOpts rep_opts;
  rep_opts.add_to(reproduce);

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    check(clp_write_synthetic_mnist(synth_dir.c_str(), synth_seed, synth_train, synth_test));
    std::printf("synthetic corpus written to %s\n", synth_dir.c_str());
    return 0;
  }

  if (train->parsed()) {
    ConfigHandle cfg;
    train_opts.apply(cfg.cfg);
    char hash[32];
    check(clp_config_hash(cfg.cfg, hash, sizeof(hash)));
    std::string run_dir = config_value(cfg.cfg, "out_dir") + "/runs/" + hash;
    RunHandle run;
    check(clp_run_experiment(cfg.cfg, run_dir.c_str(), &run.run));
    std::printf("run %s finished, artifacts in %s\n", hash, run_dir.c_str());
    print_final_accuracies(run.run);
    return 0;
  }

  if (attack->parsed()) {
    ConfigHandle cfg;
    attack_opts.apply(cfg.cfg);
    check(clp_config_set(cfg.cfg, "variant", "attack"));
    char hash[32];
    check(clp_config_hash(cfg.cfg, hash, sizeof(hash)));
    std::string out_dir = config_value(cfg.cfg, "out_dir") + "/attack_" + hash;
    check(clp_emit_attack_artifacts(cfg.cfg, out_dir.c_str()));
    std::printf("poisoned dataset and attack checkpoint written to %s\n", out_dir.c_str());
    return 0;
  }

  if (eval->parsed()) {
    RunHandle run;
    check(clp_eval_run_dir(eval_run_dir.c_str(),
                           eval_data_dir.empty() ? nullptr : eval_data_dir.c_str(), &run.run));
    print_final_accuracies(run.run);
    if (!eval_target.empty()) {
      double b = 0.0;
      check(clp_run_backward_transfer(run.run, std::atoi(eval_target.c_str()), &b));
      std::printf("backward transfer (t=%s): %.4f\n", eval_target.c_str(), b);
    }
    return 0;
  }

  if (report->parsed()) {
    std::vector<RunHandle> runs(report_inputs.size());
    std::vector<const clp_run*> handles;
    for (size_t i = 0; i < report_inputs.size(); ++i) {
      check(clp_run_load(report_inputs[i].c_str(), &runs[i].run));
      handles.push_back(runs[i].run);
    }
    check(clp_emit_reports(handles.data(), handles.size(), report_out.c_str()));
    std::printf("reports written to %s\n", report_out.c_str());
    return 0;
  }

  if (reproduce->parsed()) {
    ConfigHandle cfg;
    rep_opts.apply(cfg.cfg);
    std::string out_dir = config_value(cfg.cfg, "out_dir");
    check(clp_reproduce(cfg.cfg, out_dir.c_str()));
    std::printf("grid finished; reports in %s (final_accuracy.csv, results.json, ablation.json)\n",
                out_dir.c_str());
    return 0;
  }

  return 0;
}
