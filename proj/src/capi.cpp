#include "clpoison.h"

#include <cstring>
#include <string>

#include "experiment.hpp"
#include "report.hpp"
#include "synth.hpp"

using namespace clp;

struct clp_config {
  ExperimentConfig cfg;
};

struct clp_run {
  RunResult run;
};

namespace {

thread_local std::string t_last_error;

clp_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return CLP_ERR_INVALID_ARGUMENT;
    case ErrorKind::data: return CLP_ERR_DATA;
    case ErrorKind::io: return CLP_ERR_IO;
    case ErrorKind::numeric: return CLP_ERR_NUMERIC;
    case ErrorKind::internal: return CLP_ERR_INTERNAL;
  }
  return CLP_ERR_INTERNAL;
}

template <typename Fn>
clp_status guarded(Fn&& fn) {
  try {
    fn();
    return CLP_OK;
  } catch (const Error& e) {
    t_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::exception& e) {
    t_last_error = e.what();
    return CLP_ERR_INTERNAL;
  }
}

clp_status copy_out(const std::string& s, char* buf, size_t cap) {
  if (!buf || cap == 0 || s.size() + 1 > cap) {
    t_last_error = "buffer too small (" + std::to_string(s.size() + 1) + " bytes needed)";
    return CLP_ERR_INVALID_ARGUMENT;
  }
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return CLP_OK;
}

clp_status einval(const char* msg) {
  t_last_error = msg;
  return CLP_ERR_INVALID_ARGUMENT;
}

}  // namespace

extern "C" {

const char* clp_status_name(clp_status status) {
  switch (status) {
    case CLP_OK: return "ok";
    case CLP_ERR_INVALID_ARGUMENT: return "invalid argument";
    case CLP_ERR_DATA: return "data error";
    case CLP_ERR_IO: return "io error";
    case CLP_ERR_NUMERIC: return "numeric error";
    case CLP_ERR_INTERNAL: return "internal error";
  }
  return "unknown";
}

const char* clp_last_error(void) { return t_last_error.c_str(); }

const char* clp_version(void) { return "clpoison 1.0.0"; }

clp_config* clp_config_new(void) { return new clp_config{}; }

void clp_config_free(clp_config* cfg) { delete cfg; }

clp_status clp_config_load(clp_config* cfg, const char* path) {
  if (!cfg || !path) return einval("clp_config_load: null argument");
  return guarded([&] { cfg->cfg = ExperimentConfig::from_file(path); });
}

clp_status clp_config_set(clp_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return einval("clp_config_set: null argument");
  return guarded([&] { cfg->cfg.set(key, value); });
}

clp_status clp_config_get(const clp_config* cfg, const char* key, char* buf, size_t cap) {
  if (!cfg || !key) return einval("clp_config_get: null argument");
  std::string value;
  clp_status st = guarded([&] { value = cfg->cfg.get(key); });
  if (st != CLP_OK) return st;
  return copy_out(value, buf, cap);
}

clp_status clp_config_hash(const clp_config* cfg, char* buf, size_t cap) {
  if (!cfg) return einval("clp_config_hash: null argument");
  return copy_out(cfg->cfg.hash(), buf, cap);
}

clp_status clp_run_experiment(const clp_config* cfg, const char* run_dir, clp_run** out) {
  if (!cfg || !out) return einval("clp_run_experiment: null argument");
  return guarded([&] {
    auto run = std::make_unique<clp_run>();
    run->run = run_experiment(cfg->cfg, run_dir ? run_dir : "");
    *out = run.release();
  });
}

clp_status clp_run_load(const char* path, clp_run** out) {
  if (!path || !out) return einval("clp_run_load: null argument");
  return guarded([&] {
    auto run = std::make_unique<clp_run>();
    run->run = load_results_json(path);
    *out = run.release();
  });
}

clp_status clp_run_save(const clp_run* run, const char* path) {
  if (!run || !path) return einval("clp_run_save: null argument");
  return guarded([&] { save_results_json(run->run, path); });
}

clp_status clp_eval_run_dir(const char* run_dir, const char* data_dir, clp_run** out) {
  if (!run_dir || !out) return einval("clp_eval_run_dir: null argument");
  return guarded([&] {
    auto run = std::make_unique<clp_run>();
    run->run = eval_run_dir(run_dir, data_dir ? data_dir : "");
    *out = run.release();
  });
}

void clp_run_free(clp_run* run) { delete run; }

int clp_run_num_tasks(const clp_run* run) { return run ? run->run.n_tasks : 0; }

clp_status clp_run_accuracy(const clp_run* run, int trained_upto, int eval_task, double* out) {
  if (!run || !out) return einval("clp_run_accuracy: null argument");
  int n = run->run.n_tasks;
  if (trained_upto < 1 || trained_upto > n || eval_task < 1 || eval_task > n)
    return einval("clp_run_accuracy: task index out of range");
  *out = run->run.R[static_cast<size_t>(trained_upto - 1)][static_cast<size_t>(eval_task - 1)];
  return CLP_OK;
}

clp_status clp_run_final_accuracy(const clp_run* run, int task, double* out) {
  if (!run || !out) return einval("clp_run_final_accuracy: null argument");
  if (task < 1 || task > run->run.n_tasks)
    return einval("clp_run_final_accuracy: task index out of range");
  *out = run->run.final_accuracy[static_cast<size_t>(task - 1)];
  return CLP_OK;
}

clp_status clp_run_backward_transfer(const clp_run* run, int target_task, double* out) {
  if (!run || !out) return einval("clp_run_backward_transfer: null argument");
  return guarded([&] { *out = backward_transfer(run->run.R, target_task, run->run.n_tasks); });
}

clp_status clp_emit_attack_artifacts(const clp_config* cfg, const char* out_dir) {
  if (!cfg || !out_dir) return einval("clp_emit_attack_artifacts: null argument");
  return guarded([&] { emit_attack_artifacts(cfg->cfg, out_dir); });
}

clp_status clp_emit_reports(const clp_run* const* runs, size_t n, const char* out_dir) {
  if ((!runs && n > 0) || !out_dir) return einval("clp_emit_reports: null argument");
  return guarded([&] {
    std::vector<RunResult> rs;
    rs.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      if (!runs[i]) fail(ErrorKind::invalid_argument, "clp_emit_reports: null run handle");
      rs.push_back(runs[i]->run);
    }
    emit_reports(rs, out_dir);
  });
}

clp_status clp_reproduce(const clp_config* cfg, const char* out_dir) {
  if (!cfg || !out_dir) return einval("clp_reproduce: null argument");
  return guarded([&] { reproduce(cfg->cfg, out_dir); });
}

clp_status clp_write_synthetic_mnist(const char* dir, unsigned long long seed, long long n_train,
                                     long long n_test) {
  if (!dir) return einval("clp_write_synthetic_mnist: null argument");
  return guarded([&] {
    SynthSpec spec;
    spec.seed = seed;
    if (n_train > 0) spec.n_train = n_train;
    if (n_test > 0) spec.n_test = n_test;
    write_synthetic_mnist(dir, spec);
  });
}

}  // extern "C"
