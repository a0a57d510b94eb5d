#pragma once

#include <string>
#include <vector>

#include "config.hpp"

namespace clp {

// R[i][j] = accuracy on task j+1 right after finishing training on task i+1;
// traces carry the full test battery after every epoch of every task.
struct RunResult {
  ExperimentConfig cfg;
  int n_tasks = 0;
  std::vector<std::vector<double>> R;
  struct TraceRow {
    int task = 0;
    int epoch = 0;
    std::vector<double> accuracy;
  };
  std::vector<TraceRow> traces;
  std::vector<double> final_accuracy;
  double poison_linf = 0.0;  // max |x' - x| over the substituted train set

  std::string variant_label() const;  // plain | noise | attack_t<k>
};

// Builds the benchmark, trains the task sequence with the configured method
// and variant, evaluates the clean test battery after every task/epoch and
// persists config/results/checkpoints (and the poisoned IDX pair for
// attack/noise variants) into run_dir when it is non-empty.
RunResult run_experiment(const ExperimentConfig& cfg, const std::string& run_dir);

// mean over k not in {t, N} of R[N][k] - R[k][k] (1-based tasks)
double backward_transfer(const std::vector<std::vector<double>>& R, int t, int N);

// Rebuilds R from the checkpoints saved by a previous run.
RunResult eval_run_dir(const std::string& run_dir, const std::string& data_dir_override);

void save_results_json(const RunResult& run, const std::string& path);
RunResult load_results_json(const std::string& path);

// Trains the attack model for the configured target and emits the poisoned
// dataset (IDX pair + sidecar metadata + attack checkpoint) into out_dir.
void emit_attack_artifacts(const ExperimentConfig& cfg, const std::string& out_dir);

// The full desk-scale grid (both benchmarks, all methods/variants, plus the
// KD ablation over reproduce_seeds seeds), run with `jobs` workers. Writes
// per-run directories plus combined reports into out_dir.
std::vector<RunResult> reproduce(const ExperimentConfig& base, const std::string& out_dir);

// loads the shared base pair (train/test) for a config, subsampled as configured
std::pair<LabeledImages, LabeledImages> load_base_data(const ExperimentConfig& cfg);
std::vector<TaskDataset> build_tasks(const ExperimentConfig& cfg);

}  // namespace clp
