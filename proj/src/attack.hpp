#pragma once

#include <span>
#include <vector>

#include "continual.hpp"

namespace clp {

struct AttackSettings {
  int target_task = 1;     // t, 1-based, must satisfy 1 <= t < new_task_index
  int new_task_index = 5;  // N
  double eps = 0.2;
  int epochs = 10;          // attack-model epochs
  double lr_xi = 1e-4;      // Adam step size for xi
  int64_t batch_size = 256; // attack-side batch
  double inner_lr = 0.1;    // alpha_f of the pseudo-update
  double alpha_kd = 1.0;
  double temperature = 2.0;
  int64_t kd_subset = 1024;
  int snapshot_stride = 10;
  bool kd_enabled = true;
  bool second_order = true;  // false: inner gradient treated as constant w.r.t. xi

  // victim-side loop used for trajectory recording
  int victim_epochs = 5;
  int64_t victim_batch = 256;
  double victim_lr = 0.1;

  void validate(int n_tasks) const;
};

// Parameter snapshots of a temporary victim trained on the currently
// poisoned task, plus the train-set indices of the batch the victim would
// consume next from each snapshot.
struct TrajectorySnapshot {
  ParamVector theta;
  std::vector<int64_t> batch_indices;
  int step = 0;
};

struct Trajectory {
  std::vector<TrajectorySnapshot> snapshots;
};

// Trains a throwaway copy of `start` on task_n poisoned by the (fixed)
// attack model, with the same step the real victim uses; records theta
// every `snapshot_stride` steps, including step 0 and the final state.
Trajectory record_trajectory(const Classifier& start, const AttackModel& attack,
                             const TaskDataset& task_n, std::span<const ImportanceMap> maps,
                             const AttackSettings& cfg, uint64_t seed);

// L_atk at one trajectory snapshot: pseudo-update theta_j on the poisoned
// new-task batch (cross-entropy + penalty), then cross-entropy on the target
// batch minus the temperature-scaled KD terms against the pre-attack
// classifier. Gradients reach xi only through the pseudo-update.
Tensor attack_loss(Graph& g, const MlpSpec& victim_spec, std::span<const Tensor> theta_leaves,
                   const AttackModel& attack, std::span<const Tensor> xi_leaves,
                   const Tensor& x_new, const std::vector<int32_t>& y_new,
                   const Tensor& x_target, const std::vector<int32_t>& y_target,
                   std::span<const Tensor> kd_inputs, const ParamVector& theta_prev,
                   std::span<const ImportanceMap> maps, const AttackSettings& cfg);

struct AttackTrainResult {
  AttackModel model;
  std::vector<double> epoch_mean_loss;  // mean L_atk per attack epoch
};

// tasks the KD constraint draws from: every past task except the target
std::vector<int64_t> kd_task_ids(const AttackSettings& cfg);

// Alternates trajectory recording with Adam ascent on L_atk along the
// snapshots, for cfg.epochs rounds.
AttackTrainResult train_attack_model(const Classifier& victim_at_prev,
                                     const std::vector<TaskDataset>& tasks,
                                     std::span<const ImportanceMap> maps,
                                     const AttackSettings& cfg, uint64_t seed);

// Replaces the train split by clip(x + noise, 0, 1), byte-quantized exactly
// as IDX serialization would; the test split stays clean.
TaskDataset generate_poisoned_dataset(const AttackModel& attack, const TaskDataset& task_n);

TaskDataset uniform_noise_baseline(const TaskDataset& task_n, double eps, uint64_t seed);

}  // namespace clp
