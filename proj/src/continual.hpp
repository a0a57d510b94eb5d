#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "model.hpp"

namespace clp {

enum class Method { sgd, ewc, si };

Method parse_method(const std::string& s);
std::string method_name(Method m);

// Per-parameter importance weights with the anchor they were consolidated
// at. One map per consolidated task; the penalty sums over all of them.
struct ImportanceMap {
  ParamVector weights;  // >= 0 elementwise, same layout as the model params
  ParamVector anchor;
  double strength = 0.0;
};

// sum over maps of strength/2 * sum_i weights_i * (theta_i - anchor_i)^2
Tensor penalty(std::span<const ImportanceMap> maps, std::span<const Tensor> theta);
double penalty_value(std::span<const ImportanceMap> maps, const ParamVector& theta);
// analytic d(penalty)/d(theta): strength * weights o (theta - anchor)
ParamVector penalty_grad(std::span<const ImportanceMap> maps, const ParamVector& theta);

// Diagonal empirical Fisher at the true labels: mean over sampled inputs of
// the squared log-likelihood gradient. Anchor = current parameters.
ImportanceMap ewc_estimate_fisher(const Classifier& c, const LabeledImages& data,
                                  int64_t n_samples, uint64_t seed, double strength);

// Path-integral importance: omega accumulates -grad_ce * delta per step and
// consolidates to omega / (total_move^2 + damping).
struct SiAccumulator {
  ParamVector omega;
  ParamVector theta_start;
  double damping = 0.1;

  static SiAccumulator start(const ParamVector& theta_now, double damping);
  void accumulate(const ParamVector& grad_ce, const ParamVector& delta);
  ImportanceMap consolidate(const ParamVector& theta_end, double strength) const;
};

struct TrainHyper {
  int epochs = 5;
  int64_t batch_size = 256;
  double lr = 0.1;
  double ewc_lambda = 100.0;
  int64_t fisher_samples = 2000;
  double si_c = 0.5;
  double si_damping = 0.1;
};

// One SGD step on cross-entropy plus the importance penalty. Returns the
// loss value; optionally exposes the total gradient (for SI bookkeeping).
double train_step(Classifier& c, const Tensor& x, const std::vector<int32_t>& y,
                  std::span<const ImportanceMap> maps, double lr,
                  ParamVector* grad_total_out = nullptr);

struct TrainResult {
  std::optional<ImportanceMap> new_map;
  // per-epoch accuracies over eval_sets (row per epoch)
  std::vector<std::vector<double>> epoch_eval;
};

// Sequential-task trainer: mini-batch SGD on cross_entropy + penalty for
// hyper.epochs; EWC estimates the Fisher afterwards, SI accumulates during
// and consolidates afterwards, the SGD baseline adds nothing.
TrainResult train_task(Classifier& c, const TaskDataset& task, Method method,
                       std::span<const ImportanceMap> maps, const TrainHyper& hyper,
                       uint64_t seed, std::span<const LabeledImages> eval_sets = {});

}  // namespace clp
