#include "attack.hpp"

#include <cmath>

#include "rng.hpp"

namespace clp {

void AttackSettings::validate(int n_tasks) const {
  if (new_task_index < 2 || new_task_index > n_tasks)
    fail(ErrorKind::invalid_argument,
         "attack: new task index " + std::to_string(new_task_index) + " outside [2, " +
             std::to_string(n_tasks) + "]");
  if (target_task == new_task_index)
    fail(ErrorKind::invalid_argument, "attack: target task must differ from the new task");
  if (target_task < 1 || target_task >= new_task_index)
    fail(ErrorKind::invalid_argument, "attack: target task " + std::to_string(target_task) +
                                          " outside [1, " + std::to_string(new_task_index) + ")");
  if (eps <= 0.0) fail(ErrorKind::invalid_argument, "attack: eps must be > 0");
  if (temperature <= 0.0) fail(ErrorKind::invalid_argument, "attack: temperature must be > 0");
  if (epochs < 0 || snapshot_stride < 1 || batch_size < 1 || victim_epochs < 1)
    fail(ErrorKind::invalid_argument, "attack: invalid loop settings");
}

namespace {

// batched detached attack-model inference over a full image set
Tensor attack_noise_all(const AttackModel& attack, const Tensor& images, int64_t batch) {
  NoRecordGuard guard;
  Graph unused;
  std::vector<Tensor> p = attack.params().tensors();
  int64_t n = images.dim(0);
  int64_t px = images.size() / n;
  Tensor out(images.shape());
  for (int64_t start = 0; start < n; start += batch) {
    int64_t end = std::min(start + batch, n);
    Tensor x(Shape{end - start, 1, images.dim(2), images.dim(3)},
             std::vector<double>(images.data() + start * px, images.data() + end * px));
    Tensor noise = attack.forward(unused, p, x);
    std::copy(noise.data(), noise.data() + noise.size(), out.data() + start * px);
  }
  return out;
}

}  // namespace

Trajectory record_trajectory(const Classifier& start, const AttackModel& attack,
                             const TaskDataset& task_n, std::span<const ImportanceMap> maps,
                             const AttackSettings& cfg, uint64_t seed) {
  // The attack model is fixed for the whole recording pass, so the poisoned
  // set is materialized once (unclipped: training-time poison keeps raw sums).
  LabeledImages poisoned;
  poisoned.labels = task_n.train.labels;
  {
    NoRecordGuard guard;
    Tensor noise = attack_noise_all(attack, task_n.train.images, cfg.batch_size);
    poisoned.images = add(task_n.train.images.detached(), noise);
  }

  Classifier temp = start.snapshot();
  BatchStream stream(poisoned, cfg.victim_batch, derive_seed(seed, "batches"), true);
  int64_t steps = stream.batches_per_epoch() * cfg.victim_epochs;

  Trajectory traj;
  for (int64_t s = 0; s < steps; ++s) {
    BatchStream::Batch batch = stream.next();
    if (s % cfg.snapshot_stride == 0)
      traj.snapshots.push_back({temp.params(), batch.indices, static_cast<int>(s)});
    double loss = train_step(temp, batch.x, batch.y, maps, cfg.victim_lr);
    if (!std::isfinite(loss))
      fail(ErrorKind::numeric,
           "non-finite loss while recording trajectory at step " + std::to_string(s));
  }
  BatchStream::Batch last = stream.next();
  traj.snapshots.push_back({temp.params(), last.indices, static_cast<int>(steps)});
  return traj;
}

Tensor attack_loss(Graph& g, const MlpSpec& victim_spec, std::span<const Tensor> theta_leaves,
                   const AttackModel& attack, std::span<const Tensor> xi_leaves,
                   const Tensor& x_new, const std::vector<int32_t>& y_new,
                   const Tensor& x_target, const std::vector<int32_t>& y_target,
                   std::span<const Tensor> kd_inputs, const ParamVector& theta_prev,
                   std::span<const ImportanceMap> maps, const AttackSettings& cfg) {
  // pseudo-update on the poisoned new-task batch
  Tensor noise = attack.forward(g, xi_leaves, x_new);
  Tensor x_poisoned = add(x_new.detached(), noise);
  Tensor inner = cross_entropy(mlp_forward(victim_spec, theta_leaves, x_poisoned), y_new);
  bool have_penalty = false;
  for (const auto& m : maps) have_penalty |= m.strength != 0.0;
  if (have_penalty) inner = add(inner, penalty(maps, theta_leaves));
  std::vector<Tensor> theta_prime =
      pseudo_update(g, theta_leaves, inner, cfg.inner_lr, !cfg.second_order);

  Tensor loss = cross_entropy(mlp_forward(victim_spec, theta_prime, x_target), y_target);

  if (cfg.kd_enabled && !kd_inputs.empty()) {
    std::vector<Tensor> teacher_probs;
    teacher_probs.reserve(kd_inputs.size());
    {
      NoRecordGuard guard;  // teacher outputs are constants
      std::vector<Tensor> prev = theta_prev.tensors();
      for (const Tensor& xk : kd_inputs)
        teacher_probs.push_back(
            softmax(scale(mlp_forward(victim_spec, prev, xk.detached()), 1.0 / cfg.temperature), 1));
    }
    for (size_t k = 0; k < kd_inputs.size(); ++k) {
      Tensor student = softmax(
          scale(mlp_forward(victim_spec, theta_prime, kd_inputs[k].detached()), 1.0 / cfg.temperature),
          1);
      Tensor kd = scale(kl_divergence(student, teacher_probs[k]),
                        cfg.alpha_kd * cfg.temperature * cfg.temperature);
      loss = sub(loss, kd);
    }
  }
  return loss;
}

namespace {

struct Adam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  int64_t t = 0;

  explicit Adam(double lr_, size_t n) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

}  // namespace

std::vector<int64_t> kd_task_ids(const AttackSettings& cfg) {
  std::vector<int64_t> ids;
  for (int i = 1; i < cfg.new_task_index; ++i)
    if (i != cfg.target_task) ids.push_back(i);
  return ids;
}

AttackTrainResult train_attack_model(const Classifier& victim_at_prev,
                                     const std::vector<TaskDataset>& tasks,
                                     std::span<const ImportanceMap> maps,
                                     const AttackSettings& cfg, uint64_t seed) {
  cfg.validate(static_cast<int>(tasks.size()));
  const TaskDataset& task_n = tasks[static_cast<size_t>(cfg.new_task_index - 1)];
  const TaskDataset& task_t = tasks[static_cast<size_t>(cfg.target_task - 1)];

  AttackTrainResult result;
  result.model = AttackModel::create(cfg.eps, derive_seed(seed, "attack-init"));
  AttackModel& attack = result.model;
  Adam opt(cfg.lr_xi, static_cast<size_t>(attack.params().size()));

  std::vector<int64_t> kd_ids = kd_task_ids(cfg);
  std::vector<double> grad_flat(static_cast<size_t>(attack.params().size()));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::string etag = std::to_string(epoch);
    Trajectory traj = record_trajectory(victim_at_prev, attack, task_n, maps, cfg,
                                        derive_seed(seed, "traj:" + etag));

    BatchStream target_stream(task_t.train, cfg.batch_size,
                              derive_seed(seed, "target:" + etag), true);
    std::vector<BatchStream> kd_streams;
    kd_streams.reserve(kd_ids.size());
    for (int64_t id : kd_ids) {
      int64_t avail = tasks[static_cast<size_t>(id - 1)].train.count();
      LabeledImages sub =
          sample_kd_subset(tasks[static_cast<size_t>(id - 1)], std::min(cfg.kd_subset, avail),
                           derive_seed(seed, "kd:" + etag + ":" + std::to_string(id)));
      kd_streams.emplace_back(sub, cfg.batch_size,
                              derive_seed(seed, "kdbatch:" + etag + ":" + std::to_string(id)),
                              true);
    }

    double loss_sum = 0.0;
    for (const TrajectorySnapshot& snap : traj.snapshots) {
      Graph g;
      std::vector<Tensor> theta_leaves = attach(g, snap.theta);
      std::vector<Tensor> xi_leaves = attach(g, attack.params());

      LabeledImages nb = gather_images(task_n.train, snap.batch_indices);
      BatchStream::Batch tb = target_stream.next();
      std::vector<Tensor> kd_inputs;
      kd_inputs.reserve(kd_streams.size());
      for (auto& ks : kd_streams) kd_inputs.push_back(ks.next().x);

      Tensor loss = attack_loss(g, victim_at_prev.spec(), theta_leaves, attack, xi_leaves,
                                nb.images, nb.labels, tb.x, tb.y, kd_inputs,
                                victim_at_prev.params(), maps, cfg);
      if (!std::isfinite(loss.item()))
        fail(ErrorKind::numeric, "non-finite attack loss at epoch " + std::to_string(epoch + 1) +
                                     " step " + std::to_string(snap.step));
      loss_sum += loss.item();

      std::vector<Tensor> grads = g.gradient(loss, xi_leaves);
      int64_t off = 0;
      for (const Tensor& gt : grads) {
        // ascent: Adam minimizes the negated objective
        const double* gp = gt.data();
        for (int64_t j = 0; j < gt.size(); ++j) grad_flat[static_cast<size_t>(off + j)] = -gp[j];
        off += gt.size();
      }
      opt.step(attack.params().flat(), grad_flat);
    }
    result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(traj.snapshots.size()));
  }
  return result;
}

TaskDataset generate_poisoned_dataset(const AttackModel& attack, const TaskDataset& task_n) {
  TaskDataset out = task_n;
  Tensor noise = attack_noise_all(attack, task_n.train.images, 256);
  Tensor poisoned = apply_poison(task_n.train.images, noise);
  int64_t n = poisoned.dim(0);
  out.train.images = dequantize_images(quantize_images(poisoned), n, poisoned.dim(2), poisoned.dim(3));
  out.descriptor.kind = "poisoned";
  out.descriptor.target_task = 0;  // caller stamps the target
  out.descriptor.eps = attack.eps();
  return out;
}

TaskDataset uniform_noise_baseline(const TaskDataset& task_n, double eps, uint64_t seed) {
  if (eps < 0.0) fail(ErrorKind::invalid_argument, "noise baseline: eps must be >= 0");
  TaskDataset out = task_n;
  Tensor noise(task_n.train.images.shape());
  Rng rng(seed);
  double* p = noise.data();
  for (int64_t i = 0; i < noise.size(); ++i) p[i] = rng.uniform(-eps, eps);
  Tensor poisoned = apply_poison(task_n.train.images, noise);
  int64_t n = poisoned.dim(0);
  out.train.images = dequantize_images(quantize_images(poisoned), n, poisoned.dim(2), poisoned.dim(3));
  out.descriptor.kind = "noise";
  out.descriptor.eps = eps;
  return out;
}

}  // namespace clp
