#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace clp {

// Images are [n,1,28,28] doubles in [0,1]; labels are class indices in [0,10).
struct LabeledImages {
  Tensor images;
  std::vector<int32_t> labels;

  int64_t count() const { return images.defined() ? images.dim(0) : 0; }
  void validate() const;
};

struct TaskDescriptor {
  std::string kind = "identity";        // identity | permuted | split | poisoned | noise
  std::vector<int64_t> permutation;     // pixel bijection for permuted tasks
  std::pair<int, int> digits{-1, -1};   // class pair for split tasks
  int target_task = 0;                  // poison metadata
  double eps = 0.0;
};

struct TaskDataset {
  int task_id = 0;  // 1-based
  LabeledImages train;
  LabeledImages test;
  TaskDescriptor descriptor;
};

// IDX ingestion (big-endian magic and dims, unsigned-byte payload).
// Pixels are scaled to [0,1] by /255.
LabeledImages load_mnist_idx(const std::string& images_path, const std::string& labels_path);
void write_mnist_idx(const std::string& images_path, const std::string& labels_path,
                     const LabeledImages& data);

// byte quantization used whenever images are materialized to IDX
std::vector<uint8_t> quantize_images(const Tensor& images);
Tensor dequantize_images(const std::vector<uint8_t>& bytes, int64_t n, int64_t h, int64_t w);

// output pixel i takes input pixel perm[i]
Tensor apply_permutation(const Tensor& images, const std::vector<int64_t>& perm);
std::vector<int64_t> invert_permutation(const std::vector<int64_t>& perm);

// Task 1 is the identity; tasks 2..n apply independent seeded pixel
// permutations to every train and test image.
std::vector<TaskDataset> make_permuted_tasks(const LabeledImages& train, const LabeledImages& test,
                                             int n_tasks, uint64_t seed);

// Five tasks over digit pairs (0,1),(2,3),(4,5),(6,7),(8,9); labels keep
// their original values.
std::vector<TaskDataset> make_split_tasks(const LabeledImages& train, const LabeledImages& test);

// deterministic sample without replacement from the task's train split
LabeledImages sample_kd_subset(const TaskDataset& task, int64_t n, uint64_t seed);

// seeded subset of a LabeledImages set (desk-scale switch); n == 0 keeps all
LabeledImages subsample(const LabeledImages& data, int64_t n, uint64_t seed);

LabeledImages gather_images(const LabeledImages& data, const std::vector<int64_t>& idx);

// Mini-batch iteration with a seeded shuffle per epoch; the final partial
// batch is kept.
class BatchStream {
 public:
  struct Batch {
    Tensor x;                      // [b,1,28,28]
    std::vector<int32_t> y;
    std::vector<int64_t> indices;  // positions within the source set
  };

  BatchStream(const LabeledImages& data, int64_t batch_size, uint64_t seed, bool shuffle);

  Batch next();
  int64_t batches_per_epoch() const { return batches_per_epoch_; }
  int64_t epoch() const { return epoch_; }

 private:
  void start_epoch();

  LabeledImages data_;
  int64_t batch_size_;
  bool shuffle_;
  Rng rng_;
  std::vector<int64_t> order_;
  int64_t cursor_ = 0;
  int64_t epoch_ = 0;
  int64_t batches_per_epoch_ = 0;
};

}  // namespace clp
