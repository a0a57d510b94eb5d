/* C interface to the continual-learning poisoning lab. All heavy state lives
 * behind opaque handles; every call returns a status code and leaves a
 * thread-local message retrievable via clp_last_error(). */
#ifndef CLPOISON_H
#define CLPOISON_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum clp_status {
  CLP_OK = 0,
  CLP_ERR_INVALID_ARGUMENT = 1,
  CLP_ERR_DATA = 2,
  CLP_ERR_IO = 3,
  CLP_ERR_NUMERIC = 4,
  CLP_ERR_INTERNAL = 5
} clp_status;

const char *clp_status_name(clp_status status);
const char *clp_last_error(void);
const char *clp_version(void);

/* Flat key=value experiment configuration (canonical form is hashed). */
typedef struct clp_config clp_config;

clp_config *clp_config_new(void);
void clp_config_free(clp_config *cfg);
clp_status clp_config_load(clp_config *cfg, const char *path);
clp_status clp_config_set(clp_config *cfg, const char *key, const char *value);
clp_status clp_config_get(const clp_config *cfg, const char *key, char *buf, size_t cap);
clp_status clp_config_hash(const clp_config *cfg, char *buf, size_t cap);

/* One finished run: the accuracy matrix R plus per-epoch traces. */
typedef struct clp_run clp_run;

/* Trains the configured task sequence; persists artifacts into run_dir
 * (pass NULL or "" to skip persistence). */
clp_status clp_run_experiment(const clp_config *cfg, const char *run_dir, clp_run **out);
clp_status clp_run_load(const char *results_json_path, clp_run **out);
clp_status clp_run_save(const clp_run *run, const char *results_json_path);
/* Reloads the checkpoints of a saved run and rebuilds R from the data. */
clp_status clp_eval_run_dir(const char *run_dir, const char *data_dir_or_null, clp_run **out);
void clp_run_free(clp_run *run);

int clp_run_num_tasks(const clp_run *run);
/* R_{trained_upto, eval_task}, tasks are 1-based */
clp_status clp_run_accuracy(const clp_run *run, int trained_upto, int eval_task, double *out);
clp_status clp_run_final_accuracy(const clp_run *run, int task, double *out);
clp_status clp_run_backward_transfer(const clp_run *run, int target_task, double *out);

/* Trains the attack model against the configured target task and emits the
 * poisoned IDX pair, sidecar metadata and checkpoints into out_dir. */
clp_status clp_emit_attack_artifacts(const clp_config *cfg, const char *out_dir);

/* final_accuracy.csv, combined results.json, curves.csv, curves.svg */
clp_status clp_emit_reports(const clp_run *const *runs, size_t n, const char *out_dir);

/* Full desk-scale grid (both benchmarks, all methods and variants, KD
 * ablation over several seeds); per-run directories plus combined reports. */
clp_status clp_reproduce(const clp_config *cfg, const char *out_dir);

/* Deterministic MNIST-shaped IDX corpus for environments without the real
 * dataset; pass n_train/n_test <= 0 for the standard 60000/10000. */
clp_status clp_write_synthetic_mnist(const char *dir, unsigned long long seed, long long n_train,
                                     long long n_test);

#ifdef __cplusplus
}
#endif

#endif /* CLPOISON_H */
