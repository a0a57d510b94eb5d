#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "attack.hpp"
#include "continual.hpp"

namespace clp {

// Flat key=value experiment configuration. The canonical form (sorted keys,
// LF lines) is what gets hashed, so a config hash identifies a run.
class ExperimentConfig {
 public:
  ExperimentConfig();  // defaults

  static ExperimentConfig from_file(const std::string& path);
  static const std::map<std::string, std::string>& defaults();

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string canonical() const;
  std::string hash() const;  // 16 hex chars (fnv-1a 64 of the canonical form)
  void save(const std::string& path) const;

  void validate() const;

  // typed views
  std::string benchmark() const { return get("benchmark"); }
  int n_tasks() const;
  Method method() const { return parse_method(get("method")); }
  std::string variant() const { return get("variant"); }
  int target_task() const;
  uint64_t seed() const;
  std::string data_dir() const { return get("data_dir"); }
  std::string out_dir() const { return get("out_dir"); }
  int64_t train_subsample() const;
  int64_t test_subsample() const;
  int reproduce_seeds() const;
  int jobs() const;
  bool first_order() const;
  bool kd_enabled() const;

  TrainHyper train_hyper() const;
  AttackSettings attack_settings() const;

  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace clp
