#include "config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace clp {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

const std::map<std::string, std::string>& ExperimentConfig::defaults() {
  static const std::map<std::string, std::string> d = {
      {"benchmark", "permuted"},   // permuted | split
      {"n_tasks", "5"},
      {"method", "ewc"},           // sgd | ewc | si
      {"variant", "plain"},        // plain | noise | attack
      {"target_task", "1"},
      {"seed", "7"},
      {"data_dir", "data"},
      {"out_dir", "out"},
      {"train_subsample", "0"},    // 0 = full
      {"test_subsample", "0"},
      {"epochs_per_task", "5"},
      {"batch_size", "256"},
      {"lr", "0.1"},
      {"ewc_lambda", "100"},
      {"fisher_samples", "2000"},
      {"si_c", "0.5"},
      {"si_damping", "0.1"},
      {"eps", "0.2"},
      {"attack_epochs", "10"},
      {"attack_lr", "0.0001"},
      {"attack_batch", "256"},
      {"alpha_kd", "1"},
      {"kd_temperature", "2"},
      {"kd_subset", "1024"},
      {"kd_enabled", "1"},
      {"snapshot_stride", "10"},
      {"inner_lr", "0"},           // 0 = reuse lr
      {"first_order", "0"},
      {"reproduce_seeds", "3"},
      {"jobs", "0"},               // 0 = hardware concurrency
  };
  return d;
}

ExperimentConfig::ExperimentConfig() : kv_(defaults()) {}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot open config " + path);
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::data, path + ":" + std::to_string(lineno) + ": expected key=value");
    cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key))
    fail(ErrorKind::invalid_argument, "unknown config key '" + key + "'");
  kv_[key] = value;
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) fail(ErrorKind::invalid_argument, "unknown config key '" + key + "'");
  return it->second;
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  for (const auto& [k, v] : kv_) os << k << '=' << v << '\n';
  return os.str();
}

std::string ExperimentConfig::hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : canonical()) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write config " + path);
  os << canonical();
}

int64_t ExperimentConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  long long r = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    fail(ErrorKind::invalid_argument, "config key '" + key + "': '" + v + "' is not an integer");
  return r;
}

double ExperimentConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  double r = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    fail(ErrorKind::invalid_argument, "config key '" + key + "': '" + v + "' is not a number");
  return r;
}

int ExperimentConfig::n_tasks() const { return static_cast<int>(get_int("n_tasks")); }
int ExperimentConfig::target_task() const { return static_cast<int>(get_int("target_task")); }
uint64_t ExperimentConfig::seed() const { return static_cast<uint64_t>(get_int("seed")); }
int64_t ExperimentConfig::train_subsample() const { return get_int("train_subsample"); }
int64_t ExperimentConfig::test_subsample() const { return get_int("test_subsample"); }
int ExperimentConfig::reproduce_seeds() const { return static_cast<int>(get_int("reproduce_seeds")); }
int ExperimentConfig::jobs() const { return static_cast<int>(get_int("jobs")); }
bool ExperimentConfig::first_order() const { return get_int("first_order") != 0; }
bool ExperimentConfig::kd_enabled() const { return get_int("kd_enabled") != 0; }

TrainHyper ExperimentConfig::train_hyper() const {
  TrainHyper h;
  h.epochs = static_cast<int>(get_int("epochs_per_task"));
  h.batch_size = get_int("batch_size");
  h.lr = get_double("lr");
  h.ewc_lambda = get_double("ewc_lambda");
  h.fisher_samples = get_int("fisher_samples");
  h.si_c = get_double("si_c");
  h.si_damping = get_double("si_damping");
  return h;
}

AttackSettings ExperimentConfig::attack_settings() const {
  AttackSettings a;
  a.target_task = target_task();
  a.new_task_index = n_tasks();
  a.eps = get_double("eps");
  a.epochs = static_cast<int>(get_int("attack_epochs"));
  a.lr_xi = get_double("attack_lr");
  a.batch_size = get_int("attack_batch");
  double inner = get_double("inner_lr");
  a.inner_lr = inner > 0.0 ? inner : get_double("lr");
  a.alpha_kd = get_double("alpha_kd");
  a.temperature = get_double("kd_temperature");
  a.kd_subset = get_int("kd_subset");
  a.snapshot_stride = static_cast<int>(get_int("snapshot_stride"));
  a.kd_enabled = kd_enabled();
  a.second_order = !first_order();
  a.victim_epochs = static_cast<int>(get_int("epochs_per_task"));
  a.victim_batch = get_int("batch_size");
  a.victim_lr = get_double("lr");
  return a;
}

void ExperimentConfig::validate() const {
  const std::string& b = get("benchmark");
  if (b != "permuted" && b != "split")
    fail(ErrorKind::invalid_argument, "benchmark must be 'permuted' or 'split', got '" + b + "'");
  if (n_tasks() < 1) fail(ErrorKind::invalid_argument, "n_tasks must be >= 1");
  if (b == "split" && n_tasks() != 5)
    fail(ErrorKind::invalid_argument, "split benchmark is defined for exactly 5 tasks");
  parse_method(get("method"));
  const std::string& v = get("variant");
  if (v != "plain" && v != "noise" && v != "attack")
    fail(ErrorKind::invalid_argument, "variant must be plain, noise or attack, got '" + v + "'");
  if (v == "attack") {
    if (n_tasks() < 2)
      fail(ErrorKind::invalid_argument, "variant=attack needs at least 2 tasks");
    if (target_task() < 1 || target_task() >= n_tasks())
      fail(ErrorKind::invalid_argument,
           "variant=attack requires 1 <= target_task < n_tasks, got target_task=" +
               get("target_task") + " with n_tasks=" + get("n_tasks"));
  }
  if (get_double("eps") <= 0.0) fail(ErrorKind::invalid_argument, "eps must be > 0");
  if (get_int("epochs_per_task") < 0)
    fail(ErrorKind::invalid_argument, "epochs_per_task must be >= 0");
}

}  // namespace clp
