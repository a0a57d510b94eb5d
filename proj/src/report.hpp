#pragma once

#include <span>
#include <string>

#include "experiment.hpp"

namespace clp {

// Writes final_accuracy.csv, combined results.json, curves.csv and
// curves.svg into out_dir. Outputs are byte-deterministic given the runs.
void emit_reports(std::span<const RunResult> runs, const std::string& out_dir);

}  // namespace clp
