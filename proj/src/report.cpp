#include "report.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace clp {

namespace {

using nlohmann::json;

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write " + path);
  os << text;
  if (!os) fail(ErrorKind::io, "failed writing " + path);
}

json run_to_json(const RunResult& run) {
  json j;
  j["schema_version"] = 1;
  j["config"] = run.cfg.entries();
  j["config_hash"] = run.cfg.hash();
  j["n_tasks"] = run.n_tasks;
  j["R"] = run.R;
  j["final_accuracy"] = run.final_accuracy;
  j["poison_linf"] = run.poison_linf;
  json traces = json::array();
  for (const auto& t : run.traces)
    traces.push_back({{"task", t.task}, {"epoch", t.epoch}, {"accuracy", t.accuracy}});
  j["traces"] = traces;
  return j;
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

void append_run_chart(std::string& svg, const RunResult& run, int index, int top) {
  const int width = 640, height = 170, left = 50, plot_w = 560, plot_h = 120, pad_top = 30;
  std::string title = run.cfg.benchmark() + " / " + run.cfg.get("method") + " / " +
                      run.variant_label() + " / seed " + run.cfg.get("seed");
  (void)index;
  svg += "<g transform=\"translate(0," + std::to_string(top) + ")\">\n";
  svg += "<text x=\"" + std::to_string(left) + "\" y=\"18\" font-size=\"13\" "
         "font-family=\"sans-serif\">" + title + "</text>\n";
  svg += "<rect x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(pad_top) +
         "\" width=\"" + std::to_string(plot_w) + "\" height=\"" + std::to_string(plot_h) +
         "\" fill=\"none\" stroke=\"#888\"/>\n";
  size_t steps = run.traces.size();
  if (steps >= 1) {
    for (int task = 0; task < run.n_tasks; ++task) {
      std::string pts;
      for (size_t s = 0; s < steps; ++s) {
        double x = left + (steps == 1 ? 0.0
                                      : plot_w * static_cast<double>(s) /
                                            static_cast<double>(steps - 1));
        double y = pad_top + plot_h * (1.0 - run.traces[s].accuracy[static_cast<size_t>(task)]);
        pts += fmt(x, "%.2f");
        pts += ",";
        pts += fmt(y, "%.2f");
        pts += " ";
      }
      svg += "<polyline fill=\"none\" stroke=\"";
      svg += kPalette[task % 10];
      svg += "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
      svg += "<text x=\"" + std::to_string(left + plot_w + 6) + "\" y=\"" +
             std::to_string(pad_top + 12 + 14 * task) + "\" font-size=\"11\" fill=\"";
      svg += kPalette[task % 10];
      svg += "\" font-family=\"sans-serif\">T" + std::to_string(task + 1) + "</text>\n";
    }
  }
  svg += "<text x=\"8\" y=\"" + std::to_string(pad_top + 10) +
         "\" font-size=\"10\" font-family=\"sans-serif\">1.0</text>\n";
  svg += "<text x=\"8\" y=\"" + std::to_string(pad_top + plot_h) +
         "\" font-size=\"10\" font-family=\"sans-serif\">0.0</text>\n";
  svg += "</g>\n";
  (void)width;
  (void)height;
}

}  // namespace

void emit_reports(std::span<const RunResult> runs, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);

  // final_accuracy.csv
  std::string csv = "benchmark,method,variant,task,accuracy\n";
  for (const RunResult& run : runs)
    for (int task = 1; task <= run.n_tasks; ++task)
      csv += run.cfg.benchmark() + "," + run.cfg.get("method") + "," + run.variant_label() + "," +
             std::to_string(task) + "," +
             fmt(run.final_accuracy[static_cast<size_t>(task - 1)]) + "\n";
  write_text(out_dir + "/final_accuracy.csv", csv);

  // combined results.json
  json combined;
  combined["schema_version"] = 1;
  combined["runs"] = json::array();
  for (const RunResult& run : runs) combined["runs"].push_back(run_to_json(run));
  write_text(out_dir + "/results.json", combined.dump(2) + "\n");

  // curves.csv
  std::string curves = "benchmark,method,variant,train_task,epoch,eval_task,accuracy\n";
  for (const RunResult& run : runs)
    for (const auto& row : run.traces)
      for (int j = 0; j < run.n_tasks; ++j)
        curves += run.cfg.benchmark() + "," + run.cfg.get("method") + "," + run.variant_label() +
                  "," + std::to_string(row.task) + "," + std::to_string(row.epoch) + "," +
                  std::to_string(j + 1) + "," + fmt(row.accuracy[static_cast<size_t>(j)]) + "\n";
  write_text(out_dir + "/curves.csv", curves);

  // curves.svg
  int chart_h = 170;
  int total_h = std::max<int>(40, chart_h * static_cast<int>(runs.size()) + 20);
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"" +
                    std::to_string(total_h) + "\" viewBox=\"0 0 640 " + std::to_string(total_h) +
                    "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (size_t i = 0; i < runs.size(); ++i)
    append_run_chart(svg, runs[i], static_cast<int>(i), static_cast<int>(i) * chart_h + 10);
  svg += "</svg>\n";
  write_text(out_dir + "/curves.svg", svg);
}

}  // namespace clp
