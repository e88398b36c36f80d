#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mbl/checkpoint.hpp"
#include "mbl/config.hpp"
#include "mbl/debias.hpp"
#include "mbl/eval.hpp"

namespace mbl {

// ---------------------------------------------------------------------------
// Output layout
//
//   <output_dir>/<digest>/config.json
//   <output_dir>/<digest>/report.jsonl          every row, seed-major
//   <output_dir>/<digest>/report.md             seed-averaged table
//   <output_dir>/<digest>/failures.txt          one line per failed cell
//   <output_dir>/<digest>/charts/gg-<KIND>-<method>.svg
//   <output_dir>/<digest>/seed-<s>/dataset.jsonl
//   <output_dir>/<digest>/seed-<s>/base.mbl
//   <output_dir>/<digest>/seed-<s>/<method>-<setting>.jsonl
//   <output_dir>/<digest>/seed-<s>/<method>-<setting>.mbl
//   <output_dir>/<digest>/seed-<s>/trace-<setting>.jsonl   task vector search
// ---------------------------------------------------------------------------

namespace fs = std::filesystem;

inline fs::path run_dir(const ExperimentConfig& c) { return fs::path(c.output_dir) / config_digest(c); }

inline fs::path seed_dir(const ExperimentConfig& c, std::uint64_t seed) {
  return run_dir(c) / ("seed-" + std::to_string(seed));
}

inline std::string cell_stem(std::string_view method, FreezeSetting setting) {
  return std::string(method) + "-" + std::string(to_string(setting));
}

/// Probe sets: evaluation and task-vector search never share probes.
inline std::uint64_t eval_probe_seed(std::uint64_t seed) { return seed; }
inline std::uint64_t search_probe_seed(std::uint64_t seed) { return seed ^ 0x5EA2C4A11DULL; }

struct CellFailure {
  std::uint64_t seed = 0;
  std::string method;
  std::string setting;
  std::string error;
};

struct RunSummary {
  fs::path dir;
  std::vector<ReportRow> rows;
  std::vector<CellFailure> failures;
  std::size_t pruned_unknown = 0;
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string rows_text(const std::vector<ReportRow>& rows) {
  std::string s;
  for (const auto& r : rows) s += serialize_row(r) + "\n";
  return s;
}

inline TrainConfig finetune_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t = c.train;
  t.seed = seed;
  return t;
}

/// One debiased model for a (method, setting) cell.
inline Model debias_cell(const ExperimentConfig& c, Method method, FreezeSetting setting, const Model& base,
                         const std::vector<Sample>& data, std::uint64_t seed, const fs::path& dir) {
  const TrainConfig cfg = finetune_config(c, seed);
  switch (method) {
    case Method::cda: return run_cda(base, data, setting, cfg).model;
    case Method::daudos:
      return run_daudos(base, data, daudos_k(data.size(), c.daudos_k_fraction), setting, cfg, c.daudos).model;
    case Method::task_vector: {
      std::vector<Sample> stereo;
      for (const auto& s : data) {
        if (s.stereotypical) stereo.push_back(s);
      }
      const Model ft = finetune(base, stereo, setting, cfg).model;
      const TaskVector tv = compute_task_vector(base.params, ft.params);
      SearchConfig sc = c.search;
      sc.seed = seed;
      const FreezeMask mask = freeze_mask(setting);
      const auto result = search_hyperparams(base, tv, build_probes(search_probe_seed(seed), c.probes_per_cell), sc, mask);
      write_search_trace(result.trace, (dir / ("trace-" + std::string(to_string(setting)) + ".jsonl")).string());
      Model out = base;
      out.params = apply_task_vector(base.params, tv, result.best, mask);
      return out;
    }
  }
  throw PreconditionError("unknown method");
}

}  // namespace detail

struct RenderedReport {
  std::string table;
  /// (file name, SVG text), ordered by kind then method.
  std::vector<std::pair<std::string, std::string>> charts;
};

inline RenderedReport render_report(const std::vector<ReportRow>& rows,
                                    const std::vector<FreezeSetting>& setting_order = {kAllSettings.begin(),
                                                                                       kAllSettings.end()});

/// Runs the full matrix. Validation happens before anything touches disk;
/// a failing cell is recorded and the run moves on.
inline RunSummary run_experiment(const ExperimentConfig& c, std::ostream* log = nullptr) {
  c.validate();
  RunSummary summary;
  summary.dir = run_dir(c);
  fs::create_directories(summary.dir / "charts");
  detail::write_text(summary.dir / "config.json", config_to_json(c).dump(2) + "\n");

  for (const std::uint64_t seed : c.seeds) {
    const fs::path dir = seed_dir(c, seed);
    fs::create_directories(dir);
    GenSpec g = c.gen_spec;
    g.seed = seed;
    std::vector<Sample> data = generate_dataset(g);
    const std::size_t pruned = annotate_dataset(data, c.thresholds);
    summary.pruned_unknown += pruned;
    write_dataset(data, (dir / "dataset.jsonl").string());

    TrainConfig base_cfg = detail::finetune_config(c, seed);
    base_cfg.epochs = c.base_epochs;
    const Model base = train_base(c.archetype, data, seed, base_cfg).model;
    save_model(base, (dir / "base.mbl").string());
    const auto probes = build_probes(eval_probe_seed(seed), c.probes_per_cell);

    auto emit = [&](const Model& m, std::string_view method, FreezeSetting setting) {
      const auto rows = report_rows(evaluate_model(m, probes), to_string(setting), method, seed);
      detail::write_text(dir / (cell_stem(method, setting) + ".jsonl"), detail::rows_text(rows));
      summary.rows.insert(summary.rows.end(), rows.begin(), rows.end());
    };
    emit(base, kBaselineMethod, FreezeSetting::raw);
    if (log) *log << "seed " << seed << ": base model trained on " << data.size() << " samples\n";

    for (const Method method : c.methods) {
      for (const FreezeSetting setting : c.settings) {
        if (setting == FreezeSetting::raw) continue;
        try {
          const Model m = detail::debias_cell(c, method, setting, base, data, seed, dir);
          save_model(m, (dir / (cell_stem(to_string(method), setting) + ".mbl")).string());
          emit(m, to_string(method), setting);
          if (log) *log << "seed " << seed << ": " << cell_stem(to_string(method), setting) << " done\n";
        } catch (const Error& e) {
          summary.failures.push_back({seed, std::string(to_string(method)), std::string(to_string(setting)), e.what()});
          if (log) *log << "seed " << seed << ": " << cell_stem(to_string(method), setting) << " FAILED: " << e.what() << "\n";
        }
      }
    }
  }

  detail::write_text(summary.dir / "report.jsonl", detail::rows_text(summary.rows));
  std::string failures;
  for (const auto& f : summary.failures) {
    failures += "seed " + std::to_string(f.seed) + " " + f.method + "/" + f.setting + ": " + f.error + "\n";
  }
  detail::write_text(summary.dir / "failures.txt", failures);
  RenderedReport rendered = render_report(summary.rows, c.settings);
  if (c.archetype == Archetype::caption_scorer &&
      std::find(c.methods.begin(), c.methods.end(), Method::task_vector) != c.methods.end()) {
    rendered.table += "\nTask-vector rows for the caption scorer are an extrapolation beyond the reported experiments.\n";
  }
  detail::write_text(summary.dir / "report.md", rendered.table);
  for (const auto& [name, svg] : rendered.charts) detail::write_text(summary.dir / "charts" / name, svg);
  return summary;
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

inline std::vector<ReportRow> read_report_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<ReportRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(parse_row(line, line_no));
    } catch (const ParseError& e) {
      throw ParseError(path + ": " + e.what(), line_no);
    }
  }
  return rows;
}

/// Pixels per unit of GG in every chart.
inline constexpr double kChartScale = 200.0;
inline constexpr double kBarWidth = 48.0;
inline constexpr double kBarGap = 24.0;
inline constexpr double kChartLeft = 40.0;
inline constexpr double kChartTop = 24.0;

namespace detail {

struct Aggregate {
  double ra_m = 0, ra_f = 0, ra_avg = 0, gg = 0;
  std::size_t n_m = 0, n_f = 0, seeds = 0;

  void add(const MetricCell& c) {
    ra_m += c.ra_m;
    ra_f += c.ra_f;
    ra_avg += c.ra_avg;
    gg += c.gg;
    n_m += c.n_m;
    n_f += c.n_f;
    ++seeds;
  }
  double mean(double v) const { return v / static_cast<double>(seeds); }
};

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string render_chart(ProbeKind kind, std::string_view method,
                                const std::vector<std::pair<FreezeSetting, double>>& bars) {
  const double width = 2 * kChartLeft + static_cast<double>(bars.size()) * (kBarWidth + kBarGap);
  const double base_y = kChartTop + kChartScale;
  const double height = base_y + 40.0;
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt2(width) + "\" height=\"" + fmt2(height) +
       "\" viewBox=\"0 0 " + fmt2(width) + " " + fmt2(height) + "\">\n";
  s += "<title>GG " + std::string(to_string(kind)) + " " + std::string(method) + "</title>\n";
  s += "<text x=\"" + fmt2(kChartLeft) + "\" y=\"16.00\" font-size=\"12\">GG, " + std::string(to_string(kind)) + ", " +
       std::string(method) + "</text>\n";
  s += "<line x1=\"" + fmt2(kChartLeft) + "\" y1=\"" + fmt2(base_y) + "\" x2=\"" + fmt2(width - kChartLeft / 2) +
       "\" y2=\"" + fmt2(base_y) + "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& [setting, gg] = bars[i];
    const double x = kChartLeft + kBarGap / 2 + static_cast<double>(i) * (kBarWidth + kBarGap);
    const double h = gg * kChartScale;
    s += "<rect class=\"bar\" data-setting=\"" + std::string(to_string(setting)) + "\" x=\"" + fmt2(x) + "\" y=\"" +
         fmt2(base_y - h) + "\" width=\"" + fmt2(kBarWidth) + "\" height=\"" + fmt2(h) + "\" fill=\"steelblue\"/>\n";
    s += "<text x=\"" + fmt2(x) + "\" y=\"" + fmt2(base_y - h - 4) + "\" font-size=\"10\">" + format_fixed4(gg) +
         "</text>\n";
    s += "<text x=\"" + fmt2(x) + "\" y=\"" + fmt2(base_y + 16) + "\" font-size=\"10\">" +
         std::string(to_string(setting)) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace detail

/// Seed-averaged table (OO and OP side by side) plus one GG bar chart per
/// (kind, method) with bars in `setting_order`. Baseline rows stand in for
/// the raw bar of every method chart.
inline RenderedReport render_report(const std::vector<ReportRow>& rows, const std::vector<FreezeSetting>& setting_order) {
  if (rows.empty()) throw PreconditionError("render_report needs at least one row");
  using Key = std::pair<std::string, FreezeSetting>;
  std::map<std::pair<Key, ProbeKind>, detail::Aggregate> agg;
  std::vector<std::string> methods;
  for (const auto& r : rows) {
    const FreezeSetting s = freeze_setting_from_string(r.setting);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    agg[{{r.method, s}, r.kind}].add(r.cell);
  }
  // Baseline first, then methods in order of appearance.
  std::stable_partition(methods.begin(), methods.end(), [](const std::string& m) { return m == kBaselineMethod; });
  std::vector<FreezeSetting> order = setting_order;
  for (const auto& [key, _] : agg) {
    if (std::find(order.begin(), order.end(), key.first.second) == order.end()) order.push_back(key.first.second);
  }

  RenderedReport out;
  std::string& t = out.table;
  t += "| Method | Setting | Seeds | OO RA_m | OO RA_f | OO RA_avg | OO GG | OP RA_m | OP RA_f | OP RA_avg | OP GG |\n";
  t += "|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& m : methods) {
    for (const FreezeSetting s : order) {
      const auto oo = agg.find({{m, s}, ProbeKind::oo});
      const auto op = agg.find({{m, s}, ProbeKind::op});
      if (oo == agg.end() && op == agg.end()) continue;
      const std::size_t seeds = (oo != agg.end() ? oo : op)->second.seeds;
      t += "| " + m + " | " + std::string(to_string(s)) + " | " + std::to_string(seeds) + " |";
      for (auto it : {oo, op}) {
        if (it == agg.end()) {
          t += " - | - | - | - |";
          continue;
        }
        const auto& a = it->second;
        for (double v : {a.ra_m, a.ra_f, a.ra_avg, a.gg}) t += " " + format_fixed4(a.mean(v)) + " |";
      }
      t += "\n";
    }
  }

  const bool only_baseline = methods.size() == 1 && methods.front() == kBaselineMethod;
  for (const ProbeKind kind : {ProbeKind::oo, ProbeKind::op}) {
    for (const auto& m : methods) {
      if (m == kBaselineMethod && !only_baseline) continue;
      std::vector<std::pair<FreezeSetting, double>> bars;
      for (const FreezeSetting s : order) {
        auto it = agg.find({{m, s}, kind});
        if (it == agg.end() && s == FreezeSetting::raw) it = agg.find({{std::string(kBaselineMethod), s}, kind});
        if (it != agg.end()) bars.emplace_back(s, it->second.mean(it->second.gg));
      }
      if (bars.empty()) continue;
      out.charts.emplace_back("gg-" + std::string(to_string(kind)) + "-" + m + ".svg",
                              detail::render_chart(kind, m, bars));
    }
  }
  return out;
}

}  // namespace mbl
