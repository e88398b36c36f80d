#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "mbl/runner.hpp"

using namespace mbl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mbl-test-runner-" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c;
  c.gen_spec.n_samples = 120;
  c.gen_spec.bias_channel = BiasChannel::vision;
  c.gen_spec.bias_strength = 0.5;
  c.base_epochs = 3;
  c.train.epochs = 1;
  c.probes_per_cell = 1;
  c.search.trials = 2;
  c.output_dir = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_kind(const std::vector<ReportRow>& rows, ProbeKind k) {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [&](const ReportRow& r) { return r.kind == k; }));
}

ReportRow row(std::string setting, std::string method, double ra_m, double ra_f) {
  const std::size_t n = 100;
  return {std::move(setting), std::move(method), ProbeKind::oo,
          metrics_from_counts(static_cast<std::size_t>(ra_m * n + 0.5), n, static_cast<std::size_t>(ra_f * n + 0.5), n),
          1};
}

struct Bar {
  std::string setting;
  double x, y, height;
};

std::vector<Bar> bars_of(const std::string& svg) {
  static const std::regex re(
      R"re(<rect class="bar" data-setting="([a-z_]+)" x="([0-9.]+)" y="([0-9.]+)" width="[0-9.]+" height="([0-9.]+)")re");
  std::vector<Bar> out;
  for (std::sregex_iterator it(svg.begin(), svg.end(), re), end; it != end; ++it) {
    out.push_back({(*it)[1], std::stod((*it)[2]), std::stod((*it)[3]), std::stod((*it)[4])});
  }
  return out;
}

}  // namespace

TEST(RunExperiment, CountsRowsPerKind) {
  auto c = small_config(scratch("count"));
  c.methods = {Method::cda};
  c.settings = {FreezeSetting::raw, FreezeSetting::vision_only};
  const auto s = run_experiment(c);
  EXPECT_TRUE(s.failures.empty());
  EXPECT_EQ(count_kind(s.rows, ProbeKind::oo), 2u);
  EXPECT_EQ(count_kind(s.rows, ProbeKind::op), 2u);
  EXPECT_EQ(read_report_file((s.dir / "report.jsonl").string()).size(), 4u);
  EXPECT_TRUE(fs::exists(s.dir / "config.json"));
  EXPECT_TRUE(fs::exists(s.dir / "seed-1" / "base.mbl"));
  EXPECT_TRUE(fs::exists(s.dir / "seed-1" / "cda-vision_only.mbl"));
  EXPECT_TRUE(fs::exists(s.dir / "charts" / "gg-OO-cda.svg"));
  fs::remove_all(c.output_dir);
}

TEST(RunExperiment, FullMatrixCoverage) {
  auto c = small_config(scratch("matrix"));
  c.seeds = {1, 2};
  const auto s = run_experiment(c);
  EXPECT_TRUE(s.failures.empty());
  // Per seed and kind: one baseline row plus every (method, non-raw setting).
  EXPECT_EQ(s.rows.size(), 2u * 2u * (1u + 3u * 3u));
  EXPECT_TRUE(fs::exists(s.dir / "seed-2" / "trace-text_only.jsonl"));
  fs::remove_all(c.output_dir);
}

TEST(RunExperiment, RerunIsBitwiseIdentical) {
  auto c = small_config(scratch("rerun"));
  c.methods = {Method::task_vector, Method::daudos};
  c.settings = {FreezeSetting::raw, FreezeSetting::text_only};
  const auto first = run_experiment(c);
  const auto report = slurp(first.dir / "report.jsonl");
  const auto table = slurp(first.dir / "report.md");
  const auto chart = slurp(first.dir / "charts" / "gg-OP-daudos.svg");
  const auto ckpt = slurp(first.dir / "seed-1" / "task_vector-text_only.mbl");
  const auto second = run_experiment(c);
  EXPECT_EQ(first.dir, second.dir);
  EXPECT_EQ(slurp(second.dir / "report.jsonl"), report);
  EXPECT_EQ(slurp(second.dir / "report.md"), table);
  EXPECT_EQ(slurp(second.dir / "charts" / "gg-OP-daudos.svg"), chart);
  EXPECT_EQ(slurp(second.dir / "seed-1" / "task_vector-text_only.mbl"), ckpt);
  fs::remove_all(c.output_dir);
}

TEST(RunExperiment, EmptySeedsCreateNothing) {
  auto c = small_config(scratch("empty"));
  c.seeds.clear();
  EXPECT_THROW(run_experiment(c), ValidationError);
  EXPECT_FALSE(fs::exists(c.output_dir));
}

TEST(RunExperiment, FailingCellsAreIsolated) {
  auto c = small_config(scratch("fail"));
  // Every sample labels stereotypical, so CDA and DAUDoS have no anti-stereotypical data.
  c.thresholds = {0, 5, 5, 0, 0};
  c.settings = {FreezeSetting::raw, FreezeSetting::both};
  const auto s = run_experiment(c);
  ASSERT_EQ(s.failures.size(), 2u);
  EXPECT_EQ(s.failures[0].method, "cda");
  EXPECT_EQ(s.failures[1].method, "daudos");
  EXPECT_EQ(count_kind(s.rows, ProbeKind::oo), 2u);
  const auto failures = slurp(s.dir / "failures.txt");
  EXPECT_NE(failures.find("cda/both"), std::string::npos);
  EXPECT_NE(failures.find("daudos/both"), std::string::npos);
  fs::remove_all(c.output_dir);
}

TEST(RunExperiment, CaptionScorerTaskVectorMarkedExtrapolation) {
  auto c = small_config(scratch("extrapolation"));
  c.archetype = Archetype::caption_scorer;
  c.methods = {Method::task_vector};
  c.settings = {FreezeSetting::raw, FreezeSetting::text_only};
  const auto s = run_experiment(c);
  EXPECT_NE(slurp(s.dir / "report.md").find("extrapolation"), std::string::npos);
  fs::remove_all(c.output_dir);
}

TEST(RenderReport, SingleRowOneBar) {
  const auto r = render_report({row("raw", "cda", 0.91, 0.97)});
  std::size_t lines = 0;
  for (char ch : r.table) lines += ch == '\n';
  EXPECT_EQ(lines, 3u);
  EXPECT_NE(r.table.find("| cda | raw | 1 | 0.9100 | 0.9700 | 0.9400 | 0.0600 | - | - | - | - |"), std::string::npos);
  ASSERT_EQ(r.charts.size(), 1u);
  EXPECT_EQ(r.charts[0].first, "gg-OO-cda.svg");
  EXPECT_EQ(bars_of(r.charts[0].second).size(), 1u);
}

TEST(RenderReport, BarsOrderedAndProportional) {
  const std::vector<ReportRow> rows = {row("vision_only", "cda", 0.90, 0.95), row("raw", "cda", 0.91, 0.97),
                                       row("text_only", "cda", 0.93, 0.93)};
  const auto r = render_report(rows, {FreezeSetting::raw, FreezeSetting::text_only, FreezeSetting::vision_only});
  ASSERT_EQ(r.charts.size(), 1u);
  const auto bars = bars_of(r.charts[0].second);
  ASSERT_EQ(bars.size(), 3u);
  EXPECT_EQ(bars[0].setting, "raw");
  EXPECT_EQ(bars[1].setting, "text_only");
  EXPECT_EQ(bars[2].setting, "vision_only");
  const double gg[3] = {0.06, 0.00, 0.05};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(bars[i].height, gg[i] * kChartScale, 0.005);
    EXPECT_NEAR(bars[i].y + bars[i].height, kChartTop + kChartScale, 0.01);
    if (i) { EXPECT_NEAR(bars[i].x - bars[i - 1].x, kBarWidth + kBarGap, 1e-9); }
  }
  EXPECT_NEAR(bars[0].height / bars[2].height, 0.06 / 0.05, 1e-3);
  EXPECT_EQ(render_report(rows, {FreezeSetting::raw, FreezeSetting::text_only, FreezeSetting::vision_only}).charts[0].second,
            r.charts[0].second);
}

TEST(RenderReport, BaselineFillsRawBarAndLeadsTable) {
  const std::vector<ReportRow> rows = {row("both", "daudos", 0.80, 0.90), row("raw", "none", 0.70, 0.90)};
  const auto r = render_report(rows);
  EXPECT_LT(r.table.find("| none |"), r.table.find("| daudos |"));
  ASSERT_EQ(r.charts.size(), 1u);
  const auto bars = bars_of(r.charts[0].second);
  ASSERT_EQ(bars.size(), 2u);
  EXPECT_EQ(bars[0].setting, "raw");
  EXPECT_NEAR(bars[0].height, 0.2 * kChartScale, 0.005);
}

TEST(RenderReport, SeedAveraging) {
  auto a = row("raw", "cda", 0.80, 1.00);
  auto b = row("raw", "cda", 0.90, 0.90);
  b.seed = 2;
  const auto r = render_report({a, b});
  EXPECT_NE(r.table.find("| cda | raw | 2 | 0.8500 | 0.9500 | 0.9000 | 0.1000 |"), std::string::npos);
}

TEST(RenderReport, EmptyAndMalformedInputsRejected) {
  EXPECT_THROW(render_report({}), PreconditionError);
  const auto path = scratch("malformed.jsonl");
  {
    std::ofstream out(path);
    out << serialize_row(row("raw", "cda", 0.5, 0.5)) << "\n{\"setting\":\"raw\"\n";
  }
  try {
    read_report_file(path.string());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  fs::remove(path);
}
