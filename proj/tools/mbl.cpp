// mbl: command-line front end for the modality-targeted debiasing lab.

#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "mbl/mbl.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitPartial = 3;

std::uint64_t seed_or_env(std::uint64_t seed) {
  const char* env = std::getenv("MBL_SEED");
  if (env == nullptr || *env == '\0') return seed;
  mbl::ExperimentConfig tmp;
  mbl::apply_seed_override(tmp, env);
  return tmp.seeds.front();
}

std::vector<mbl::Sample> load_samples(const std::string& path) {
  auto r = mbl::read_dataset(path);
  if (r.pruned_unknown > 0) std::cerr << "pruned " << r.pruned_unknown << " unknown-gender rows\n";
  return std::move(r.samples);
}

struct TrainOpts {
  std::size_t epochs = 10;
  float lr = 0.05f;
  std::size_t batch = 32;
  std::uint64_t seed = 42;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Fine-tuning epochs")->capture_default_str();
    app->add_option("--lr", lr, "SGD learning rate")->capture_default_str();
    app->add_option("--batch-size", batch, "Minibatch size")->capture_default_str();
    app->add_option("--seed", seed, "Shuffle seed (MBL_SEED overrides)")->capture_default_str();
  }
  mbl::TrainConfig config() const {
    mbl::TrainConfig c{epochs, lr, batch, seed_or_env(seed)};
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbl: modality-targeted debiasing lab (CDA, task vectors, DAUDoS) with RA/GG evaluation"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic captioned-face dataset");
  mbl::GenSpec spec;
  std::string gen_out = "dataset.jsonl";
  std::string channel = "none";
  gen->add_option("--n", spec.n_samples, "Number of samples")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Generation seed (MBL_SEED overrides)")->capture_default_str();
  gen->add_option("--bias-channel", channel, "none | vision | text | both")->capture_default_str();
  gen->add_option("--bias-strength", spec.bias_strength, "Vision gender-signal magnitude when planted")
      ->capture_default_str();
  gen->add_option("--correlation", spec.gender_occupation_correlation, "Gender-occupation correlation")
      ->capture_default_str();
  gen->add_option("--noise", spec.noise_sigma, "Feature noise sigma")->capture_default_str();
  gen->add_option("-o,--out", gen_out, "Output dataset file")->capture_default_str();

  // annotate
  auto* ann = app.add_subcommand("annotate", "Re-derive gender and stereotype labels; prune unknown-gender rows");
  std::string ann_in, ann_out = "annotated.jsonl";
  mbl::StereotypeThresholds th;
  ann->add_option("-i,--in", ann_in, "Input dataset file")->required();
  ann->add_option("-o,--out", ann_out, "Output dataset file")->capture_default_str();
  ann->add_option("--male-min-beard", th.male_min_beard)->capture_default_str();
  ann->add_option("--male-max-bangs", th.male_max_bangs)->capture_default_str();
  ann->add_option("--female-max-beard", th.female_max_beard)->capture_default_str();
  ann->add_option("--female-min-bangs", th.female_min_bangs)->capture_default_str();
  ann->add_option("--female-min-smiling", th.female_min_smiling)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a base model from scratch");
  std::string train_data, train_out = "base.mbl", archetype = "dual_encoder";
  TrainOpts train_opts;
  train_opts.epochs = 60;
  train->add_option("-d,--data", train_data, "Annotated dataset file")->required();
  train->add_option("--archetype", archetype, "dual_encoder | caption_scorer")->capture_default_str();
  train_opts.add(train);
  train->add_option("-o,--out", train_out, "Output checkpoint")->capture_default_str();

  // shared by the debiasing subcommands
  std::string model_in, data_in, model_out = "debiased.mbl", setting = "both";
  auto add_debias_common = [&](CLI::App* sub) {
    sub->add_option("-m,--model", model_in, "Base checkpoint")->required();
    sub->add_option("-d,--data", data_in, "Annotated dataset file")->required();
    sub->add_option("--setting", setting, "raw | text_only | vision_only | both")->capture_default_str();
    sub->add_option("-o,--out", model_out, "Output checkpoint")->capture_default_str();
  };

  auto* cda = app.add_subcommand("cda", "Counterfactual data augmentation fine-tune");
  TrainOpts cda_opts;
  add_debias_common(cda);
  cda_opts.add(cda);

  auto* tv = app.add_subcommand("taskvector", "Task-vector subtraction learned from stereotypical samples");
  TrainOpts tv_opts;
  double alpha = 0.56, blend = 0.78, lambda_gap = 1.0;
  std::size_t search_trials = 0, tv_probes = 20;
  std::string trace_out;
  add_debias_common(tv);
  tv_opts.add(tv);
  tv->add_option("--alpha", alpha, "Scale alpha in [0, 1]")->capture_default_str();
  tv->add_option("--blend", blend, "Blend in [0, 1]")->capture_default_str();
  tv->add_option("--search-trials", search_trials, "Random-search trials; 0 uses --alpha/--blend")
      ->capture_default_str();
  tv->add_option("--lambda-gap", lambda_gap, "Gap weight in the search objective")->capture_default_str();
  tv->add_option("--probes-per-cell", tv_probes, "Search probes per grid cell")->capture_default_str();
  tv->add_option("--trace", trace_out, "Search trace output (JSONL)");

  auto* dd = app.add_subcommand("daudos", "Fine-tune on the K samples ranked by degree of stereotypicality");
  TrainOpts dd_opts;
  double k_fraction = 1.0 / 3.0;
  std::string polarity = "ascending", source = "vision";
  add_debias_common(dd);
  dd_opts.add(dd);
  dd->add_option("--k-fraction", k_fraction, "K = ceil(fraction * N)")->capture_default_str();
  dd->add_option("--dos-polarity", polarity, "ascending | descending")->capture_default_str();
  dd->add_option("--source", source, "Embedding for CAV and DoS: vision | text | fused")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on OO/OP probes");
  std::string eval_model, eval_out, eval_setting = "raw", eval_method = "none";
  std::uint64_t probe_seed = 1;
  std::size_t eval_probes = 20;
  ev->add_option("-m,--model", eval_model, "Checkpoint")->required();
  ev->add_option("--probe-seed", probe_seed, "Probe seed (MBL_SEED overrides)")->capture_default_str();
  ev->add_option("--probes-per-cell", eval_probes, "Probes per grid cell")->capture_default_str();
  ev->add_option("--setting", eval_setting, "Setting label for the report rows")->capture_default_str();
  ev->add_option("--method", eval_method, "Method label for the report rows")->capture_default_str();
  ev->add_option("-o,--out", eval_out, "Report file (JSONL); stdout when omitted");

  // run
  auto* run = app.add_subcommand("run", "Run the full experiment matrix from a YAML config");
  std::string config_path;
  run->add_option("config", config_path, "Experiment config (YAML)")->required();
  run->footer("Config defaults (absent keys keep these):\n" + mbl::config_to_json(mbl::ExperimentConfig{}).dump(2));

  // report
  auto* rep = app.add_subcommand("report", "Render a table and GG charts from report files");
  std::vector<std::string> report_files;
  std::string report_dir = "report";
  rep->add_option("files", report_files, "Report files (JSONL)")->required();
  rep->add_option("-o,--out-dir", report_dir, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) {
      spec.seed = seed_or_env(spec.seed);
      spec.bias_channel = mbl::bias_channel_from_string(channel);
      auto data = mbl::generate_dataset(spec);
      mbl::write_dataset(data, gen_out);
      std::cout << "wrote " << data.size() << " samples to " << gen_out << "\n";
    } else if (*ann) {
      auto read = mbl::read_dataset(ann_in);
      const std::size_t pruned = read.pruned_unknown + mbl::annotate_dataset(read.samples, th);
      mbl::write_dataset(read.samples, ann_out);
      std::cout << "kept " << read.samples.size() << " samples, pruned " << pruned << " unknown-gender rows, "
                << mbl::count_anti_stereotypical(read.samples) << " anti-stereotypical\n";
    } else if (*train) {
      const auto data = load_samples(train_data);
      const auto cfg = train_opts.config();
      const auto r = mbl::train_base(mbl::archetype_from_string(archetype), data, cfg.seed, cfg);
      mbl::save_model(r.model, train_out);
      std::cout << "final epoch loss " << mbl::format_float(r.epoch_losses.back()) << ", wrote " << train_out << "\n";
    } else if (*cda || *tv || *dd) {
      const auto base = mbl::load_model(model_in);
      const auto data = load_samples(data_in);
      const auto s = mbl::freeze_setting_from_string(setting);
      mbl::Model out;
      if (*cda) {
        out = mbl::run_cda(base, data, s, cda_opts.config()).model;
      } else if (*dd) {
        mbl::DaudosOptions opt{mbl::dos_polarity_from_string(polarity), mbl::embedding_source_from_string(source)};
        if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw mbl::ValidationError("--k-fraction must lie in (0, 1]");
        const std::size_t k = mbl::daudos_k(data.size(), k_fraction);
        const auto r = mbl::run_daudos(base, data, k, s, dd_opts.config(), opt);
        std::cout << "DAUDoS trained on " << r.training_size << " of " << data.size() << " samples\n";
        out = r.model;
      } else {
        const auto cfg = tv_opts.config();
        std::vector<mbl::Sample> stereo;
        for (const auto& x : data) {
          if (x.stereotypical) stereo.push_back(x);
        }
        const auto ft = mbl::finetune(base, stereo, s, cfg).model;
        const auto delta = mbl::compute_task_vector(base.params, ft.params);
        mbl::TaskVectorParams p{alpha, blend};
        if (search_trials > 0) {
          mbl::SearchConfig sc{search_trials, lambda_gap, cfg.seed};
          const auto probes = mbl::build_probes(mbl::search_probe_seed(cfg.seed), tv_probes);
          const auto r = mbl::search_hyperparams(base, delta, probes, sc, mbl::freeze_mask(s));
          if (!trace_out.empty()) mbl::write_search_trace(r.trace, trace_out);
          p = r.best;
          std::cout << "search best alpha " << mbl::format_float(p.alpha) << " blend " << mbl::format_float(p.blend)
                    << " loss " << mbl::format_float(r.best_loss) << "\n";
        }
        out = base;
        out.params = mbl::apply_task_vector(base.params, delta, p, mbl::freeze_mask(s));
      }
      mbl::save_model(out, model_out);
      std::cout << "wrote " << model_out << "\n";
    } else if (*ev) {
      const auto m = mbl::load_model(eval_model);
      const auto probes = mbl::build_probes(seed_or_env(probe_seed), eval_probes);
      const auto rows = mbl::report_rows(mbl::evaluate_model(m, probes), eval_setting, eval_method, seed_or_env(probe_seed));
      std::string text;
      for (const auto& r : rows) text += mbl::serialize_row(r) + "\n";
      if (eval_out.empty()) {
        std::cout << text;
      } else {
        mbl::detail::write_text(eval_out, text);
      }
    } else if (*run) {
      auto cfg = mbl::load_config(config_path);
      mbl::apply_seed_override(cfg, std::getenv("MBL_SEED"));
      cfg.validate();
      const auto summary = mbl::run_experiment(cfg, &std::cerr);
      std::cout << "wrote " << summary.rows.size() << " report rows to " << summary.dir.string() << "\n";
      if (!summary.failures.empty()) {
        std::cerr << summary.failures.size() << " cell(s) failed:\n";
        for (const auto& f : summary.failures) {
          std::cerr << "  seed " << f.seed << " " << f.method << "/" << f.setting << ": " << f.error << "\n";
        }
        return kExitPartial;
      }
    } else if (*rep) {
      std::vector<mbl::ReportRow> rows;
      for (const auto& f : report_files) {
        auto r = mbl::read_report_file(f);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      const auto rendered = mbl::render_report(rows);
      std::filesystem::create_directories(report_dir);
      mbl::detail::write_text(std::filesystem::path(report_dir) / "report.md", rendered.table);
      for (const auto& [name, svg] : rendered.charts) {
        mbl::detail::write_text(std::filesystem::path(report_dir) / name, svg);
      }
      std::cout << rendered.table;
    }
  } catch (const mbl::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const mbl::PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
