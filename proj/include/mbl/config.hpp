#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "json.hpp"

#include "mbl/checkpoint.hpp"
#include "mbl/data.hpp"
#include "mbl/debias.hpp"

namespace mbl {

enum class Method { cda, task_vector, daudos };

inline constexpr std::array<Method, 3> kAllMethods = {Method::cda, Method::task_vector, Method::daudos};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::cda: return "cda";
    case Method::task_vector: return "task_vector";
    case Method::daudos: return "daudos";
  }
  return "?";
}

inline Method method_from_string(std::string_view s) {
  for (auto m : kAllMethods) {
    if (to_string(m) == s) return m;
  }
  throw ValidationError("unknown method '" + std::string(s) + "'");
}

/// Method label of the once-per-seed baseline rows.
inline constexpr std::string_view kBaselineMethod = "none";

/// Everything a `run` needs. GenSpec::seed is ignored here; each entry of
/// `seeds` drives generation, training and probes for its slice.
struct ExperimentConfig {
  Archetype archetype = Archetype::dual_encoder;
  GenSpec gen_spec;
  StereotypeThresholds thresholds;
  std::vector<Method> methods = {Method::cda, Method::task_vector, Method::daudos};
  std::vector<FreezeSetting> settings = {FreezeSetting::raw, FreezeSetting::text_only, FreezeSetting::vision_only,
                                         FreezeSetting::both};
  double daudos_k_fraction = 1.0 / 3.0;
  DaudosOptions daudos;
  SearchConfig search;
  std::size_t base_epochs = 60;
  TrainConfig train;
  std::size_t probes_per_cell = 20;
  std::vector<std::uint64_t> seeds = {1};
  std::string output_dir = "mbl-out";

  void validate() const {
    if (methods.empty()) throw ValidationError("config lists no methods");
    if (settings.empty()) throw ValidationError("config lists no settings");
    if (seeds.empty()) throw ValidationError("config lists no seeds");
    if (!(daudos_k_fraction > 0.0 && daudos_k_fraction <= 1.0)) {
      throw ValidationError("daudos_k_fraction must lie in (0, 1]");
    }
    if (base_epochs == 0) throw ValidationError("train.base_epochs must be at least 1");
    if (probes_per_cell == 0) throw ValidationError("probes.n_per_cell must be at least 1");
    if (output_dir.empty()) throw ValidationError("output_dir must not be empty");
    gen_spec.validate();
    search.validate();
    train.validate();
  }
};

/// Canonical JSON form; field order is fixed so it doubles as digest input.
inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["archetype"] = std::string(to_string(c.archetype));
  auto& methods = j["methods"] = nlohmann::ordered_json::array();
  for (auto m : c.methods) methods.push_back(std::string(to_string(m)));
  auto& settings = j["settings"] = nlohmann::ordered_json::array();
  for (auto s : c.settings) settings.push_back(std::string(to_string(s)));
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["daudos_k_fraction"] = format_float(c.daudos_k_fraction);
  j["generation"] = {{"n_samples", c.gen_spec.n_samples},
                     {"bias_channel", std::string(to_string(c.gen_spec.bias_channel))},
                     {"bias_strength", format_float(c.gen_spec.bias_strength)},
                     {"gender_occupation_correlation", format_float(c.gen_spec.gender_occupation_correlation)},
                     {"noise_sigma", format_float(c.gen_spec.noise_sigma)}};
  const auto& t = c.thresholds;
  j["annotation"] = {{"male_min_beard", t.male_min_beard},       {"male_max_bangs", t.male_max_bangs},
                     {"female_max_beard", t.female_max_beard},   {"female_min_bangs", t.female_min_bangs},
                     {"female_min_smiling", t.female_min_smiling}};
  j["train"] = {{"base_epochs", c.base_epochs},
                {"epochs", c.train.epochs},
                {"lr", format_float(c.train.lr)},
                {"batch_size", c.train.batch_size}};
  j["search"] = {{"trials", c.search.trials}, {"lambda_gap", format_float(c.search.lambda_gap)}};
  j["daudos"] = {{"polarity", std::string(to_string(c.daudos.polarity))},
                 {"source", std::string(to_string(c.daudos.source))}};
  j["probes"] = {{"n_per_cell", c.probes_per_cell}};
  return j;
}

/// 16 hex digits of FNV-1a over the canonical JSON form.
inline std::string config_digest(const ExperimentConfig& c) {
  const std::string text = config_to_json(c).dump();
  const auto h = detail::fnv1a(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

inline void reject_unknown_keys(const YAML::Node& node, std::string_view where,
                                std::initializer_list<std::string_view> allowed) {
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ValidationError("unknown key '" + key + "' in " + std::string(where));
  }
}

template <class T>
void read_key(const YAML::Node& node, const char* key, T& out) {
  if (const auto v = node[key]) out = v.as<T>();
}

}  // namespace detail

/// Parses the YAML config text. Absent keys keep their defaults; unknown keys
/// and out-of-range values raise ValidationError.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  try {
    const YAML::Node root = YAML::Load(text);
    if (!root || root.IsNull()) return c;
    if (!root.IsMap()) throw ValidationError("config must be a mapping");
    detail::reject_unknown_keys(root, "config",
                                {"archetype", "methods", "settings", "seeds", "output_dir", "daudos_k_fraction",
                                 "generation", "annotation", "train", "search", "daudos", "probes"});
    if (const auto v = root["archetype"]) c.archetype = archetype_from_string(v.as<std::string>());
    if (const auto v = root["methods"]) {
      c.methods.clear();
      for (const auto& m : v) c.methods.push_back(method_from_string(m.as<std::string>()));
    }
    if (const auto v = root["settings"]) {
      c.settings.clear();
      for (const auto& s : v) c.settings.push_back(freeze_setting_from_string(s.as<std::string>()));
    }
    if (const auto v = root["seeds"]) c.seeds = v.as<std::vector<std::uint64_t>>();
    detail::read_key(root, "output_dir", c.output_dir);
    detail::read_key(root, "daudos_k_fraction", c.daudos_k_fraction);
    if (const auto g = root["generation"]) {
      detail::reject_unknown_keys(g, "generation",
                                  {"n_samples", "bias_channel", "bias_strength", "gender_occupation_correlation",
                                   "noise_sigma"});
      detail::read_key(g, "n_samples", c.gen_spec.n_samples);
      if (const auto v = g["bias_channel"]) c.gen_spec.bias_channel = bias_channel_from_string(v.as<std::string>());
      detail::read_key(g, "bias_strength", c.gen_spec.bias_strength);
      detail::read_key(g, "gender_occupation_correlation", c.gen_spec.gender_occupation_correlation);
      detail::read_key(g, "noise_sigma", c.gen_spec.noise_sigma);
    }
    if (const auto a = root["annotation"]) {
      detail::reject_unknown_keys(a, "annotation",
                                  {"male_min_beard", "male_max_bangs", "female_max_beard", "female_min_bangs",
                                   "female_min_smiling"});
      detail::read_key(a, "male_min_beard", c.thresholds.male_min_beard);
      detail::read_key(a, "male_max_bangs", c.thresholds.male_max_bangs);
      detail::read_key(a, "female_max_beard", c.thresholds.female_max_beard);
      detail::read_key(a, "female_min_bangs", c.thresholds.female_min_bangs);
      detail::read_key(a, "female_min_smiling", c.thresholds.female_min_smiling);
    }
    if (const auto t = root["train"]) {
      detail::reject_unknown_keys(t, "train", {"base_epochs", "epochs", "lr", "batch_size"});
      detail::read_key(t, "base_epochs", c.base_epochs);
      detail::read_key(t, "epochs", c.train.epochs);
      detail::read_key(t, "lr", c.train.lr);
      detail::read_key(t, "batch_size", c.train.batch_size);
    }
    if (const auto s = root["search"]) {
      detail::reject_unknown_keys(s, "search", {"trials", "lambda_gap"});
      detail::read_key(s, "trials", c.search.trials);
      detail::read_key(s, "lambda_gap", c.search.lambda_gap);
    }
    if (const auto d = root["daudos"]) {
      detail::reject_unknown_keys(d, "daudos", {"polarity", "source"});
      if (const auto v = d["polarity"]) c.daudos.polarity = dos_polarity_from_string(v.as<std::string>());
      if (const auto v = d["source"]) c.daudos.source = embedding_source_from_string(v.as<std::string>());
    }
    if (const auto p = root["probes"]) {
      detail::reject_unknown_keys(p, "probes", {"n_per_cell"});
      detail::read_key(p, "n_per_cell", c.probes_per_cell);
    }
  } catch (const YAML::Exception& e) {
    throw ValidationError("config: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

/// MBL_SEED replaces the configured seed list with that single seed.
inline void apply_seed_override(ExperimentConfig& c, const char* value) {
  if (value == nullptr || *value == '\0') return;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(value, &end, 10);
  if (end == value || *end != '\0') throw ValidationError("MBL_SEED must be an unsigned integer");
  c.seeds = {static_cast<std::uint64_t>(s)};
}

}  // namespace mbl
