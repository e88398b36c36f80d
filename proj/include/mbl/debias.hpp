#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mbl/data.hpp"
#include "mbl/eval.hpp"
#include "mbl/model.hpp"
#include "mbl/nn.hpp"

namespace mbl {

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 10;
  float lr = 0.05f;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;

  void validate() const {
    if (epochs == 0) throw ValidationError("epochs must be at least 1");
    if (!(lr > 0.0f) || !std::isfinite(lr)) throw ValidationError("learning rate must be positive");
    if (batch_size < 2) throw ValidationError("batch_size must be at least 2");
  }
};

struct TrainResult {
  Model model;
  /// Mean training loss seen during each epoch.
  std::vector<double> epoch_losses;
  std::size_t training_size = 0;
};

namespace detail {

/// Contiguous batches over `order`; a trailing singleton joins the previous
/// batch because the contrastive loss needs two pairs.
inline std::vector<std::span<const Sample* const>> make_batches(const std::vector<const Sample*>& order,
                                                                std::size_t batch_size) {
  std::vector<std::span<const Sample* const>> out;
  std::size_t start = 0;
  while (start < order.size()) {
    std::size_t len = std::min(batch_size, order.size() - start);
    if (order.size() - start - len == 1) ++len;
    out.emplace_back(order.data() + start, len);
    start += len;
  }
  return out;
}

}  // namespace detail

/// Minibatch SGD on the archetype's objective. Frozen tags get no gradient
/// slot, so they leave training bitwise unchanged.
inline TrainResult finetune(const Model& model, const std::vector<Sample>& samples, FreezeSetting setting,
                            const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result{model, {}, samples.size()};
  if (setting == FreezeSetting::raw) return result;
  if (samples.empty()) throw EmptyDataError("fine-tuning needs at least one sample");
  if (model.archetype == Archetype::dual_encoder && samples.size() < 2) {
    throw PreconditionError("contrastive fine-tuning needs at least two samples");
  }
  const FreezeMask mask = freeze_mask(setting);
  std::vector<const Sample*> order;
  order.reserve(samples.size());
  for (const auto& s : samples) order.push_back(&s);

  Model& m = result.model;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = Rng::derive(cfg.seed, epoch + 1);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double weighted = 0.0;
    for (auto batch : detail::make_batches(order, cfg.batch_size)) {
      GradBuffer grads(m.params, mask);
      const double loss = model_loss<float>(m, batch, &grads);
      if (!std::isfinite(loss)) throw NumericError("training loss diverged in epoch " + std::to_string(epoch + 1));
      weighted += loss * static_cast<double>(batch.size());
      sgd_apply(m.params, grads, cfg.lr);
    }
    result.epoch_losses.push_back(weighted / static_cast<double>(order.size()));
  }
  return result;
}

/// A base model trained from scratch with every tag trainable.
inline TrainResult train_base(Archetype archetype, const std::vector<Sample>& samples, std::uint64_t seed,
                              const TrainConfig& cfg) {
  return finetune(make_model(archetype, seed), samples, FreezeSetting::both, cfg);
}

// ---------------------------------------------------------------------------
// Counterfactual data augmentation
// ---------------------------------------------------------------------------

/// Stereotypical samples get gender-swapped captions (the image is kept);
/// anti-stereotypical samples pass through. Order follows the input.
inline std::vector<Sample> build_cda_training_set(const std::vector<Sample>& dataset) {
  std::vector<Sample> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) {
    Sample t = s;
    if (s.stereotypical) {
      t.caption = cda_swap(s.caption);
      t.gender = opposite(s.gender);
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline std::size_t count_anti_stereotypical(const std::vector<Sample>& dataset) {
  return static_cast<std::size_t>(
      std::count_if(dataset.begin(), dataset.end(), [](const Sample& s) { return !s.stereotypical; }));
}

inline TrainResult run_cda(const Model& model, const std::vector<Sample>& dataset, FreezeSetting setting,
                           const TrainConfig& cfg) {
  if (count_anti_stereotypical(dataset) == 0) throw EmptyDataError("CDA needs at least one anti-stereotypical sample");
  return finetune(model, build_cda_training_set(dataset), setting, cfg);
}

// ---------------------------------------------------------------------------
// Task vectors
// ---------------------------------------------------------------------------

struct TaskVector {
  ParamSet delta;
};

inline TaskVector compute_task_vector(const ParamSet& original, const ParamSet& finetuned) {
  if (original.size() != finetuned.size()) throw ConsistencyError("checkpoints hold different tensor sets");
  TaskVector tv;
  for (const auto& [name, p] : original) {
    if (!finetuned.contains(name)) throw ConsistencyError("tensor '" + name + "' is missing from the fine-tuned model");
    const Param& q = finetuned.entry(name);
    if (q.value.shape != p.value.shape) throw ConsistencyError("tensor '" + name + "' changed shape");
    if (q.tag != p.tag) throw ConsistencyError("tensor '" + name + "' changed tag");
    std::vector<float> d(p.value.numel());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = q.value.data[i] - p.value.data[i];
    tv.delta.add(name, p.tag, Tensor(p.value.shape, std::move(d)));
  }
  return tv;
}

struct TaskVectorParams {
  double alpha = 0.5;
  double blend = 0.5;

  /// Apply-time range. The search samples alpha from kSearchAlphaMin upward;
  /// alpha = 0 is accepted here as the identity edit.
  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw PreconditionError("alpha must lie in [0, 1]");
    if (!(blend >= 0.0 && blend <= 1.0)) throw PreconditionError("blend must lie in [0, 1]");
  }

  double coefficient() const { return (1.0 - blend) * alpha; }
};

inline constexpr double kSearchAlphaMin = 0.1;
inline constexpr double kSearchAlphaMax = 1.0;
inline constexpr double kSearchBlendMin = 0.0;
inline constexpr double kSearchBlendMax = 1.0;

/// W - c * delta on trainable tags; frozen tags and c = 0 copy verbatim.
inline ParamSet apply_task_vector_coefficient(const ParamSet& original, const TaskVector& tv, double c,
                                              const FreezeMask& mask) {
  ParamSet out = original;
  for (auto& [name, p] : out) {
    if (!tv.delta.contains(name)) throw ConsistencyError("task vector lacks tensor '" + name + "'");
    const Tensor& d = tv.delta.at(name);
    if (d.shape != p.value.shape) throw ConsistencyError("task vector tensor '" + name + "' has the wrong shape");
    if (c == 0.0 || mask.frozen(p.tag)) continue;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      p.value.data[i] = static_cast<float>(static_cast<double>(p.value.data[i]) - c * static_cast<double>(d.data[i]));
    }
  }
  if (tv.delta.size() != original.size()) throw ConsistencyError("task vector holds tensors the model lacks");
  return out;
}

inline ParamSet apply_task_vector(const ParamSet& original, const TaskVector& tv, const TaskVectorParams& p,
                                  const FreezeMask& mask) {
  p.validate();
  return apply_task_vector_coefficient(original, tv, p.coefficient(), mask);
}

struct SearchConfig {
  std::size_t trials = 64;
  double lambda_gap = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (trials == 0) throw ValidationError("search needs at least one trial");
    if (!(lambda_gap >= 0.0)) throw ValidationError("lambda_gap must be non-negative");
  }
};

struct SearchTrial {
  std::size_t trial = 0;
  double alpha = 0.0;
  double blend = 0.0;
  double ra_avg = 0.0;
  double gg = 0.0;
  double loss = 0.0;
};

struct SearchResult {
  TaskVectorParams best;
  double best_loss = 0.0;
  std::vector<SearchTrial> trace;
};

/// Random search over (alpha, blend). Each candidate is scored on the pooled
/// probe set; the first minimum wins ties.
inline SearchResult search_hyperparams(const Model& base, const TaskVector& tv, const std::vector<Probe>& probes,
                                       const SearchConfig& cfg, const FreezeMask& mask) {
  cfg.validate();
  if (probes.empty()) throw PreconditionError("search needs a non-empty probe set");
  Rng rng(cfg.seed ^ 0x5EA2C4ull);
  SearchResult result;
  Model candidate = base;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    SearchTrial tr;
    tr.trial = t;
    tr.alpha = rng.uniform(kSearchAlphaMin, kSearchAlphaMax);
    tr.blend = rng.uniform(kSearchBlendMin, kSearchBlendMax);
    candidate.params = apply_task_vector(base.params, tv, {tr.alpha, tr.blend}, mask);
    const MetricCell cell = compute_metrics(predict_all(candidate, probes), probes);
    tr.ra_avg = cell.ra_avg;
    tr.gg = cell.gg;
    tr.loss = fairness_loss(cell.ra_avg, cell.gg, cfg.lambda_gap);
    if (t == 0 || tr.loss < result.best_loss) {
      result.best_loss = tr.loss;
      result.best = {tr.alpha, tr.blend};
    }
    result.trace.push_back(tr);
  }
  return result;
}

inline std::string serialize_trial(const SearchTrial& t) {
  return "{\"trial\":" + std::to_string(t.trial) + ",\"alpha\":" + format_float(t.alpha) +
         ",\"blend\":" + format_float(t.blend) + ",\"ra_avg\":" + format_float(t.ra_avg) +
         ",\"gg\":" + format_float(t.gg) + ",\"loss\":" + format_float(t.loss) + "}";
}

inline void write_search_trace(const std::vector<SearchTrial>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& t : trace) out << serialize_trial(t) << '\n';
  if (!out) throw IoError("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Concept vector, degree of stereotypicality, DAUDoS
// ---------------------------------------------------------------------------

enum class EmbeddingSource { vision, text, fused };

inline std::string_view to_string(EmbeddingSource s) {
  switch (s) {
    case EmbeddingSource::vision: return "vision";
    case EmbeddingSource::text: return "text";
    case EmbeddingSource::fused: return "fused";
  }
  return "?";
}

inline EmbeddingSource embedding_source_from_string(std::string_view s) {
  if (s == "vision") return EmbeddingSource::vision;
  if (s == "text") return EmbeddingSource::text;
  if (s == "fused") return EmbeddingSource::fused;
  throw ValidationError("unknown embedding source '" + std::string(s) + "'");
}

/// fused = normalized sum of the image and caption embeddings.
inline Embedding sample_embedding(const Model& m, const Sample& s, EmbeddingSource src = EmbeddingSource::vision) {
  if (src == EmbeddingSource::vision) return encode_image(m, s.image_features);
  const auto txt = encode_text(m, ids_of(s.caption));
  if (src == EmbeddingSource::text) return txt;
  auto img = encode_image(m, s.image_features);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] += txt[i];
  return l2_normalize<float>(img);
}

struct ConceptVector {
  std::vector<double> v_cav;
  std::size_t n_sources = 0;
};

/// Mean of the given embeddings, accumulated in 64-bit in the given order.
inline ConceptVector cav_from_embeddings(const std::vector<Embedding>& embeddings) {
  if (embeddings.empty()) throw PreconditionError("a concept vector needs at least one embedding");
  ConceptVector cav;
  cav.v_cav.assign(embeddings.front().size(), 0.0);
  for (const auto& e : embeddings) {
    if (e.size() != cav.v_cav.size()) throw ShapeError("embeddings disagree in width");
    for (std::size_t i = 0; i < e.size(); ++i) cav.v_cav[i] += e[i];
  }
  for (double& x : cav.v_cav) {
    x /= static_cast<double>(embeddings.size());
    if (!std::isfinite(x)) throw NumericError("concept vector is not finite");
  }
  cav.n_sources = embeddings.size();
  return cav;
}

/// Mean embedding of anti-stereotypical samples, summed in ascending id order
/// so the result does not depend on input order.
inline ConceptVector compute_cav(const Model& m, const std::vector<Sample>& anti,
                                 EmbeddingSource src = EmbeddingSource::vision) {
  if (anti.empty()) throw PreconditionError("a concept vector needs at least one anti-stereotypical sample");
  std::vector<const Sample*> sorted;
  for (const auto& s : anti) {
    if (s.stereotypical) throw LabelError("sample " + std::to_string(s.id) + " is stereotypical");
    sorted.push_back(&s);
  }
  std::stable_sort(sorted.begin(), sorted.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
  std::vector<Embedding> embeddings;
  for (const Sample* s : sorted) embeddings.push_back(sample_embedding(m, *s, src));
  return cav_from_embeddings(embeddings);
}

inline double dos_score(std::span<const float> embedding, const ConceptVector& cav) {
  if (embedding.size() != cav.v_cav.size()) throw ShapeError("embedding and concept vector disagree in width");
  double dotp = 0.0, ne = 0.0, nc = 0.0;
  for (std::size_t i = 0; i < embedding.size(); ++i) {
    const double e = embedding[i];
    dotp += e * cav.v_cav[i];
    ne += e * e;
    nc += cav.v_cav[i] * cav.v_cav[i];
  }
  if (!(nc > 0.0)) throw DegenerateError("concept vector has zero norm");
  if (!(ne > 0.0)) throw DegenerateError("sample embedding has zero norm");
  return std::clamp(dotp / (std::sqrt(ne) * std::sqrt(nc)), -1.0, 1.0);
}

inline double dos_score(const Model& m, const Sample& s, const ConceptVector& cav,
                        EmbeddingSource src = EmbeddingSource::vision) {
  const auto e = sample_embedding(m, s, src);
  return dos_score(std::span<const float>(e), cav);
}

/// ascending: low similarity to the anti-stereotypical concept first.
enum class DosPolarity { ascending, descending };

inline std::string_view to_string(DosPolarity p) { return p == DosPolarity::ascending ? "ascending" : "descending"; }

inline DosPolarity dos_polarity_from_string(std::string_view s) {
  if (s == "ascending") return DosPolarity::ascending;
  if (s == "descending") return DosPolarity::descending;
  throw ValidationError("unknown DoS polarity '" + std::string(s) + "'");
}

/// Top-K by DoS. Ascending order is (score, id); descending is its exact
/// reverse, so the two polarities split the dataset into complements.
inline std::vector<Sample> daudos_select(const std::vector<Sample>& dataset, const std::vector<double>& scores,
                                         std::size_t k, DosPolarity polarity = DosPolarity::ascending) {
  if (scores.size() != dataset.size()) throw PreconditionError("need exactly one score per sample");
  if (k < 1 || k > dataset.size()) {
    throw PreconditionError("K = " + std::to_string(k) + " outside [1, " + std::to_string(dataset.size()) + "]");
  }
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    if (dataset[a].id != dataset[b].id) return dataset[a].id < dataset[b].id;
    return a < b;
  });
  if (polarity == DosPolarity::descending) std::reverse(idx.begin(), idx.end());
  std::vector<Sample> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(dataset[idx[i]]);
  return out;
}

inline std::size_t daudos_k(std::size_t n, double k_fraction) {
  if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw ValidationError("k_fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * k_fraction - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

struct DaudosOptions {
  DosPolarity polarity = DosPolarity::ascending;
  EmbeddingSource source = EmbeddingSource::vision;
};

/// CAV from the anti-stereotypical samples, DoS for every sample regardless
/// of label, top-K selection, then counterfactual swap of the selected
/// stereotypical samples.
inline std::vector<Sample> build_daudos_training_set(const Model& m, const std::vector<Sample>& dataset, std::size_t k,
                                                     const DaudosOptions& opt = {}) {
  std::vector<Sample> anti;
  for (const auto& s : dataset) {
    if (!s.stereotypical) anti.push_back(s);
  }
  if (anti.empty()) throw EmptyDataError("DAUDoS needs at least one anti-stereotypical sample");
  const ConceptVector cav = compute_cav(m, anti, opt.source);
  std::vector<double> scores;
  scores.reserve(dataset.size());
  for (const auto& s : dataset) scores.push_back(dos_score(m, s, cav, opt.source));
  return build_cda_training_set(daudos_select(dataset, scores, k, opt.polarity));
}

inline TrainResult run_daudos(const Model& model, const std::vector<Sample>& dataset, std::size_t k,
                              FreezeSetting setting, const TrainConfig& cfg, const DaudosOptions& opt = {}) {
  return finetune(model, build_daudos_training_set(model, dataset, k, opt), setting, cfg);
}

}  // namespace mbl
