#include <gtest/gtest.h>

#include <algorithm>
#include <cfloat>

#include "mbl/debias.hpp"

using namespace mbl;

namespace {

std::vector<Sample> dataset(std::uint64_t seed, std::size_t n, BiasChannel ch = BiasChannel::both) {
  GenSpec g;
  g.n_samples = n;
  g.seed = seed;
  g.bias_channel = ch;
  g.bias_strength = 0.5;
  g.gender_occupation_correlation = 0.8;
  auto d = generate_dataset(g);
  annotate_dataset(d);
  return d;
}

std::vector<Sample> only(const std::vector<Sample>& d, bool stereotypical) {
  std::vector<Sample> out;
  for (const auto& s : d) {
    if (s.stereotypical == stereotypical) out.push_back(s);
  }
  return out;
}

TrainConfig short_train(std::size_t epochs, std::uint64_t seed = 42) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = seed;
  return c;
}

ParamSet single(float v) {
  ParamSet p;
  p.add("w", Tag::text, Tensor::vector({v}));
  return p;
}

TaskVector random_task_vector(const ParamSet& like, std::uint64_t seed) {
  Rng rng(seed);
  TaskVector tv{like.zeros_like()};
  for (auto& [_, e] : tv.delta) {
    for (float& v : e.value.data) v = static_cast<float>(rng.normal(0.0, 0.1));
  }
  return tv;
}

std::vector<std::string> canonical(const std::vector<Sample>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.push_back(serialize_sample(s));
  std::sort(out.begin(), out.end());
  return out;
}

Sample with_id(std::uint64_t id) {
  Sample s;
  s.id = id;
  return s;
}

}  // namespace

TEST(Finetune, RawReturnsInputBitwise) {
  const Model m = make_dual_encoder(1);
  const auto r = finetune(m, dataset(1, 40), FreezeSetting::raw, short_train(3));
  EXPECT_TRUE(bitwise_equal(r.model.params, m.params));
  EXPECT_TRUE(r.epoch_losses.empty());
  EXPECT_TRUE(bitwise_equal(finetune(m, {}, FreezeSetting::raw, short_train(3)).model.params, m.params));
}

TEST(Finetune, VisionOnlyLeavesTextBitwise) {
  for (Archetype a : {Archetype::dual_encoder, Archetype::caption_scorer}) {
    const Model m = make_model(a, 2);
    const auto r = finetune(m, dataset(2, 64), FreezeSetting::vision_only, short_train(5));
    EXPECT_TRUE(tag_bitwise_equal(r.model.params, m.params, Tag::text));
    EXPECT_TRUE(tag_bitwise_equal(r.model.params, m.params, Tag::text_proj));
    EXPECT_FALSE(tag_bitwise_equal(r.model.params, m.params, Tag::vision));
  }
}

TEST(Finetune, TextOnlyLeavesVisionBitwise) {
  for (Archetype a : {Archetype::dual_encoder, Archetype::caption_scorer}) {
    const Model m = make_model(a, 3);
    const auto r = finetune(m, dataset(3, 64), FreezeSetting::text_only, short_train(3));
    EXPECT_TRUE(tag_bitwise_equal(r.model.params, m.params, Tag::vision));
    EXPECT_TRUE(tag_bitwise_equal(r.model.params, m.params, Tag::vision_proj));
    EXPECT_FALSE(tag_bitwise_equal(r.model.params, m.params, Tag::text));
  }
}

TEST(Finetune, EmptyTrainableSetRejected) {
  EXPECT_THROW(finetune(make_dual_encoder(1), {}, FreezeSetting::both, short_train(1)), EmptyDataError);
}

TEST(Finetune, DeterministicInSeed) {
  const Model m = make_caption_scorer(4);
  const auto d = dataset(4, 48);
  const auto a = finetune(m, d, FreezeSetting::both, short_train(2, 9));
  const auto b = finetune(m, d, FreezeSetting::both, short_train(2, 9));
  const auto c = finetune(m, d, FreezeSetting::both, short_train(2, 10));
  EXPECT_TRUE(bitwise_equal(a.model.params, b.model.params));
  EXPECT_FALSE(bitwise_equal(a.model.params, c.model.params));
}

TEST(Finetune, LossDescendsOverFiveEpochs) {
  for (Archetype a : {Archetype::dual_encoder, Archetype::caption_scorer}) {
    int violations = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const auto r = finetune(make_model(a, 42), dataset(seed, 128), FreezeSetting::both, short_train(5, seed));
      ASSERT_EQ(r.epoch_losses.size(), 5u);
      violations += r.epoch_losses[4] > r.epoch_losses[0];
    }
    EXPECT_LE(violations, 1) << to_string(a);
  }
}

TEST(Cda, OnlyStereotypicalBecomesCounterfactuals) {
  const auto stereo = only(dataset(5, 200), true);
  ASSERT_FALSE(stereo.empty());
  const auto set = build_cda_training_set(stereo);
  ASSERT_EQ(set.size(), stereo.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(set[i].caption, cda_swap(stereo[i].caption));
    EXPECT_EQ(set[i].image_features, stereo[i].image_features);
    EXPECT_EQ(annotate_gender(set[i].caption), opposite(stereo[i].gender));
  }
  EXPECT_THROW(run_cda(make_dual_encoder(1), stereo, FreezeSetting::both, short_train(1)), EmptyDataError);
}

TEST(Cda, OnlyAntiStereotypicalUnchanged) {
  const auto anti = only(dataset(6, 200), false);
  EXPECT_EQ(build_cda_training_set(anti), anti);
}

TEST(Cda, EverySampleContributesOnePair) {
  const auto d = dataset(7, 300);
  const auto set = build_cda_training_set(d);
  EXPECT_EQ(set.size(), count_anti_stereotypical(d) + only(d, true).size());
  const auto r = run_cda(make_dual_encoder(1), d, FreezeSetting::text_only, short_train(1));
  EXPECT_EQ(r.training_size, d.size());
}

TEST(TaskVector, IdenticalCheckpointsGiveZero) {
  const auto p = make_dual_encoder(3).params;
  const auto tv = compute_task_vector(p, p);
  for (const auto& [_, e] : tv.delta) {
    for (float v : e.value.data) EXPECT_EQ(v, 0.0f);
  }
}

TEST(TaskVector, ElementwiseDifference) {
  ParamSet a, b;
  a.add("w", Tag::vision, Tensor::vector({1.0f, 2.0f}));
  b.add("w", Tag::vision, Tensor::vector({1.5f, 1.0f}));
  const auto tv = compute_task_vector(a, b);
  EXPECT_EQ(tv.delta.at("w").data, (std::vector<float>{0.5f, -1.0f}));
  EXPECT_EQ(tv.delta.tag_of("w"), Tag::vision);
}

TEST(TaskVector, ShapeMismatchNamesTensor) {
  ParamSet a, b;
  a.add("layer.w", Tag::vision, Tensor::vector({1.0f, 2.0f}));
  b.add("layer.w", Tag::vision, Tensor::vector({1.0f}));
  try {
    compute_task_vector(a, b);
    FAIL() << "expected ConsistencyError";
  } catch (const ConsistencyError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
}

TEST(ApplyTaskVector, ZeroCoefficientIsBitwiseIdentity) {
  const auto p = make_caption_scorer(5).params;
  const auto tv = random_task_vector(p, 5);
  for (const FreezeMask& mask : {FreezeMask::none(), freeze_mask(FreezeSetting::text_only)}) {
    EXPECT_TRUE(bitwise_equal(apply_task_vector(p, tv, {0.7, 1.0}, mask), p));
    EXPECT_TRUE(bitwise_equal(apply_task_vector(p, tv, {0.0, 0.3}, mask), p));
  }
}

TEST(ApplyTaskVector, CoefficientOfReportedHyperparameters) {
  const TaskVectorParams hp{0.56, 0.78};
  EXPECT_NEAR(hp.coefficient(), 0.1232, 1e-12);
  ParamSet delta = single(2.0f);
  const auto out = apply_task_vector(single(1.0f), TaskVector{delta}, hp, FreezeMask::none());
  EXPECT_FLOAT_EQ(out.at("w").data[0], 0.7536f);
}

TEST(ApplyTaskVector, CoefficientsCompose) {
  // Exactly representable case: bitwise.
  const TaskVector d{single(2.0f)};
  const auto chained = apply_task_vector_coefficient(
      apply_task_vector_coefficient(single(1.0f), d, 0.25, FreezeMask::none()), d, 0.5, FreezeMask::none());
  EXPECT_TRUE(bitwise_equal(chained, apply_task_vector_coefficient(single(1.0f), d, 0.75, FreezeMask::none())));

  // General case: within f32 rounding of the two chained steps.
  const auto p = make_dual_encoder(6).params;
  const auto tv = random_task_vector(p, 6);
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    const double c1 = rng.uniform(0, 1), c2 = rng.uniform(0, 1);
    const auto two = apply_task_vector_coefficient(apply_task_vector_coefficient(p, tv, c1, FreezeMask::none()), tv,
                                                   c2, FreezeMask::none());
    const auto one = apply_task_vector_coefficient(p, tv, c1 + c2, FreezeMask::none());
    for (const auto& [name, e] : one) {
      const auto& a = two.at(name).data;
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double scale = std::max({1.0, std::abs(static_cast<double>(p.at(name).data[k])), std::abs(a[k] * 1.0)});
        ASSERT_NEAR(a[k], e.value.data[k], 2.0 * FLT_EPSILON * scale) << name;
      }
    }
  }
}

TEST(ApplyTaskVector, OutOfRangeRejected) {
  const TaskVector d{single(1.0f)};
  EXPECT_THROW(apply_task_vector(single(1.0f), d, {1.5, 0.5}, FreezeMask::none()), PreconditionError);
  EXPECT_THROW(apply_task_vector(single(1.0f), d, {0.5, -0.1}, FreezeMask::none()), PreconditionError);
}

TEST(ApplyTaskVector, FrozenTagsNeverChange) {
  for (Archetype a : {Archetype::dual_encoder, Archetype::caption_scorer}) {
    const auto p = make_model(a, 7).params;
    const auto tv = random_task_vector(p, 7);
    const auto out = apply_task_vector(p, tv, {0.9, 0.1}, freeze_mask(FreezeSetting::vision_only));
    EXPECT_TRUE(tag_bitwise_equal(out, p, Tag::text));
    EXPECT_TRUE(tag_bitwise_equal(out, p, Tag::text_proj));
    EXPECT_FALSE(tag_bitwise_equal(out, p, Tag::vision));
  }
}

TEST(ApplyTaskVector, MissingTensorRejected) {
  ParamSet p = single(1.0f);
  p.add("x", Tag::vision, Tensor::vector({1.0f}));
  EXPECT_THROW(apply_task_vector(p, TaskVector{single(1.0f)}, {0.5, 0.5}, FreezeMask::none()), ConsistencyError);
}

TEST(Search, ContractHolds) {
  const Model base = make_dual_encoder(8);
  const auto tv = random_task_vector(base.params, 8);
  const auto probes = build_probes(8, 1);
  SearchConfig cfg;
  cfg.trials = 12;
  cfg.seed = 3;
  const auto r = search_hyperparams(base, tv, probes, cfg, FreezeMask::none());
  ASSERT_EQ(r.trace.size(), 12u);
  double min_loss = r.trace[0].loss;
  for (const auto& t : r.trace) {
    EXPECT_GE(t.alpha, kSearchAlphaMin);
    EXPECT_LE(t.alpha, kSearchAlphaMax);
    EXPECT_GE(t.blend, kSearchBlendMin);
    EXPECT_LE(t.blend, kSearchBlendMax);
    EXPECT_EQ(t.loss, fairness_loss(t.ra_avg, t.gg, cfg.lambda_gap));
    EXPECT_LE(r.best_loss, t.loss);
    min_loss = std::min(min_loss, t.loss);
  }
  EXPECT_EQ(r.best_loss, min_loss);
  const auto again = search_hyperparams(base, tv, probes, cfg, FreezeMask::none());
  EXPECT_EQ(again.best.alpha, r.best.alpha);
  EXPECT_EQ(again.best.blend, r.best.blend);
}

TEST(Search, SingleTrialReturnsIt) {
  const Model base = make_caption_scorer(9);
  const auto tv = random_task_vector(base.params, 9);
  SearchConfig cfg;
  cfg.trials = 1;
  const auto r = search_hyperparams(base, tv, build_probes(9, 1), cfg, FreezeMask::none());
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_EQ(r.best.alpha, r.trace[0].alpha);
  EXPECT_EQ(r.best.blend, r.trace[0].blend);
  EXPECT_EQ(r.best_loss, r.trace[0].loss);
}

TEST(Search, EmptyProbesAndBadConfigRejected) {
  const Model base = make_dual_encoder(1);
  const auto tv = random_task_vector(base.params, 1);
  EXPECT_THROW(search_hyperparams(base, tv, {}, SearchConfig{}, FreezeMask::none()), PreconditionError);
  SearchConfig zero;
  zero.trials = 0;
  EXPECT_THROW(search_hyperparams(base, tv, build_probes(1, 1), zero, FreezeMask::none()), ValidationError);
}

TEST(Search, TraceLineFormat) {
  EXPECT_EQ(serialize_trial({3, 0.5, 0.25, 0.75, 0.125, -0.625}),
            "{\"trial\":3,\"alpha\":0.5,\"blend\":0.25,\"ra_avg\":0.75,\"gg\":0.125,\"loss\":-0.625}");
}

TEST(Cav, SingleSampleIsItsEmbedding) {
  const Model m = make_dual_encoder(10);
  const auto anti = only(dataset(10, 50), false);
  const auto cav = compute_cav(m, {anti[0]});
  const auto e = encode_image(m, anti[0].image_features);
  EXPECT_EQ(cav.n_sources, 1u);
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(cav.v_cav[i], static_cast<double>(e[i]));
}

TEST(Cav, CancellingEmbeddingsAreDegenerate) {
  const Embedding e = {0.6f, 0.8f};
  const auto cav = cav_from_embeddings({e, {-0.6f, -0.8f}});
  EXPECT_THROW(dos_score(std::span<const float>(e), cav), DegenerateError);
}

TEST(Cav, OrderInvariant) {
  const Model m = make_caption_scorer(11);
  auto anti = only(dataset(11, 120), false);
  const auto a = compute_cav(m, anti);
  std::reverse(anti.begin(), anti.end());
  const auto b = compute_cav(m, anti);
  EXPECT_EQ(a.v_cav, b.v_cav);
}

TEST(Cav, InputContractsEnforced) {
  const Model m = make_dual_encoder(12);
  EXPECT_THROW(compute_cav(m, {}), PreconditionError);
  const auto stereo = only(dataset(12, 50), true);
  EXPECT_THROW(compute_cav(m, {stereo[0]}), LabelError);
}

TEST(Dos, ReferenceCases) {
  const ConceptVector cav{{1.0, 0.0, 0.0}, 1};
  const std::vector<float> same = {1.0f, 0.0f, 0.0f}, ortho = {0.0f, 2.0f, 0.0f};
  EXPECT_DOUBLE_EQ(dos_score(same, cav), 1.0);
  EXPECT_DOUBLE_EQ(dos_score(ortho, cav), 0.0);
  const std::vector<float> e = {0.25f, -0.5f, 0.75f}, e3 = {0.75f, -1.5f, 2.25f};
  const ConceptVector skew{{0.2, 0.7, -0.1}, 2};
  EXPECT_NEAR(dos_score(e, skew), dos_score(e3, skew), 1e-12);
  EXPECT_THROW(dos_score(e, ConceptVector{{0.0, 0.0, 0.0}, 1}), DegenerateError);
}

TEST(Dos, BoundedOnRealSamples) {
  const Model m = make_dual_encoder(13);
  const auto d = dataset(13, 150);
  const auto cav = compute_cav(m, only(d, false));
  for (const auto& s : d) {
    const double v = dos_score(m, s, cav);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(DaudosSelect, SortOracle) {
  const std::vector<Sample> d = {with_id(0), with_id(1), with_id(2)};  // a, b, c
  const auto sel = daudos_select(d, {0.9, -0.2, 0.1}, 2);
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].id, 1u);
  EXPECT_EQ(sel[1].id, 2u);
}

TEST(DaudosSelect, TiesByAscendingId) {
  const std::vector<Sample> d = {with_id(7), with_id(3), with_id(5)};
  const auto sel = daudos_select(d, {0.4, 0.4, 0.4}, 2);
  EXPECT_EQ(sel[0].id, 3u);
  EXPECT_EQ(sel[1].id, 5u);
}

TEST(DaudosSelect, FullKIsWholeDataset) {
  const auto d = dataset(14, 60);
  std::vector<double> scores;
  Rng rng(14);
  for (std::size_t i = 0; i < d.size(); ++i) scores.push_back(rng.uniform(-1, 1));
  EXPECT_EQ(canonical(daudos_select(d, scores, d.size())), canonical(d));
}

TEST(DaudosSelect, KOutOfRangeRejected) {
  const std::vector<Sample> d = {with_id(0), with_id(1)};
  EXPECT_THROW(daudos_select(d, {0.1, 0.2}, 0), PreconditionError);
  EXPECT_THROW(daudos_select(d, {0.1, 0.2}, 3), PreconditionError);
  EXPECT_THROW(daudos_select(d, {0.1}, 1), PreconditionError);
}

TEST(DaudosSelect, PolaritiesSplitIntoComplements) {
  const auto d = dataset(15, 90);
  std::vector<double> scores;
  Rng rng(15);
  for (std::size_t i = 0; i < d.size(); ++i) scores.push_back(std::round(rng.uniform(-1, 1) * 4) / 4);
  const std::size_t k = 30;
  auto low = daudos_select(d, scores, k, DosPolarity::ascending);
  const auto high = daudos_select(d, scores, d.size() - k, DosPolarity::descending);
  low.insert(low.end(), high.begin(), high.end());
  EXPECT_EQ(canonical(low), canonical(d));
}

TEST(Daudos, OneThirdTrainingSetSize) {
  const auto d = dataset(16, 301);
  const std::size_t k = daudos_k(d.size(), 1.0 / 3.0);
  EXPECT_EQ(k, (d.size() + 2) / 3);
  EXPECT_EQ(build_daudos_training_set(make_dual_encoder(16), d, k).size(), k);
  EXPECT_EQ(daudos_k(9, 1.0 / 3.0), 3u);
  EXPECT_THROW(daudos_k(9, 0.0), ValidationError);
}

TEST(Daudos, FullKMatchesCdaMultiset) {
  const auto d = dataset(17, 120);
  for (EmbeddingSource src : {EmbeddingSource::vision, EmbeddingSource::text, EmbeddingSource::fused}) {
    const auto set = build_daudos_training_set(make_dual_encoder(17), d, d.size(), {DosPolarity::ascending, src});
    EXPECT_EQ(canonical(set), canonical(build_cda_training_set(d)));
  }
}

TEST(Daudos, NeedsAntiStereotypicalSamples) {
  const auto stereo = only(dataset(18, 100), true);
  EXPECT_THROW(build_daudos_training_set(make_dual_encoder(18), stereo, 5), EmptyDataError);
}

TEST(Daudos, RunRespectsFreezeSetting) {
  const Model m = make_caption_scorer(19);
  const auto d = dataset(19, 90);
  const auto r = run_daudos(m, d, daudos_k(d.size(), 1.0 / 3.0), FreezeSetting::text_only, short_train(2));
  EXPECT_EQ(r.training_size, 30u);
  EXPECT_TRUE(tag_bitwise_equal(r.model.params, m.params, Tag::vision));
}
