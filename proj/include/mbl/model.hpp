#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mbl/data.hpp"
#include "mbl/nn.hpp"
#include "mbl/tensor.hpp"
#include "mbl/vocab.hpp"

namespace mbl {

enum class Archetype { dual_encoder, caption_scorer };

inline std::string_view to_string(Archetype a) {
  return a == Archetype::dual_encoder ? "dual_encoder" : "caption_scorer";
}

inline Archetype archetype_from_string(std::string_view s) {
  if (s == "dual_encoder") return Archetype::dual_encoder;
  if (s == "caption_scorer") return Archetype::caption_scorer;
  throw ValidationError("unknown archetype '" + std::string(s) + "'");
}

/// Which encoder's weights may change during debiasing.
enum class FreezeSetting { raw, text_only, vision_only, both };

inline constexpr std::array<FreezeSetting, 4> kAllSettings = {FreezeSetting::raw, FreezeSetting::text_only,
                                                              FreezeSetting::vision_only, FreezeSetting::both};

inline std::string_view to_string(FreezeSetting s) {
  switch (s) {
    case FreezeSetting::raw: return "raw";
    case FreezeSetting::text_only: return "text_only";
    case FreezeSetting::vision_only: return "vision_only";
    case FreezeSetting::both: return "both";
  }
  return "?";
}

inline FreezeSetting freeze_setting_from_string(std::string_view s) {
  for (auto f : kAllSettings) {
    if (to_string(f) == s) return f;
  }
  throw ValidationError("unknown freeze setting '" + std::string(s) + "'");
}

/// raw: everything frozen. text_only: only {text, text_proj} train.
/// vision_only: only {vision, vision_proj} train. both: nothing frozen.
inline FreezeMask freeze_mask(FreezeSetting s) {
  switch (s) {
    case FreezeSetting::raw: return FreezeMask::all();
    case FreezeSetting::text_only: return {Tag::vision, Tag::vision_proj, Tag::decoder};
    case FreezeSetting::vision_only: return {Tag::text, Tag::text_proj, Tag::decoder};
    case FreezeSetting::both: return FreezeMask::none();
  }
  return FreezeMask::all();
}

inline constexpr std::size_t kHiddenDim = 32;
inline constexpr std::size_t kEmbedDim = 16;
inline constexpr std::size_t kTokenDim = 16;
inline constexpr std::size_t kMaxCaptionTokens = 32;
inline constexpr float kDefaultTemperature = 0.07f;
/// Init scale of the token-embedding table.
inline constexpr double kEmbedInitScale = 0.3;

/// Either archetype. Both expose the same tagged ParamSet, so freezing,
/// editing and evaluation code never branches on the concrete model.
///
/// dual_encoder (CLIP-like): image and caption towers, each a 2-layer tanh
/// MLP followed by an L2-normalized linear projection; captions are
/// mean-pooled token embeddings. Scores are cosine / temperature.
///
/// caption_scorer (captioner-like): the same vision tower feeds a text-side
/// decoder that fuses the image embedding with mean-pooled context tokens,
/// then predicts the next caption token (bigram head) or the gender of the
/// upcoming pronoun (2-way head). Its text side holds about 3x the
/// parameters of its vision side.
struct Model {
  Archetype archetype = Archetype::dual_encoder;
  ParamSet params;
  float temperature = kDefaultTemperature;
};

namespace slices {
inline const MlpSlice vision{"vision", 2, false};
inline const MlpSlice vision_proj{"vision_proj", 1, true};
inline const MlpSlice text{"text", 2, false};
inline const MlpSlice text_proj{"text_proj", 1, true};
inline const MlpSlice fuse{"text.fuse", 1, false};
inline const MlpSlice pronoun{"text.pronoun", 1, false};
inline const MlpSlice bigram{"text.bigram", 1, false};
}  // namespace slices

inline constexpr std::string_view kEmbedTable = "text.embed";

namespace detail {

inline void add_layer(ParamSet& p, Rng& rng, const std::string& w, const std::string& b, Tag tag, std::size_t out,
                      std::size_t in) {
  p.add(w, tag, random_matrix(rng, out, in));
  p.add(b, tag, Tensor::zeros({out}));
}

inline void add_vision_tower(ParamSet& p, Rng& rng) {
  add_layer(p, rng, slices::vision.w1(), slices::vision.b1(), Tag::vision, kHiddenDim, kImageDim);
  add_layer(p, rng, slices::vision.w2(), slices::vision.b2(), Tag::vision, kEmbedDim, kHiddenDim);
  add_layer(p, rng, slices::vision_proj.w1(), slices::vision_proj.b1(), Tag::vision_proj, kEmbedDim, kEmbedDim);
}

}  // namespace detail

inline Model make_dual_encoder(std::uint64_t seed) {
  Model m;
  m.archetype = Archetype::dual_encoder;
  Rng rng = Rng::derive(seed, 0xD0A1);
  detail::add_vision_tower(m.params, rng);
  m.params.add(std::string(kEmbedTable), Tag::text, random_matrix(rng, kVocabRows, kTokenDim, kEmbedInitScale));
  detail::add_layer(m.params, rng, slices::text.w1(), slices::text.b1(), Tag::text, kHiddenDim, kTokenDim);
  detail::add_layer(m.params, rng, slices::text.w2(), slices::text.b2(), Tag::text, kEmbedDim, kHiddenDim);
  detail::add_layer(m.params, rng, slices::text_proj.w1(), slices::text_proj.b1(), Tag::text_proj, kEmbedDim,
                    kEmbedDim);
  return m;
}

inline Model make_caption_scorer(std::uint64_t seed) {
  Model m;
  m.archetype = Archetype::caption_scorer;
  Rng rng = Rng::derive(seed, 0xCA97);
  detail::add_vision_tower(m.params, rng);
  m.params.add(std::string(kEmbedTable), Tag::text, random_matrix(rng, kVocabRows, kTokenDim, kEmbedInitScale));
  detail::add_layer(m.params, rng, slices::fuse.w1(), slices::fuse.b1(), Tag::text, kHiddenDim, kEmbedDim + kTokenDim);
  detail::add_layer(m.params, rng, slices::bigram.w1(), slices::bigram.b1(), Tag::text, kVocabRows, kHiddenDim);
  detail::add_layer(m.params, rng, slices::pronoun.w1(), slices::pronoun.b1(), Tag::text, 2, kHiddenDim);
  return m;
}

inline Model make_model(Archetype a, std::uint64_t seed) {
  return a == Archetype::dual_encoder ? make_dual_encoder(seed) : make_caption_scorer(seed);
}

/// Recovers the archetype from parameter names (checkpoints store only tensors).
inline Model model_from_params(ParamSet params) {
  Model m;
  m.archetype = params.contains(slices::pronoun.w1()) ? Archetype::caption_scorer : Archetype::dual_encoder;
  m.params = std::move(params);
  return m;
}

// ---------------------------------------------------------------------------
// Towers
// ---------------------------------------------------------------------------

template <class Real>
struct VisionTrace {
  MlpTrace<Real> encoder;
  MlpTrace<Real> projection;
  const Vec<Real>& embedding() const { return projection.output; }
};

template <class Real>
VisionTrace<Real> vision_forward(const ParamSet& p, std::span<const float> features) {
  if (features.size() != kImageDim) {
    throw ShapeError("image features have width " + std::to_string(features.size()) + ", expected " +
                     std::to_string(kImageDim));
  }
  Vec<Real> x(features.begin(), features.end());
  VisionTrace<Real> t;
  t.encoder = mlp_trace<Real>(p, slices::vision, std::span<const Real>(x));
  t.projection = mlp_trace<Real>(p, slices::vision_proj, std::span<const Real>(t.encoder.output));
  return t;
}

template <class Real>
void vision_backward(const ParamSet& p, const VisionTrace<Real>& t, std::span<const Real> d_embedding, GradBuffer& g) {
  auto d_enc = mlp_backprop<Real>(p, slices::vision_proj, t.projection, d_embedding, g);
  mlp_backprop<Real>(p, slices::vision, t.encoder, std::span<const Real>(d_enc), g);
}

namespace detail {

inline void check_tokens(std::span<const TokenId> tokens, std::size_t min_len) {
  if (tokens.size() < min_len || tokens.size() > kMaxCaptionTokens) {
    throw PreconditionError("token list length " + std::to_string(tokens.size()) + " outside [" +
                            std::to_string(min_len) + ", " + std::to_string(kMaxCaptionTokens) + "]");
  }
  for (TokenId id : tokens) {
    if (id >= kWords.size()) throw VocabularyError("token id " + std::to_string(id) + " is outside the vocabulary");
  }
}

}  // namespace detail

/// Mean of token-embedding rows; zeros for an empty list.
template <class Real>
Vec<Real> mean_pool(const ParamSet& p, std::span<const TokenId> tokens) {
  const Tensor& table = p.at(kEmbedTable);
  Vec<Real> out(table.cols(), Real(0));
  if (tokens.empty()) return out;
  std::vector<double> acc(table.cols(), 0.0);
  for (TokenId id : tokens) {
    auto row = table.row(id);
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += row[d];
  }
  for (std::size_t d = 0; d < acc.size(); ++d) out[d] = static_cast<Real>(acc[d] / static_cast<double>(tokens.size()));
  return out;
}

template <class Real>
void mean_pool_backward(std::span<const TokenId> tokens, std::span<const Real> d_pooled, GradBuffer& g) {
  auto* table = g.find(kEmbedTable);
  if (!table || tokens.empty()) return;
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (TokenId id : tokens) {
    double* row = table->data() + static_cast<std::size_t>(id) * kTokenDim;
    for (std::size_t d = 0; d < kTokenDim; ++d) row[d] += static_cast<double>(d_pooled[d]) * inv;
  }
}

template <class Real>
struct TextTrace {
  std::vector<TokenId> tokens;
  MlpTrace<Real> encoder;
  MlpTrace<Real> projection;
  const Vec<Real>& embedding() const { return projection.output; }
};

/// Dual-encoder caption tower.
template <class Real>
TextTrace<Real> text_forward(const ParamSet& p, std::span<const TokenId> tokens) {
  detail::check_tokens(tokens, 1);
  TextTrace<Real> t;
  t.tokens.assign(tokens.begin(), tokens.end());
  auto pooled = mean_pool<Real>(p, tokens);
  t.encoder = mlp_trace<Real>(p, slices::text, std::span<const Real>(pooled));
  t.projection = mlp_trace<Real>(p, slices::text_proj, std::span<const Real>(t.encoder.output));
  return t;
}

template <class Real>
void text_backward(const ParamSet& p, const TextTrace<Real>& t, std::span<const Real> d_embedding, GradBuffer& g) {
  auto d_enc = mlp_backprop<Real>(p, slices::text_proj, t.projection, d_embedding, g);
  auto d_pooled = mlp_backprop<Real>(p, slices::text, t.encoder, std::span<const Real>(d_enc), g);
  mean_pool_backward<Real>(t.tokens, d_pooled, g);
}

/// Caption-scorer decoder step: h = tanh(W [image_embedding; context] + b).
template <class Real>
struct FuseTrace {
  MlpTrace<Real> affine;  // input = [v; c], raw = pre-activation
  Vec<Real> hidden;
};

template <class Real>
FuseTrace<Real> fuse_forward(const ParamSet& p, std::span<const Real> image_embedding, std::span<const Real> context) {
  Vec<Real> in(image_embedding.begin(), image_embedding.end());
  in.insert(in.end(), context.begin(), context.end());
  FuseTrace<Real> t;
  t.affine = mlp_trace<Real>(p, slices::fuse, std::span<const Real>(in));
  t.hidden.resize(t.affine.output.size());
  for (std::size_t i = 0; i < t.hidden.size(); ++i) {
    t.hidden[i] = static_cast<Real>(std::tanh(static_cast<double>(t.affine.output[i])));
  }
  return t;
}

/// Returns dL/d[v; c] given dL/dh.
template <class Real>
Vec<Real> fuse_backward(const ParamSet& p, const FuseTrace<Real>& t, std::span<const Real> d_hidden, GradBuffer& g) {
  Vec<Real> d_pre(d_hidden.size());
  for (std::size_t i = 0; i < d_pre.size(); ++i) {
    const double h = static_cast<double>(t.hidden[i]);
    d_pre[i] = static_cast<Real>(static_cast<double>(d_hidden[i]) * (1.0 - h * h));
  }
  return mlp_backprop<Real>(p, slices::fuse, t.affine, std::span<const Real>(d_pre), g);
}

// ---------------------------------------------------------------------------
// Public scoring surface
// ---------------------------------------------------------------------------

using Embedding = std::vector<float>;

inline Embedding encode_image(const Model& m, std::span<const float> features) {
  return vision_forward<float>(m.params, features).embedding();
}

inline Embedding encode_image(const Model& m, const ImageFeatures& features) {
  return encode_image(m, std::span<const float>(features));
}

/// Dual encoder: the caption tower output. Caption scorer: the normalized
/// mean token embedding (its text side has no standalone encoder).
inline Embedding encode_text(const Model& m, std::span<const TokenId> tokens) {
  if (m.archetype == Archetype::dual_encoder) return text_forward<float>(m.params, tokens).embedding();
  detail::check_tokens(tokens, 1);
  auto pooled = mean_pool<float>(m.params, tokens);
  return l2_normalize<float>(pooled);
}

inline Embedding encode_text(const Model& m, const std::vector<TokenId>& tokens) {
  return encode_text(m, std::span<const TokenId>(tokens));
}

/// cosine(image, caption) / temperature.
inline double similarity_score(const Model& m, std::span<const float> features, std::span<const TokenId> tokens) {
  if (m.archetype != Archetype::dual_encoder) throw PreconditionError("similarity_score needs a dual encoder");
  if (!(m.temperature > 0.0f)) throw PreconditionError("temperature must be positive");
  const auto img = encode_image(m, features);
  const auto txt = encode_text(m, tokens);
  return cosine_similarity(img, txt) / static_cast<double>(m.temperature);
}

struct GenderLogits {
  double male = 0.0;
  double female = 0.0;
};

/// Caption scorer: pronoun-head logits given the image and an optional
/// prompt (the caption prefix before the pronoun).
inline GenderLogits gender_logits(const Model& m, std::span<const float> features,
                                  std::span<const TokenId> prompt = {}) {
  if (m.archetype != Archetype::caption_scorer) throw PreconditionError("gender_logits needs a caption scorer");
  detail::check_tokens(prompt, 0);
  const auto vision = vision_forward<float>(m.params, features);
  const auto context = mean_pool<float>(m.params, prompt);
  const auto fused = fuse_forward<float>(m.params, vision.embedding(), context);
  const auto logits = affine<float>(m.params, slices::pronoun.w1(), slices::pronoun.b1(),
                                    std::span<const float>(fused.hidden));
  return {logits[0], logits[1]};
}

// ---------------------------------------------------------------------------
// Training objectives (batch mean), templated for double-precision checks
// ---------------------------------------------------------------------------

/// Symmetric InfoNCE over (image, caption) pairs.
template <class Real>
double dual_encoder_loss(const Model& m, std::span<const Sample* const> batch, GradBuffer* grads) {
  std::vector<VisionTrace<Real>> vt;
  std::vector<TextTrace<Real>> tt;
  std::vector<Vec<Real>> img, txt;
  for (const Sample* s : batch) {
    vt.push_back(vision_forward<Real>(m.params, s->image_features));
    const auto ids = ids_of(s->caption);
    tt.push_back(text_forward<Real>(m.params, ids));
    img.push_back(vt.back().embedding());
    txt.push_back(tt.back().embedding());
  }
  auto r = info_nce<Real>(img, txt, m.temperature);
  if (grads) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      vision_backward<Real>(m.params, vt[i], r.grad_image[i], *grads);
      text_backward<Real>(m.params, tt[i], r.grad_text[i], *grads);
    }
  }
  return r.loss;
}

inline constexpr std::size_t kMaleLogit = 0;
inline constexpr std::size_t kFemaleLogit = 1;

/// Pronoun cross-entropy plus mean next-token cross-entropy per caption.
template <class Real>
double caption_scorer_loss(const Model& m, std::span<const Sample* const> batch, GradBuffer* grads) {
  const ParamSet& p = m.params;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const Sample* s : batch) {
    const auto vt = vision_forward<Real>(p, s->image_features);
    const auto& v = vt.embedding();
    Vec<Real> d_v(v.size(), Real(0));

    // Accumulates dL/d[v; c] for one decoder step and routes the context part.
    auto step_backward = [&](const FuseTrace<Real>& ft, const Vec<Real>& d_hidden, std::span<const TokenId> ctx) {
      auto d_in = fuse_backward<Real>(p, ft, d_hidden, *grads);
      for (std::size_t i = 0; i < kEmbedDim; ++i) d_v[i] += d_in[i];
      mean_pool_backward<Real>(ctx, std::span<const Real>(d_in).subspan(kEmbedDim), *grads);
    };

    const Gender target = annotate_gender(s->caption);
    if (target != Gender::unknown) {
      const auto prompt = pronoun_prompt(s->caption);
      const auto ctx = mean_pool<Real>(p, prompt);
      const auto ft = fuse_forward<Real>(p, v, ctx);
      const auto logits = affine<Real>(p, slices::pronoun.w1(), slices::pronoun.b1(), std::span<const Real>(ft.hidden));
      Vec<Real> d_logits;
      const std::size_t cls = target == Gender::male ? kMaleLogit : kFemaleLogit;
      total += inv_batch * softmax_cross_entropy<Real>(logits, cls, grads ? &d_logits : nullptr);
      if (grads) {
        for (auto& d : d_logits) d = static_cast<Real>(static_cast<double>(d) * inv_batch);
        auto d_hidden = affine_backward<Real>(p, slices::pronoun.w1(), slices::pronoun.b1(),
                                              std::span<const Real>(ft.hidden), d_logits, *grads);
        step_backward(ft, d_hidden, prompt);
      }
    }

    const auto ids = ids_of(s->caption);
    const double inv_steps = inv_batch / static_cast<double>(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      // Position 0 is predicted from the image alone.
      const std::span<const TokenId> prev = k == 0 ? std::span<const TokenId>() : std::span<const TokenId>(&ids[k - 1], 1);
      const auto ctx = mean_pool<Real>(p, prev);
      const auto ft = fuse_forward<Real>(p, v, ctx);
      const auto logits = affine<Real>(p, slices::bigram.w1(), slices::bigram.b1(), std::span<const Real>(ft.hidden));
      Vec<Real> d_logits;
      total += inv_steps * softmax_cross_entropy<Real>(logits, ids[k], grads ? &d_logits : nullptr);
      if (grads) {
        for (auto& d : d_logits) d = static_cast<Real>(static_cast<double>(d) * inv_steps);
        auto d_hidden = affine_backward<Real>(p, slices::bigram.w1(), slices::bigram.b1(),
                                              std::span<const Real>(ft.hidden), d_logits, *grads);
        step_backward(ft, d_hidden, prev);
      }
    }
    if (grads) vision_backward<Real>(p, vt, d_v, *grads);
  }
  if (!std::isfinite(total)) throw NumericError("caption loss is not finite");
  return total;
}

/// The archetype's training objective on one batch; fills `grads` when given.
template <class Real>
double model_loss(const Model& m, std::span<const Sample* const> batch, GradBuffer* grads) {
  if (m.archetype == Archetype::dual_encoder) return dual_encoder_loss<Real>(m, batch, grads);
  return caption_scorer_loss<Real>(m, batch, grads);
}

}  // namespace mbl
