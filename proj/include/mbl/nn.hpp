#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mbl/tensor.hpp"

namespace mbl {

template <class Real>
using Vec = std::vector<Real>;

// ---------------------------------------------------------------------------
// Gradient accumulation
// ---------------------------------------------------------------------------

/// Per-parameter gradient sums in 64-bit. Frozen parameters get no slot, so a
/// backward pass cannot touch them even by accident.
class GradBuffer {
 public:
  struct Slot {
    Tag tag;
    std::vector<std::size_t> shape;
    std::vector<double> sum;
  };

  GradBuffer() = default;
  GradBuffer(const ParamSet& params, const FreezeMask& mask) {
    for (const auto& [name, p] : params) {
      if (mask.trainable(p.tag)) slots_.emplace(name, Slot{p.tag, p.value.shape, std::vector<double>(p.value.numel())});
    }
  }

  /// nullptr when the parameter is frozen.
  std::vector<double>* find(std::string_view name) {
    auto it = slots_.find(name);
    return it == slots_.end() ? nullptr : &it->second.sum;
  }
  const std::vector<double>* find(std::string_view name) const {
    auto it = slots_.find(name);
    return it == slots_.end() ? nullptr : &it->second.sum;
  }

  void scale(double s) {
    for (auto& [_, slot] : slots_) {
      for (double& v : slot.sum) v *= s;
    }
  }

  ParamSet to_params() const {
    ParamSet out;
    for (const auto& [name, slot] : slots_) {
      std::vector<float> data(slot.sum.size());
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(slot.sum[i]);
      out.add(name, slot.tag, Tensor(slot.shape, std::move(data)));
    }
    return out;
  }

  const std::map<std::string, Slot, std::less<>>& slots() const { return slots_; }

 private:
  std::map<std::string, Slot, std::less<>> slots_;
};

// ---------------------------------------------------------------------------
// Kernels. Real = float for training; Real = double for gradient checks.
// Dot products always accumulate in double.
// ---------------------------------------------------------------------------

namespace detail {

inline void require_shape(const Tensor& t, std::string_view name, std::vector<std::size_t> expected) {
  if (t.shape != expected) {
    std::string want, got;
    for (auto d : expected) want += (want.empty() ? "" : "x") + std::to_string(d);
    for (auto d : t.shape) got += (got.empty() ? "" : "x") + std::to_string(d);
    throw ShapeError("tensor '" + std::string(name) + "' has shape " + got + ", expected " + want);
  }
}

}  // namespace detail

/// y = W x + b.
template <class Real>
Vec<Real> affine(const ParamSet& params, const std::string& w_name, const std::string& b_name,
                 std::span<const Real> x) {
  const Tensor& w = params.at(w_name);
  const Tensor& b = params.at(b_name);
  if (w.rank() != 2 || w.cols() != x.size()) {
    throw ShapeError("tensor '" + w_name + "' expects input of width " + std::to_string(w.rank() == 2 ? w.cols() : 0) +
                     ", got " + std::to_string(x.size()));
  }
  detail::require_shape(b, b_name, {w.rows()});
  Vec<Real> y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double acc = b.data[r];
    const float* wr = w.data.data() + r * w.cols();
    for (std::size_t c = 0; c < x.size(); ++c) acc += static_cast<double>(wr[c]) * static_cast<double>(x[c]);
    y[r] = static_cast<Real>(acc);
  }
  return y;
}

/// Accumulates dW, db for y = W x + b and returns dL/dx.
template <class Real>
Vec<Real> affine_backward(const ParamSet& params, const std::string& w_name, const std::string& b_name,
                          std::span<const Real> x, std::span<const Real> dy, GradBuffer& grads) {
  const Tensor& w = params.at(w_name);
  if (auto* gw = grads.find(w_name)) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      if (dy[r] == Real(0)) continue;
      double* g = gw->data() + r * w.cols();
      for (std::size_t c = 0; c < w.cols(); ++c) g[c] += static_cast<double>(dy[r]) * static_cast<double>(x[c]);
    }
  }
  if (auto* gb = grads.find(b_name)) {
    for (std::size_t r = 0; r < w.rows(); ++r) (*gb)[r] += static_cast<double>(dy[r]);
  }
  Vec<Real> dx(w.cols());
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) acc += static_cast<double>(w.data[r * w.cols() + c]) * static_cast<double>(dy[r]);
    dx[c] = static_cast<Real>(acc);
  }
  return dx;
}

template <class Real>
double dot(std::span<const Real> a, std::span<const Real> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <class Real>
double l2_norm(std::span<const Real> a) {
  return std::sqrt(dot<Real>(a, a));
}

/// Unit vector along x. A zero vector has no direction and is an error.
template <class Real>
Vec<Real> l2_normalize(std::span<const Real> x, double* norm_out = nullptr) {
  const double n = l2_norm<Real>(x);
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateError("cannot normalize a zero-norm embedding");
  if (norm_out) *norm_out = n;
  Vec<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<Real>(static_cast<double>(x[i]) / n);
  return y;
}

/// Backward of y = x / |x| given y, |x| and dL/dy.
template <class Real>
Vec<Real> l2_normalize_backward(std::span<const Real> y, double norm, std::span<const Real> dy) {
  const double yg = dot<Real>(y, dy);
  Vec<Real> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    dx[i] = static_cast<Real>((static_cast<double>(dy[i]) - static_cast<double>(y[i]) * yg) / norm);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Two-layer MLP blocks
// ---------------------------------------------------------------------------

/// A contiguous block of parameters named "<prefix>.w1", "<prefix>.b1"
/// (and "<prefix>.w2", "<prefix>.b2" for two layers). Two layers compute
/// W2 tanh(W1 x + b1) + b2; one layer is affine. Projection heads normalize.
struct MlpSlice {
  std::string prefix;
  int layers = 2;
  bool normalize = false;

  std::string w1() const { return prefix + ".w1"; }
  std::string b1() const { return prefix + ".b1"; }
  std::string w2() const { return prefix + ".w2"; }
  std::string b2() const { return prefix + ".b2"; }
};

template <class Real>
struct MlpTrace {
  Vec<Real> input;
  Vec<Real> hidden;  // tanh output, empty for one layer
  Vec<Real> raw;     // pre-normalization output
  Vec<Real> output;
  double norm = 1.0;
};

template <class Real>
MlpTrace<Real> mlp_trace(const ParamSet& params, const MlpSlice& slice, std::span<const Real> x) {
  MlpTrace<Real> t;
  t.input.assign(x.begin(), x.end());
  if (slice.layers == 2) {
    t.hidden = affine<Real>(params, slice.w1(), slice.b1(), x);
    for (Real& h : t.hidden) h = static_cast<Real>(std::tanh(static_cast<double>(h)));
    t.raw = affine<Real>(params, slice.w2(), slice.b2(), std::span<const Real>(t.hidden));
  } else {
    t.raw = affine<Real>(params, slice.w1(), slice.b1(), x);
  }
  if (slice.normalize) {
    t.output = l2_normalize<Real>(t.raw, &t.norm);
  } else {
    t.output = t.raw;
  }
  return t;
}

/// Backpropagates `upstream` (dL/d output) through the block; returns dL/d input.
template <class Real>
Vec<Real> mlp_backprop(const ParamSet& params, const MlpSlice& slice, const MlpTrace<Real>& t,
                       std::span<const Real> upstream, GradBuffer& grads) {
  if (upstream.size() != t.output.size()) {
    throw ShapeError("upstream gradient for '" + slice.prefix + "' has width " + std::to_string(upstream.size()) +
                     ", expected " + std::to_string(t.output.size()));
  }
  Vec<Real> d_raw = slice.normalize ? l2_normalize_backward<Real>(t.output, t.norm, upstream)
                                    : Vec<Real>(upstream.begin(), upstream.end());
  if (slice.layers == 1) {
    return affine_backward<Real>(params, slice.w1(), slice.b1(), t.input, d_raw, grads);
  }
  Vec<Real> d_hidden = affine_backward<Real>(params, slice.w2(), slice.b2(), t.hidden, d_raw, grads);
  for (std::size_t i = 0; i < d_hidden.size(); ++i) {
    const double h = static_cast<double>(t.hidden[i]);
    d_hidden[i] = static_cast<Real>(static_cast<double>(d_hidden[i]) * (1.0 - h * h));
  }
  return affine_backward<Real>(params, slice.w1(), slice.b1(), t.input, d_hidden, grads);
}

inline Tensor mlp_forward(const ParamSet& params, const MlpSlice& slice, const Tensor& x) {
  return Tensor::vector(mlp_trace<float>(params, slice, std::span<const float>(x.data)).output);
}

/// Gradients of <upstream, mlp(x)> for every trainable parameter of the slice.
inline ParamSet mlp_backward(const ParamSet& params, const MlpSlice& slice, const Tensor& x, const Tensor& upstream,
                             const FreezeMask& mask = FreezeMask::none()) {
  ParamSet slice_params;
  for (const auto& [name, p] : params) {
    if (name.starts_with(slice.prefix + ".")) slice_params.add(name, p.tag, p.value);
  }
  auto trace = mlp_trace<float>(params, slice, std::span<const float>(x.data));
  GradBuffer grads(slice_params, mask);
  mlp_backprop<float>(params, slice, trace, std::span<const float>(upstream.data), grads);
  return grads.to_params();
}

// ---------------------------------------------------------------------------
// Similarity and losses
// ---------------------------------------------------------------------------

template <class Real>
double cosine_similarity(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity on vectors of width " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  const double na = l2_norm<Real>(a), nb = l2_norm<Real>(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateError("cosine similarity is undefined for a zero vector");
  return std::clamp(dot<Real>(a, b) / (na * nb), -1.0, 1.0);
}

inline double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
  return cosine_similarity<float>(std::span<const float>(a), std::span<const float>(b));
}

template <class Real>
struct ContrastiveResult {
  double loss = 0.0;
  std::vector<Vec<Real>> grad_image;
  std::vector<Vec<Real>> grad_text;
};

/// Symmetric InfoNCE over a batch of matched (image, text) embeddings:
/// the mean of image->text and text->image cross-entropies of the
/// similarity matrix divided by the temperature.
template <class Real>
ContrastiveResult<Real> info_nce(const std::vector<Vec<Real>>& images, const std::vector<Vec<Real>>& texts,
                                 double temperature) {
  const std::size_t batch = images.size();
  if (batch < 2) throw PreconditionError("contrastive loss needs a batch of at least 2, got " + std::to_string(batch));
  if (texts.size() != batch) throw ShapeError("image and text batches differ in size");
  if (!(temperature > 0.0)) throw PreconditionError("temperature must be positive");

  std::vector<double> logits(batch * batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j) {
      logits[i * batch + j] = dot<Real>(images[i], texts[j]) / temperature;
    }
  }
  // dL/dlogits accumulates both directions.
  std::vector<double> dlogits(batch * batch, 0.0);
  double loss = 0.0;
  const double half_over_b = 0.5 / static_cast<double>(batch);
  for (std::size_t i = 0; i < batch; ++i) {  // rows: image -> text
    double mx = logits[i * batch];
    for (std::size_t j = 1; j < batch; ++j) mx = std::max(mx, logits[i * batch + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < batch; ++j) z += std::exp(logits[i * batch + j] - mx);
    loss += half_over_b * (std::log(z) + mx - logits[i * batch + i]);
    for (std::size_t j = 0; j < batch; ++j) {
      dlogits[i * batch + j] += half_over_b * (std::exp(logits[i * batch + j] - mx) / z - (i == j ? 1.0 : 0.0));
    }
  }
  for (std::size_t j = 0; j < batch; ++j) {  // columns: text -> image
    double mx = logits[j];
    for (std::size_t i = 1; i < batch; ++i) mx = std::max(mx, logits[i * batch + j]);
    double z = 0.0;
    for (std::size_t i = 0; i < batch; ++i) z += std::exp(logits[i * batch + j] - mx);
    loss += half_over_b * (std::log(z) + mx - logits[j * batch + j]);
    for (std::size_t i = 0; i < batch; ++i) {
      dlogits[i * batch + j] += half_over_b * (std::exp(logits[i * batch + j] - mx) / z - (i == j ? 1.0 : 0.0));
    }
  }
  if (!std::isfinite(loss)) throw NumericError("contrastive loss is not finite");

  ContrastiveResult<Real> out;
  out.loss = loss;
  const std::size_t dim = images[0].size();
  out.grad_image.assign(batch, Vec<Real>(dim));
  out.grad_text.assign(batch, Vec<Real>(dim));
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t d = 0; d < dim; ++d) {
      double gi = 0.0, gt = 0.0;
      for (std::size_t j = 0; j < batch; ++j) {
        gi += dlogits[i * batch + j] * static_cast<double>(texts[j][d]);
        gt += dlogits[j * batch + i] * static_cast<double>(images[j][d]);
      }
      out.grad_image[i][d] = static_cast<Real>(gi / temperature);
      out.grad_text[i][d] = static_cast<Real>(gt / temperature);
    }
  }
  return out;
}

struct InfoNceResult {
  double loss = 0.0;
  Tensor grad_image;  // B x D
  Tensor grad_text;   // B x D
};

/// Tensor front end for `info_nce`: rows of `images`/`texts` are embeddings.
inline InfoNceResult info_nce_loss(const Tensor& images, const Tensor& texts, float temperature) {
  if (images.rank() != 2 || texts.rank() != 2 || images.shape != texts.shape) {
    throw ShapeError("info_nce_loss expects two B x D matrices of equal shape");
  }
  std::vector<Vec<float>> im, tx;
  for (std::size_t i = 0; i < images.rows(); ++i) {
    im.emplace_back(images.row(i).begin(), images.row(i).end());
    tx.emplace_back(texts.row(i).begin(), texts.row(i).end());
  }
  auto r = info_nce<float>(im, tx, temperature);
  InfoNceResult out{r.loss, Tensor::zeros(images.shape), Tensor::zeros(texts.shape)};
  for (std::size_t i = 0; i < images.rows(); ++i) {
    std::copy(r.grad_image[i].begin(), r.grad_image[i].end(), out.grad_image.row(i).begin());
    std::copy(r.grad_text[i].begin(), r.grad_text[i].end(), out.grad_text.row(i).begin());
  }
  return out;
}

/// Softmax cross-entropy of `logits` against class `target`; writes dL/dlogits.
template <class Real>
double softmax_cross_entropy(std::span<const Real> logits, std::size_t target, Vec<Real>* dlogits = nullptr) {
  double mx = static_cast<double>(logits[0]);
  for (Real v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (Real v : logits) z += std::exp(static_cast<double>(v) - mx);
  const double loss = std::log(z) + mx - static_cast<double>(logits[target]);
  if (dlogits) {
    dlogits->resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
      (*dlogits)[k] = static_cast<Real>(std::exp(static_cast<double>(logits[k]) - mx) / z - (k == target ? 1.0 : 0.0));
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizer and gradient check
// ---------------------------------------------------------------------------

/// theta <- theta - lr * g for trainable entries. Frozen entries are copied
/// verbatim, even when `grads` happens to carry them.
inline ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, float lr, const FreezeMask& mask) {
  if (!(lr > 0.0f)) throw PreconditionError("learning rate must be positive");
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw ConsistencyError("gradient for unknown parameter '" + name + "'");
    if (g.value.shape != params.at(name).shape) throw ShapeError("gradient for '" + name + "' has the wrong shape");
  }
  ParamSet out = params;
  for (auto& [name, p] : out) {
    if (mask.frozen(p.tag) || !grads.contains(name)) continue;
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      p.value.data[i] = static_cast<float>(static_cast<double>(p.value.data[i]) - static_cast<double>(lr) * g.data[i]);
    }
  }
  return out;
}

/// In-place variant on a 64-bit gradient buffer, used by the training loops.
inline void sgd_apply(ParamSet& params, const GradBuffer& grads, float lr) {
  for (const auto& [name, slot] : grads.slots()) {
    Tensor& t = params.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      t.data[i] = static_cast<float>(static_cast<double>(t.data[i]) - static_cast<double>(lr) * slot.sum[i]);
    }
  }
}

struct GradcheckOptions {
  double eps = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded sample per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Denominator floor, so gradients near zero are compared absolutely.
  double floor = 1e-4;
};

/// Worst relative error between `analytic` and central differences of `loss`.
/// Each weight is perturbed by +-eps; the step actually representable in
/// float is used as the divisor so parameter rounding does not leak into the
/// estimate. `loss` should evaluate in double precision.
inline double finite_diff_gradcheck(const ParamSet& params, const ParamSet& analytic,
                                    const std::function<double(const ParamSet&)>& loss,
                                    const GradcheckOptions& opt = {}) {
  if (!(opt.eps > 0.0)) throw PreconditionError("finite-difference step must be positive");
  ParamSet probe = params;
  Rng rng(opt.seed);
  double worst = 0.0;
  for (const auto& [name, g] : analytic) {
    Tensor& t = probe.at(name);
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_tensor && coords.size() > opt.max_coords_per_tensor) {
      for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(opt.max_coords_per_tensor);
    }
    for (std::size_t idx : coords) {
      const float orig = t.data[idx];
      const float up = static_cast<float>(orig + opt.eps);
      const float down = static_cast<float>(orig - opt.eps);
      t.data[idx] = up;
      const double lp = loss(probe);
      t.data[idx] = down;
      const double lm = loss(probe);
      t.data[idx] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm)) throw NumericError("loss is not finite near '" + name + "'");
      const double numeric = (lp - lm) / (static_cast<double>(up) - static_cast<double>(down));
      const double a = g.value.data[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mbl
