#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mbl/error.hpp"
#include "mbl/rng.hpp"

namespace mbl {

/// Dense row-major float tensor. Rank 1 and 2 are all the models need.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape product " + std::to_string(numel_of(shape)));
    }
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    const std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }
  static Tensor vector(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }
  std::span<float> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
  }
};

/// Byte-level equality: distinguishes -0.0 from 0.0 and compares NaN payloads.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         (a.data.empty() || std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
}

/// Which model component a parameter belongs to. Freeze settings act on tags.
enum class Tag { vision, text, vision_proj, text_proj, decoder };

inline constexpr std::array<Tag, 5> kAllTags = {Tag::vision, Tag::text, Tag::vision_proj, Tag::text_proj,
                                                Tag::decoder};

inline std::string_view to_string(Tag t) {
  switch (t) {
    case Tag::vision: return "vision";
    case Tag::text: return "text";
    case Tag::vision_proj: return "vision_proj";
    case Tag::text_proj: return "text_proj";
    case Tag::decoder: return "decoder";
  }
  return "?";
}

inline Tag tag_from_string(std::string_view s) {
  for (Tag t : kAllTags) {
    if (to_string(t) == s) return t;
  }
  throw ParseError("unknown parameter tag '" + std::string(s) + "'", 0);
}

/// Set of frozen tags. Frozen parameters receive no gradient and are never written.
class FreezeMask {
 public:
  FreezeMask() = default;
  FreezeMask(std::initializer_list<Tag> frozen) {
    for (Tag t : frozen) freeze(t);
  }

  static FreezeMask none() { return {}; }
  static FreezeMask all() { return {Tag::vision, Tag::text, Tag::vision_proj, Tag::text_proj, Tag::decoder}; }

  void freeze(Tag t) { bits_[static_cast<std::size_t>(t)] = true; }
  bool frozen(Tag t) const { return bits_[static_cast<std::size_t>(t)]; }
  bool trainable(Tag t) const { return !frozen(t); }

  std::vector<Tag> frozen_tags() const {
    std::vector<Tag> out;
    for (Tag t : kAllTags) {
      if (frozen(t)) out.push_back(t);
    }
    return out;
  }

  bool operator==(const FreezeMask&) const = default;

 private:
  std::array<bool, kAllTags.size()> bits_{};
};

struct Param {
  Tag tag;
  Tensor value;
};

/// Named, tagged parameters. std::map keeps iteration lexicographic by name,
/// which every serializer and optimizer loop relies on for determinism.
class ParamSet {
 public:
  using Map = std::map<std::string, Param, std::less<>>;

  void add(std::string name, Tag tag, Tensor value) {
    if (entries_.contains(name)) throw ConsistencyError("duplicate parameter '" + name + "'");
    entries_.emplace(std::move(name), Param{tag, std::move(value)});
  }

  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

  const Param& entry(std::string_view name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConsistencyError("missing parameter '" + std::string(name) + "'");
    return it->second;
  }
  Param& entry(std::string_view name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConsistencyError("missing parameter '" + std::string(name) + "'");
    return it->second;
  }

  const Tensor& at(std::string_view name) const { return entry(name).value; }
  Tensor& at(std::string_view name) { return entry(name).value; }
  Tag tag_of(std::string_view name) const { return entry(name).tag; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) n += p.value.numel();
    return n;
  }
  std::size_t parameter_count(Tag tag) const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) {
      if (p.tag == tag) n += p.value.numel();
    }
    return n;
  }

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }

  /// Same names, tags and shapes, all values zero.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, p] : entries_) out.add(name, p.tag, Tensor::zeros(p.value.shape));
    return out;
  }

  /// Zero-valued copy restricted to trainable tags; the gradient container shape.
  ParamSet zeros_like(const FreezeMask& mask) const {
    ParamSet out;
    for (const auto& [name, p] : entries_) {
      if (mask.trainable(p.tag)) out.add(name, p.tag, Tensor::zeros(p.value.shape));
    }
    return out;
  }

 private:
  Map entries_;
};

inline bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  for (auto ib = b.begin(); ib != b.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.tag != ib->second.tag) return false;
    if (!bitwise_equal(ia->second.value, ib->second.value)) return false;
  }
  return true;
}

/// True when every tensor carrying `tag` is bitwise identical in both sets.
inline bool tag_bitwise_equal(const ParamSet& a, const ParamSet& b, Tag tag) {
  for (const auto& [name, p] : a) {
    if (p.tag != tag) continue;
    if (!b.contains(name) || !bitwise_equal(p.value, b.at(name))) return false;
  }
  for (const auto& [name, p] : b) {
    if (p.tag == tag && !a.contains(name)) return false;
  }
  return true;
}

/// Gaussian init scaled by 1/sqrt(fan_in); biases start at zero.
inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = -1.0) {
  const double s = scale > 0 ? scale : 1.0 / std::sqrt(static_cast<double>(cols));
  Tensor t = Tensor::zeros({rows, cols});
  for (float& v : t.data) v = static_cast<float>(rng.normal(0.0, s));
  return t;
}

}  // namespace mbl
