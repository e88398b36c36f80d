#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mbl/error.hpp"
#include "mbl/rng.hpp"
#include "mbl/vocab.hpp"

namespace mbl {

// ---------------------------------------------------------------------------
// Gender and role-tagged captions
// ---------------------------------------------------------------------------

enum class Gender { male, female, unknown };

inline std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::male: return "male";
    case Gender::female: return "female";
    case Gender::unknown: return "unknown";
  }
  return "?";
}

inline Gender gender_from_string(std::string_view s) {
  if (s == "male") return Gender::male;
  if (s == "female") return Gender::female;
  if (s == "unknown") return Gender::unknown;
  throw ParseError("unknown gender '" + std::string(s) + "'", 0);
}

inline Gender opposite(Gender g) {
  if (g == Gender::male) return Gender::female;
  if (g == Gender::female) return Gender::male;
  return Gender::unknown;
}

/// Grammatical role of a gendered pronoun. "her" is both possessive and
/// objective, so swapping it needs the role.
enum class Role : std::uint8_t { none, subj, poss, obj };

struct TaggedToken {
  TokenId id = 0;
  Role role = Role::none;
  bool operator==(const TaggedToken&) const = default;
};

using TokenList = std::vector<TaggedToken>;

/// Plain ids, dropping role tags; what the encoders consume.
inline std::vector<TokenId> ids_of(const TokenList& tokens) {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.id);
  return out;
}

namespace detail {

inline Role default_role(std::string_view word) {
  if (word == "he" || word == "she") return Role::subj;
  if (word == "his") return Role::poss;
  if (word == "him") return Role::obj;
  return Role::none;
}

/// Lowercased words of `text`, with '.' and ',' split off as their own tokens.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (ch == '.' || ch == ',') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

}  // namespace detail

/// Tokenizes a raw caption and assigns pronoun roles. "her" is possessive
/// when a noun phrase follows it, objective before punctuation, a function
/// word or the end of text; anything else is ambiguous and rejected.
inline TokenList tokenize(std::string_view text) {
  const auto words = detail::split_words(text);
  TokenList out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back({token_id(w), detail::default_role(w)});
  const TokenId her = token_id("her");
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].id != her) continue;
    if (i + 1 == out.size()) {
      out[i].role = Role::obj;
      continue;
    }
    switch (token_class(out[i + 1].id)) {
      case WordClass::noun:
      case WordClass::modifier:
      case WordClass::adjective: out[i].role = Role::poss; break;
      case WordClass::punct:
      case WordClass::function: out[i].role = Role::obj; break;
      default:
        throw TaggingError("cannot tell whether 'her' at position " + std::to_string(i) +
                           " is possessive or objective");
    }
  }
  return out;
}

/// Sentence-cased text with punctuation attached to the preceding word.
inline std::string render(const TokenList& tokens) {
  std::string out;
  bool sentence_start = true;
  for (const auto& t : tokens) {
    const auto word = token_text(t.id);
    if (token_class(t.id) == WordClass::punct) {
      out += word;
      if (word == ".") sentence_start = true;
      continue;
    }
    if (!out.empty()) out += ' ';
    std::string w(word);
    if (sentence_start) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    out += w;
    sentence_start = false;
  }
  return out;
}

/// Rule-based gender labeler over raw text. Scans the lowercased word list and
/// returns the gender of the first gendered term; unknown when none occurs.
inline Gender annotate_gender(std::string_view caption) {
  static constexpr std::array<std::string_view, 6> female = {"she", "her", "hers", "lady", "woman", "female"};
  static constexpr std::array<std::string_view, 6> male = {"he", "his", "him", "gentleman", "man", "male"};
  std::string word;
  auto classify = [&]() -> Gender {
    for (auto f : female) {
      if (word == f) return Gender::female;
    }
    for (auto m : male) {
      if (word == m) return Gender::male;
    }
    return Gender::unknown;
  };
  for (std::size_t i = 0; i <= caption.size(); ++i) {
    const char ch = i < caption.size() ? caption[i] : ' ';
    if (std::isalpha(static_cast<unsigned char>(ch))) {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      continue;
    }
    if (!word.empty()) {
      if (Gender g = classify(); g != Gender::unknown) return g;
      word.clear();
    }
  }
  return Gender::unknown;
}

/// Same rule applied to a token list.
inline Gender annotate_gender(const TokenList& tokens) {
  for (const auto& t : tokens) {
    const auto w = token_text(t.id);
    if (w == "she" || w == "her" || w == "lady" || w == "woman" || w == "female") return Gender::female;
    if (w == "he" || w == "his" || w == "him" || w == "gentleman" || w == "man" || w == "male") return Gender::male;
  }
  return Gender::unknown;
}

inline bool is_gendered(TokenId id) {
  const auto cls = token_class(id);
  return cls == WordClass::pronoun || cls == WordClass::gender_noun;
}

/// Counterfactual gender swap. he<->she, his<->her(poss), him<->her(obj),
/// gentleman<->lady, man<->woman, male<->female; everything else unchanged.
inline TokenList cda_swap(const TokenList& tokens) {
  static const TokenId he = token_id("he"), she = token_id("she"), his = token_id("his"), her = token_id("her"),
                       him = token_id("him"), gentleman = token_id("gentleman"), lady = token_id("lady"),
                       man = token_id("man"), woman = token_id("woman"), male = token_id("male"),
                       female = token_id("female");
  TokenList out = tokens;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& t = out[i];
    if (t.id == he) t = {she, Role::subj};
    else if (t.id == she) t = {he, Role::subj};
    else if (t.id == his) t = {her, Role::poss};
    else if (t.id == him) t = {her, Role::obj};
    else if (t.id == her) {
      if (t.role == Role::poss) t = {his, Role::poss};
      else if (t.role == Role::obj) t = {him, Role::obj};
      else throw TaggingError("'her' at position " + std::to_string(i) + " carries no role tag");
    }
    else if (t.id == gentleman) t.id = lady;
    else if (t.id == lady) t.id = gentleman;
    else if (t.id == man) t.id = woman;
    else if (t.id == woman) t.id = man;
    else if (t.id == male) t.id = female;
    else if (t.id == female) t.id = male;
  }
  return out;
}

/// Raw-string convenience: tokenize, swap, render.
inline std::string cda_swap(std::string_view caption) { return render(cda_swap(tokenize(caption))); }

/// Tokens preceding the first gendered token: the context a caption decoder
/// sees before it has to commit to a pronoun.
inline std::vector<TokenId> pronoun_prompt(const TokenList& tokens) {
  std::vector<TokenId> out;
  for (const auto& t : tokens) {
    if (is_gendered(t.id)) break;
    out.push_back(t.id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// Ratings 0-5. Beard and age are stored in positive polarity (more beard,
/// older), the inverse of the source dataset's "No Beard" and "Young".
struct AttributeRatings {
  int bangs = 0;
  int eyeglasses = 0;
  int beard = 0;
  int smiling = 0;
  int age = 0;

  bool operator==(const AttributeRatings&) const = default;

  void validate() const {
    for (int v : {bangs, eyeglasses, beard, smiling, age}) {
      if (v < 0 || v > 5) throw PreconditionError("attribute rating " + std::to_string(v) + " outside [0, 5]");
    }
  }
};

inline constexpr std::size_t kImageDim = 16;
using ImageFeatures = std::array<float, kImageDim>;

struct Sample {
  std::uint64_t id = 0;
  AttributeRatings attributes;
  std::size_t occupation = 0;
  Gender gender = Gender::unknown;
  bool stereotypical = false;
  TokenList caption;
  ImageFeatures image_features{};

  std::string caption_text() const { return render(caption); }
  bool operator==(const Sample&) const = default;
};

/// Thresholds for the stereotype labeler; defaults are the shipped rules.
struct StereotypeThresholds {
  int male_min_beard = 1;
  int male_max_bangs = 1;
  int female_max_beard = 0;
  int female_min_bangs = 2;
  int female_min_smiling = 2;
};

/// male: beard >= 1 and bangs <= 1. female: beard == 0 and (bangs >= 2 or smiling >= 2).
inline bool annotate_stereotype(const AttributeRatings& a, Gender gender, const StereotypeThresholds& th = {}) {
  switch (gender) {
    case Gender::male: return a.beard >= th.male_min_beard && a.bangs <= th.male_max_bangs;
    case Gender::female:
      return a.beard <= th.female_max_beard && (a.bangs >= th.female_min_bangs || a.smiling >= th.female_min_smiling);
    case Gender::unknown: break;
  }
  throw PreconditionError("stereotype annotation needs a male or female label");
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

enum class BiasChannel { none, vision, text, both };

inline std::string_view to_string(BiasChannel c) {
  switch (c) {
    case BiasChannel::none: return "none";
    case BiasChannel::vision: return "vision";
    case BiasChannel::text: return "text";
    case BiasChannel::both: return "both";
  }
  return "?";
}

inline BiasChannel bias_channel_from_string(std::string_view s) {
  if (s == "none") return BiasChannel::none;
  if (s == "vision") return BiasChannel::vision;
  if (s == "text") return BiasChannel::text;
  if (s == "both") return BiasChannel::both;
  throw ValidationError("unknown bias channel '" + std::string(s) + "'");
}

struct GenSpec {
  std::size_t n_samples = 600;
  std::uint64_t seed = 1;
  BiasChannel bias_channel = BiasChannel::none;
  double bias_strength = 0.0;
  double gender_occupation_correlation = 0.5;
  double noise_sigma = 0.1;

  void validate() const {
    if (n_samples == 0) throw EmptyDataError("generation spec asks for zero samples");
    if (bias_strength < 0.0 || bias_strength > 1.0) throw ValidationError("bias_strength must lie in [0, 1]");
    if (gender_occupation_correlation < 0.0 || gender_occupation_correlation > 1.0) {
      throw ValidationError("gender_occupation_correlation must lie in [0, 1]");
    }
    if (noise_sigma < 0.0) throw ValidationError("noise_sigma must be non-negative");
  }

  bool vision_biased() const { return bias_channel == BiasChannel::vision || bias_channel == BiasChannel::both; }
  bool text_biased() const { return bias_channel == BiasChannel::text || bias_channel == BiasChannel::both; }
};

/// Gender-signal magnitude in images when the vision channel carries no planted bias.
inline constexpr double kBaselineGenderSignal = 0.15;

/// Layout of the 16 image features.
namespace feature {
inline constexpr std::size_t kRatings = 0;     // 5 dims: bangs, eyeglasses, beard, smiling, age (/5)
inline constexpr std::size_t kGender = 5;      // 1 dim: +s for male, -s for female
inline constexpr std::size_t kOccupation = 6;  // 8 dims: one-hot
inline constexpr std::size_t kNoise = 14;      // 2 dims
}  // namespace feature

namespace detail {

inline AttributeRatings draw_attributes(Rng& rng, Gender g, bool stereotypical) {
  AttributeRatings a;
  a.eyeglasses = rng.between(0, 5);
  a.age = rng.between(0, 5);
  a.smiling = rng.between(0, 5);
  if (g == Gender::male) {
    if (stereotypical) {
      a.beard = rng.between(1, 5);
      a.bangs = rng.between(0, 1);
    } else if (rng.bernoulli(0.75)) {
      a.beard = 0;
      a.bangs = rng.between(0, 5);
    } else {
      a.beard = rng.between(1, 5);
      a.bangs = rng.between(2, 5);
    }
  } else {
    if (stereotypical) {
      a.beard = 0;
      do {
        a.bangs = rng.between(0, 5);
        a.smiling = rng.between(0, 5);
      } while (a.bangs < 2 && a.smiling < 2);
    } else if (rng.bernoulli(0.8)) {
      a.beard = 0;
      a.bangs = rng.between(0, 1);
      a.smiling = rng.between(0, 1);
    } else {
      a.beard = rng.between(1, 2);
      a.bangs = rng.between(0, 5);
    }
  }
  return a;
}

inline std::string_view quantity(int rating) {
  if (rating == 0) return "no";
  return rating <= 2 ? "some" : "thick";
}

inline std::string_view smile_quantity(int rating) {
  if (rating == 0) return "no";
  return rating <= 2 ? "some" : "big";
}

inline std::string_view age_word(int rating) {
  if (rating <= 1) return "young";
  return rating <= 3 ? "middle-aged" : "old";
}

/// Caption from fixed templates: a gendered opener and one or two attribute
/// clauses. Occupation words appear only when the text channel is biased.
inline TokenList build_caption(Rng& rng, const AttributeRatings& a, Gender g, std::size_t occupation,
                               bool include_occupation) {
  const bool m = g == Gender::male;
  TokenList t;
  auto word = [&](std::string_view w, Role r = Role::none) { t.push_back({token_id(w), r}); };
  auto subj = [&] { word(m ? "he" : "she", Role::subj); };
  auto poss = [&] { word(m ? "his" : "her", Role::poss); };
  auto obj = [&] { word(m ? "him" : "her", Role::obj); };

  if (include_occupation) {
    word("the");
    word(kOccupationNames.at(occupation));
    word(".");
  }
  const double opener = rng.uniform();
  if (opener < 0.5) {
    subj();
  } else if (opener < 0.75) {
    word("this");
    word(m ? "gentleman" : "lady");
  } else {
    word("this");
    word(m ? "man" : "woman");
  }

  enum Clause { bangs, beard, smile, age, glasses };
  const Clause first = static_cast<Clause>(rng.below(5));
  Clause second = first;
  const bool two = rng.bernoulli(0.5);
  if (two) second = static_cast<Clause>((first + 1 + rng.below(4)) % 5);
  auto clause = [&](Clause c) {
    switch (c) {
      case bangs: word("has"); word(quantity(a.bangs)); word("bangs"); break;
      case beard: word("has"); word(quantity(a.beard)); word("beard"); break;
      case smile: word("has"); word(smile_quantity(a.smiling)); word("smile"); word("on"); poss(); word("face"); break;
      case age: word("looks"); word(age_word(a.age)); break;
      case glasses:
        if (a.eyeglasses >= 3) {
          word("wears");
          word("eyeglasses");
        } else {
          word("has");
          word("no");
          word("eyeglasses");
        }
        break;
    }
  };
  clause(first);
  if (two) {
    word("and");
    clause(second);
  }
  word(".");
  if (a.eyeglasses >= 3 && rng.bernoulli(0.3)) {
    word("eyeglasses");
    word("suit");
    obj();
    word(".");
  }
  return t;
}

}  // namespace detail

/// Gender-feature noise as a fraction of noise_sigma.
inline constexpr double kGenderNoiseScale = 0.5;

/// One synthetic person. `vision_signal` scales the gender feature;
/// `stereo_prob` is the chance of stereotype-consistent attributes.
inline Sample make_person(Rng& rng, std::uint64_t id, Gender gender, std::size_t occupation, double vision_signal,
                          double stereo_prob, double noise_sigma, bool caption_occupation) {
  Sample s;
  s.id = id;
  s.gender = gender;
  s.occupation = occupation;
  const bool look = rng.bernoulli(stereo_prob);
  s.attributes = detail::draw_attributes(rng, gender, look);
  s.stereotypical = annotate_stereotype(s.attributes, gender);
  s.caption = detail::build_caption(rng, s.attributes, gender, occupation, caption_occupation);

  const auto& a = s.attributes;
  const std::array<int, 5> ratings = {a.bangs, a.eyeglasses, a.beard, a.smiling, a.age};
  for (std::size_t i = 0; i < 5; ++i) s.image_features[feature::kRatings + i] = static_cast<float>(ratings[i] / 5.0);
  const double sign = gender == Gender::male ? 1.0 : -1.0;
  s.image_features[feature::kGender] =
      static_cast<float>(sign * vision_signal + rng.normal(0.0, kGenderNoiseScale * noise_sigma));
  s.image_features[feature::kOccupation + occupation] = 1.0f;
  for (std::size_t i = 0; i < 2; ++i) s.image_features[feature::kNoise + i] = static_cast<float>(rng.normal(0.0, noise_sigma));
  return s;
}

/// Occupation draw. Men take a male-coded job with probability `correlation`;
/// women are spread uniformly over the roster, so at correlation 1 every
/// female-coded job is held by a woman while male-coded jobs stay mixed.
inline std::size_t draw_occupation(Rng& rng, Gender g, double correlation) {
  const std::size_t half = kOccupations / 2;
  if (g == Gender::male) {
    const bool congruent = rng.bernoulli(correlation);
    return (congruent ? 0 : half) + rng.below(half);
  }
  const bool female_coded = rng.bernoulli(0.5);
  return (female_coded ? half : 0) + rng.below(half);
}

/// Probability that a person has stereotype-consistent attributes. Looks
/// are coupled to job congruence, scaled so each gender keeps the same
/// overall stereotypical rate regardless of how segregated its jobs are.
inline constexpr double kStereotypeBase = 0.2;
inline constexpr double kLookJobCoupling = 0.3;

inline double stereotype_probability(const GenSpec& spec, Gender g, std::size_t occupation) {
  const double base = kStereotypeBase;
  const double coupling = kLookJobCoupling;
  const double q = g == Gender::male ? spec.gender_occupation_correlation : 0.5;  // congruent share
  const bool congruent = (g == Gender::female) == occupation_is_female_coded(occupation);
  return std::clamp(congruent ? base + coupling * (1.0 - q) : base - coupling * q, 0.0, 1.0);
}

inline std::vector<Sample> generate_dataset(const GenSpec& spec) {
  spec.validate();
  const double vision_signal = spec.vision_biased() ? spec.bias_strength : kBaselineGenderSignal;
  std::vector<Sample> out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    Rng rng = Rng::derive(spec.seed, i + 1);
    const Gender g = rng.bernoulli(0.5) ? Gender::male : Gender::female;
    const std::size_t occ = draw_occupation(rng, g, spec.gender_occupation_correlation);
    out.push_back(make_person(rng, i, g, occ, vision_signal, stereotype_probability(spec, g, occ), spec.noise_sigma,
                              spec.text_biased()));
  }
  return out;
}

/// Re-derives gender from the caption and stereotypicality from the ratings.
/// Returns the number of unknown-gender samples removed.
inline std::size_t annotate_dataset(std::vector<Sample>& samples, const StereotypeThresholds& th = {}) {
  std::vector<Sample> kept;
  kept.reserve(samples.size());
  std::size_t pruned = 0;
  for (auto& s : samples) {
    s.gender = annotate_gender(s.caption);
    if (s.gender == Gender::unknown) {
      ++pruned;
      continue;
    }
    s.stereotypical = annotate_stereotype(s.attributes, s.gender, th);
    kept.push_back(std::move(s));
  }
  samples = std::move(kept);
  return pruned;
}

// ---------------------------------------------------------------------------
// Line-delimited dataset file
// ---------------------------------------------------------------------------

inline std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// One record per line; field order is fixed and floats carry 9 significant digits.
inline std::string serialize_sample(const Sample& s) {
  const auto& a = s.attributes;
  std::string line = "{\"id\":" + std::to_string(s.id) + ",\"attributes\":{\"bangs\":" + std::to_string(a.bangs) +
                     ",\"eyeglasses\":" + std::to_string(a.eyeglasses) + ",\"beard\":" + std::to_string(a.beard) +
                     ",\"smiling\":" + std::to_string(a.smiling) + ",\"age\":" + std::to_string(a.age) + "}" +
                     ",\"occupation\":\"" + std::string(kOccupationNames.at(s.occupation)) + "\"" +
                     ",\"gender\":\"" + std::string(to_string(s.gender)) + "\"" +
                     ",\"stereotypical\":" + (s.stereotypical ? "true" : "false") +
                     ",\"caption\":" + nlohmann::json(s.caption_text()).dump() + ",\"image_features\":[";
  for (std::size_t i = 0; i < kImageDim; ++i) {
    if (i) line += ',';
    line += format_float(s.image_features[i]);
  }
  line += "]}";
  return line;
}

inline Sample parse_sample(std::string_view line, std::size_t line_no) {
  try {
    const auto j = nlohmann::json::parse(line);
    Sample s;
    s.id = j.at("id").get<std::uint64_t>();
    const auto& a = j.at("attributes");
    s.attributes = {a.at("bangs").get<int>(), a.at("eyeglasses").get<int>(), a.at("beard").get<int>(),
                    a.at("smiling").get<int>(), a.at("age").get<int>()};
    s.attributes.validate();
    s.occupation = occupation_from_string(j.at("occupation").get<std::string>());
    s.gender = gender_from_string(j.at("gender").get<std::string>());
    s.stereotypical = j.at("stereotypical").get<bool>();
    s.caption = tokenize(j.at("caption").get<std::string>());
    const auto& f = j.at("image_features");
    if (!f.is_array() || f.size() != kImageDim) throw ParseError("image_features must hold 16 numbers", 0);
    for (std::size_t i = 0; i < kImageDim; ++i) s.image_features[i] = f[i].get<float>();
    return s;
  } catch (const ParseError& e) {
    throw ParseError(e.what(), line_no);
  } catch (const std::exception& e) {
    throw ParseError(e.what(), line_no);
  }
}

struct DatasetReadResult {
  std::vector<Sample> samples;
  std::size_t pruned_unknown = 0;
};

inline void write_dataset(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& s : samples) out << serialize_sample(s) << '\n';
  if (!out) throw IoError("failed writing '" + path + "'");
}

/// Reads a dataset file, dropping unknown-gender rows and counting them.
inline DatasetReadResult read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  DatasetReadResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Sample s = parse_sample(line, line_no);
    if (s.gender == Gender::unknown) {
      ++result.pruned_unknown;
      continue;
    }
    result.samples.push_back(std::move(s));
  }
  return result;
}

}  // namespace mbl
