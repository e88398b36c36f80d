#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mbl/data.hpp"
#include "mbl/model.hpp"

namespace mbl {

enum class ProbeKind { oo, op };

inline std::string_view to_string(ProbeKind k) { return k == ProbeKind::oo ? "OO" : "OP"; }

inline ProbeKind probe_kind_from_string(std::string_view s) {
  if (s == "OO") return ProbeKind::oo;
  if (s == "OP") return ProbeKind::op;
  throw ParseError("unknown probe kind '" + std::string(s) + "'", 0);
}

/// One occupation-resolution item. OO shows the occupation holder alone; OP
/// averages the holder's features with a participant's. The two captions
/// differ only in the gendered pronoun.
struct Probe {
  std::uint64_t id = 0;
  ProbeKind kind = ProbeKind::oo;
  ImageFeatures image{};
  TokenList caption_male;
  TokenList caption_female;
  Gender true_gender = Gender::male;
  Gender participant_gender = Gender::unknown;  // OP only
  std::size_t occupation = 0;
};

namespace detail {

inline TokenList probe_caption(std::size_t occupation, Gender g, ProbeKind kind) {
  const bool m = g == Gender::male;
  return {{token_id("the"), Role::none},
          {token_id(kOccupationNames.at(occupation)), Role::none},
          {token_id("."), Role::none},
          {token_id(m ? "he" : "she"), Role::subj},
          {token_id("looks"), Role::none},
          {token_id("at"), Role::none},
          {token_id(m ? "his" : "her"), Role::poss},
          {token_id(kind == ProbeKind::oo ? "desk" : "client"), Role::none},
          {token_id("."), Role::none}};
}

}  // namespace detail

/// Probe people come from the generator with no planted bias: baseline
/// gender signal, no coupling between looks and jobs.
inline std::vector<Probe> build_probes(std::uint64_t seed, std::size_t n_per_cell) {
  if (n_per_cell == 0) throw PreconditionError("n_per_cell must be at least 1");
  GenSpec neutral;
  const double stereo = stereotype_probability(neutral, Gender::male, 0);
  std::vector<Probe> probes;
  std::uint64_t next_id = 0;
  auto person = [&](Rng& rng, Gender g, std::size_t occ) {
    return make_person(rng, 0, g, occ, kBaselineGenderSignal, stereo, neutral.noise_sigma, false);
  };
  for (ProbeKind kind : {ProbeKind::oo, ProbeKind::op}) {
    for (std::size_t occ = 0; occ < kOccupations; ++occ) {
      for (Gender g : {Gender::male, Gender::female}) {
        const std::vector<Gender> participants =
            kind == ProbeKind::oo ? std::vector<Gender>{Gender::unknown} : std::vector<Gender>{Gender::male, Gender::female};
        for (Gender pg : participants) {
          for (std::size_t k = 0; k < n_per_cell; ++k) {
            Probe p;
            p.id = next_id++;
            Rng rng = Rng::derive(seed ^ 0x9B0BEull, p.id + 1);
            p.kind = kind;
            p.occupation = occ;
            p.true_gender = g;
            p.participant_gender = pg;
            const Sample holder = person(rng, g, occ);
            p.image = holder.image_features;
            if (kind == ProbeKind::op) {
              Sample other = person(rng, pg, occ);
              for (std::size_t i = 0; i < kOccupations; ++i) other.image_features[feature::kOccupation + i] = 0.0f;
              for (std::size_t i = 0; i < kImageDim; ++i) {
                p.image[i] = static_cast<float>(0.5 * (static_cast<double>(holder.image_features[i]) +
                                                       static_cast<double>(other.image_features[i])));
              }
            }
            p.caption_male = detail::probe_caption(occ, Gender::male, kind);
            p.caption_female = detail::probe_caption(occ, Gender::female, kind);
            probes.push_back(std::move(p));
          }
        }
      }
    }
  }
  return probes;
}

/// Dual encoder: the caption with the higher similarity. Caption scorer: the
/// larger pronoun logit given the caption prefix. Exact ties go to male.
inline Gender resolve_probe(const Model& m, const Probe& p) {
  if (m.archetype == Archetype::dual_encoder) {
    const auto img = encode_image(m, p.image);
    const auto tm = encode_text(m, ids_of(p.caption_male));
    const auto tf = encode_text(m, ids_of(p.caption_female));
    const double sm = dot<float>(img, tm), sf = dot<float>(img, tf);
    return sm >= sf ? Gender::male : Gender::female;
  }
  const auto prompt = pronoun_prompt(p.caption_male);
  const auto logits = gender_logits(m, p.image, prompt);
  return logits.male >= logits.female ? Gender::male : Gender::female;
}

/// Resolution accuracy per gender and the derived average and gap.
struct MetricCell {
  double ra_m = 0.0;
  double ra_f = 0.0;
  double ra_avg = 0.0;
  double gg = 0.0;
  std::size_t n_m = 0;
  std::size_t n_f = 0;

  bool operator==(const MetricCell&) const = default;
};

inline MetricCell metrics_from_counts(std::size_t correct_m, std::size_t n_m, std::size_t correct_f, std::size_t n_f) {
  if (n_m == 0 || n_f == 0) throw DegenerateError("resolution accuracy is undefined without probes of both genders");
  MetricCell c;
  c.n_m = n_m;
  c.n_f = n_f;
  c.ra_m = static_cast<double>(correct_m) / static_cast<double>(n_m);
  c.ra_f = static_cast<double>(correct_f) / static_cast<double>(n_f);
  c.ra_avg = (c.ra_m + c.ra_f) / 2.0;
  c.gg = std::abs(c.ra_m - c.ra_f);
  return c;
}

inline MetricCell compute_metrics(const std::vector<Gender>& predictions, const std::vector<Probe>& probes) {
  if (predictions.size() != probes.size()) throw PreconditionError("need exactly one prediction per probe");
  std::size_t cm = 0, nm = 0, cf = 0, nf = 0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const bool ok = predictions[i] == probes[i].true_gender;
    if (probes[i].true_gender == Gender::male) {
      ++nm;
      cm += ok;
    } else {
      ++nf;
      cf += ok;
    }
  }
  return metrics_from_counts(cm, nm, cf, nf);
}

/// Search objective: -RA_avg + lambda * GG.
inline double fairness_loss(double ra_avg, double gg, double lambda_gap) { return -ra_avg + lambda_gap * gg; }

struct EvalReport {
  MetricCell oo;
  MetricCell op;

  const MetricCell& cell(ProbeKind k) const { return k == ProbeKind::oo ? oo : op; }
  bool operator==(const EvalReport&) const = default;
};

inline std::vector<Gender> predict_all(const Model& m, const std::vector<Probe>& probes) {
  std::vector<Gender> out;
  out.reserve(probes.size());
  for (const auto& p : probes) out.push_back(resolve_probe(m, p));
  return out;
}

inline EvalReport evaluate_model(const Model& m, const std::vector<Probe>& probes) {
  std::vector<Probe> oo, op;
  for (const auto& p : probes) (p.kind == ProbeKind::oo ? oo : op).push_back(p);
  if (oo.empty() || op.empty()) throw PreconditionError("evaluation needs both OO and OP probes");
  return {compute_metrics(predict_all(m, oo), oo), compute_metrics(predict_all(m, op), op)};
}

// ---------------------------------------------------------------------------
// Report rows
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string setting;
  std::string method;
  ProbeKind kind = ProbeKind::oo;
  MetricCell cell;
  std::uint64_t seed = 0;
};

inline std::string format_fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string serialize_row(const ReportRow& r) {
  return "{\"setting\":\"" + r.setting + "\",\"method\":\"" + r.method + "\",\"kind\":\"" +
         std::string(to_string(r.kind)) + "\",\"ra_m\":" + format_fixed4(r.cell.ra_m) +
         ",\"ra_f\":" + format_fixed4(r.cell.ra_f) + ",\"ra_avg\":" + format_fixed4(r.cell.ra_avg) +
         ",\"gg\":" + format_fixed4(r.cell.gg) + ",\"n_m\":" + std::to_string(r.cell.n_m) +
         ",\"n_f\":" + std::to_string(r.cell.n_f) + ",\"seed\":" + std::to_string(r.seed) + "}";
}

inline ReportRow parse_row(std::string_view line, std::size_t line_no) {
  try {
    const auto j = nlohmann::json::parse(line);
    ReportRow r;
    r.setting = j.at("setting").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.kind = probe_kind_from_string(j.at("kind").get<std::string>());
    r.cell.ra_m = j.at("ra_m").get<double>();
    r.cell.ra_f = j.at("ra_f").get<double>();
    r.cell.ra_avg = j.at("ra_avg").get<double>();
    r.cell.gg = j.at("gg").get<double>();
    r.cell.n_m = j.at("n_m").get<std::size_t>();
    r.cell.n_f = j.at("n_f").get<std::size_t>();
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
  } catch (const std::exception& e) {
    throw ParseError(e.what(), line_no);
  }
}

inline std::vector<ReportRow> report_rows(const EvalReport& report, std::string_view setting, std::string_view method,
                                          std::uint64_t seed) {
  return {{std::string(setting), std::string(method), ProbeKind::oo, report.oo, seed},
          {std::string(setting), std::string(method), ProbeKind::op, report.op, seed}};
}

}  // namespace mbl
