#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msiqa/inference.hpp"
#include "msiqa/manifest.hpp"
#include "msiqa/metrics.hpp"

namespace msiqa {

struct PerImage {
  std::string image_id;
  double prediction = 0.0;
  double mos = 0.0;
};

struct EvalReport {
  std::optional<double> srcc;
  std::optional<double> plcc;
  std::optional<double> main_score;
  std::vector<PerImage> per_image;
  std::vector<std::string> excluded;  // images that failed to decode
  std::size_t shifted_predictions = 0;

  [[nodiscard]] std::size_t n() const noexcept { return per_image.size(); }
};

/// Computes the metric block from per-image results.
inline void finalize_report(EvalReport& r) {
  if (r.per_image.size() < 2) throw ConfigError("evaluation needs at least two scored images");
  std::vector<double> p, s;
  for (const auto& e : r.per_image) {
    p.push_back(e.prediction);
    s.push_back(e.mos);
  }
  r.srcc = srcc(p, s);
  r.plcc = plcc(p, s);
  r.main_score = (r.srcc && r.plcc) ? std::optional(main_score(*r.srcc, *r.plcc)) : std::nullopt;
}

/// Predicts every manifest image and scores the predictions against MOS.
/// Undecodable images are excluded and listed in the report.
inline EvalReport evaluate(const PatchScorer& scorer, const DatasetManifest& manifest, const TTAPlan& plan) {
  EvalReport r;
  for (const auto& s : manifest.samples) {
    Image img;
    try {
      img = read_image(s.image_path);
    } catch (const IoError&) {
      r.excluded.push_back(s.image_path.generic_string());
      continue;
    }
    const auto pred = predict_image(scorer, img, plan);
    if (pred.shifted) ++r.shifted_predictions;
    r.per_image.push_back({s.image_path.generic_string(), pred.score, s.mos});
  }
  finalize_report(r);
  return r;
}

inline nlohmann::ordered_json report_json(const EvalReport& r, const nlohmann::ordered_json& settings) {
  nlohmann::ordered_json j;
  auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json("degenerate");
  };
  j["n"] = r.n();
  j["excluded"] = r.excluded;
  j["incomplete"] = !r.excluded.empty();
  j["srcc"] = opt(r.srcc);
  j["plcc"] = opt(r.plcc);
  j["main_score"] = opt(r.main_score);
  j["shifted_predictions"] = r.shifted_predictions;
  j["settings"] = settings;
  return j;
}

inline void write_report(const std::filesystem::path& path, const EvalReport& r,
                         const nlohmann::ordered_json& settings) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report '" + path.string() + "'");
  out << report_json(r, settings).dump(2) << '\n';
}

/// Scatter-plot data: "image_id,mos,prediction".
inline void write_scatter_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write scatter data '" + path.string() + "'");
  out << "image_id,mos,prediction\n";
  char buf[96];
  for (const auto& e : r.per_image) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", e.mos, e.prediction);
    out << e.image_id << ',' << buf << '\n';
  }
}

}  // namespace msiqa
