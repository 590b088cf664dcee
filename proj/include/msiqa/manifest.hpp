#pragma once

// Dataset manifests.
//
// Supported label formats (image paths resolve relative to the label file):
//
//   generic_csv  Header row naming at least `path` and `mos`; optional `dataset`
//                and `split` (train|test) columns. Further columns are kept
//                as per-sample attributes.
//   tid2013      Whitespace-separated "MOS filename" per line (mos_with_names.txt).
//                Images are looked up in `distorted_images/` next to the label
//                file when that directory exists.
//   koniq10k     CSV with header containing `image_name` and `MOS_zscore` (or
//                `MOS` when no z-score column exists); fields may be quoted.
//                Images are looked up in `1024x768/` when that directory exists.
//   pipal        One or more per-reference label files of "filename,score"
//                lines. The path may name one file or a directory of *.txt
//                files (read in sorted order). Images are looked up in
//                `../Distortion/` relative to the label directory when present.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "msiqa/errors.hpp"

namespace msiqa {

enum class Split { Train, Test };

struct ImageSample {
  std::filesystem::path image_path;
  double mos = 0.0;
  std::string dataset_id;
  Split split = Split::Train;
  std::map<std::string, std::string> attributes;
};

struct DatasetManifest {
  std::vector<ImageSample> samples;
  double mos_min = 0.0;
  double mos_max = 0.0;

  [[nodiscard]] std::size_t size() const noexcept { return samples.size(); }

  /// Recomputes mos_min / mos_max and checks the manifest invariants.
  void finalize() {
    if (samples.empty()) throw ConfigError("manifest is empty");
    mos_min = mos_max = samples.front().mos;
    for (const auto& s : samples) {
      if (!std::isfinite(s.mos)) throw ConfigError("non-finite MOS for '" + s.image_path.string() + "'");
      mos_min = std::min(mos_min, s.mos);
      mos_max = std::max(mos_max, s.mos);
    }
  }

  [[nodiscard]] std::vector<double> mos_values() const {
    std::vector<double> v;
    v.reserve(samples.size());
    for (const auto& s : samples) v.push_back(s.mos);
    return v;
  }
};

enum class ManifestFormat { GenericCsv, Tid2013, Koniq10k, Pipal };

inline ManifestFormat parse_manifest_format(std::string_view s) {
  if (s == "generic_csv" || s == "csv") return ManifestFormat::GenericCsv;
  if (s == "tid2013") return ManifestFormat::Tid2013;
  if (s == "koniq10k") return ManifestFormat::Koniq10k;
  if (s == "pipal") return ManifestFormat::Pipal;
  throw ConfigError("unknown manifest format '" + std::string(s) + "'");
}

struct ValidationReport {
  std::vector<std::filesystem::path> missing_images;
  [[nodiscard]] bool ok() const noexcept { return missing_images.empty(); }
};

struct LoadedManifest {
  DatasetManifest manifest;
  ValidationReport report;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Splits one CSV line, honouring double-quoted fields.
inline std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline double parse_mos(const std::string& v, const std::string& source, std::size_t line) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ParseError(source, line, "invalid score '" + v + "'");
  }
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(in, l)) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    lines.push_back(l);
  }
  return lines;
}

inline std::filesystem::path image_root(const std::filesystem::path& dir, const char* preferred) {
  const auto p = dir / preferred;
  return std::filesystem::is_directory(p) ? p : dir;
}

inline void load_generic_csv(const std::filesystem::path& path, DatasetManifest& m) {
  const auto lines = read_lines(path);
  const auto src = path.string();
  std::size_t header_line = 0;
  while (header_line < lines.size() && trim(lines[header_line]).empty()) ++header_line;
  if (header_line == lines.size()) return;
  const auto header = split_csv(lines[header_line]);
  std::optional<std::size_t> path_col, mos_col, dataset_col, split_col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "path") path_col = i;
    else if (header[i] == "mos") mos_col = i;
    else if (header[i] == "dataset") dataset_col = i;
    else if (header[i] == "split") split_col = i;
  }
  if (!path_col || !mos_col) throw ParseError(src, header_line + 1, "header must contain 'path' and 'mos' columns");
  const auto dir = path.parent_path();
  for (std::size_t ln = header_line + 1; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    const auto f = split_csv(lines[ln]);
    if (f.size() != header.size()) {
      throw ParseError(src, ln + 1, "expected " + std::to_string(header.size()) + " fields, got " +
                                        std::to_string(f.size()));
    }
    ImageSample s;
    s.image_path = dir / f[*path_col];
    s.mos = parse_mos(f[*mos_col], src, ln + 1);
    s.dataset_id = dataset_col ? f[*dataset_col] : "generic";
    if (split_col) {
      if (f[*split_col] == "train") s.split = Split::Train;
      else if (f[*split_col] == "test") s.split = Split::Test;
      else throw ParseError(src, ln + 1, "split must be 'train' or 'test'");
    }
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i != *path_col && i != *mos_col && (!dataset_col || i != *dataset_col) && (!split_col || i != *split_col)) {
        s.attributes[header[i]] = f[i];
      }
    }
    m.samples.push_back(std::move(s));
  }
}

inline void load_tid2013(const std::filesystem::path& path, DatasetManifest& m) {
  const auto lines = read_lines(path);
  const auto root = image_root(path.parent_path(), "distorted_images");
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    std::istringstream ss(lines[ln]);
    std::string mos, name, extra;
    if (!(ss >> mos >> name) || (ss >> extra)) throw ParseError(path.string(), ln + 1, "expected 'MOS filename'");
    ImageSample s;
    s.mos = parse_mos(mos, path.string(), ln + 1);
    s.image_path = root / name;
    s.dataset_id = "tid2013";
    m.samples.push_back(std::move(s));
  }
}

inline void load_koniq(const std::filesystem::path& path, DatasetManifest& m) {
  const auto lines = read_lines(path);
  if (lines.empty()) return;
  const auto header = split_csv(lines[0]);
  std::optional<std::size_t> name_col, mos_col, raw_col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "image_name") name_col = i;
    else if (header[i] == "MOS_zscore") mos_col = i;
    else if (header[i] == "MOS") raw_col = i;
  }
  if (!mos_col) mos_col = raw_col;
  if (!name_col || !mos_col) throw ParseError(path.string(), 1, "header must contain image_name and MOS_zscore/MOS");
  const auto root = image_root(path.parent_path(), "1024x768");
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    const auto f = split_csv(lines[ln]);
    if (f.size() != header.size()) throw ParseError(path.string(), ln + 1, "field count does not match header");
    ImageSample s;
    s.image_path = root / f[*name_col];
    s.mos = parse_mos(f[*mos_col], path.string(), ln + 1);
    s.dataset_id = "koniq10k";
    m.samples.push_back(std::move(s));
  }
}

inline void load_pipal(const std::filesystem::path& path, DatasetManifest& m) {
  std::vector<std::filesystem::path> files;
  std::filesystem::path label_dir;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    label_dir = path;
  } else {
    files.push_back(path);
    label_dir = path.parent_path();
  }
  const auto distortion = label_dir.parent_path() / "Distortion";
  const auto root = std::filesystem::is_directory(distortion) ? distortion : label_dir;
  for (const auto& file : files) {
    const auto lines = read_lines(file);
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
      if (trim(lines[ln]).empty()) continue;
      const auto f = split_csv(lines[ln]);
      if (f.size() != 2) throw ParseError(file.string(), ln + 1, "expected 'filename,score'");
      ImageSample s;
      s.image_path = root / f[0];
      s.mos = parse_mos(f[1], file.string(), ln + 1);
      s.dataset_id = "pipal";
      s.attributes["reference"] = file.stem().string();
      m.samples.push_back(std::move(s));
    }
  }
}

}  // namespace detail

/// Parses a label file. Missing images are listed in the report, not thrown.
inline LoadedManifest load_manifest(const std::filesystem::path& path, ManifestFormat format) {
  if (!std::filesystem::exists(path)) throw IoError("manifest '" + path.string() + "' does not exist");
  LoadedManifest out;
  auto& m = out.manifest;
  switch (format) {
    case ManifestFormat::GenericCsv: detail::load_generic_csv(path, m); break;
    case ManifestFormat::Tid2013: detail::load_tid2013(path, m); break;
    case ManifestFormat::Koniq10k: detail::load_koniq(path, m); break;
    case ManifestFormat::Pipal: detail::load_pipal(path, m); break;
  }
  if (m.samples.empty()) throw ConfigError("manifest '" + path.string() + "' contains no samples");
  m.finalize();
  for (const auto& s : m.samples) {
    if (!std::filesystem::exists(s.image_path)) out.report.missing_images.push_back(s.image_path);
  }
  return out;
}

/// Writes a generic CSV manifest; image paths are written relative to the file's directory.
inline void write_generic_csv(const std::filesystem::path& path, const DatasetManifest& m,
                              const std::vector<std::string>& attribute_columns = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << "path,mos,dataset,split";
  for (const auto& c : attribute_columns) out << ',' << c;
  out << '\n';
  const auto dir = path.parent_path();
  char buf[64];
  for (const auto& s : m.samples) {
    std::snprintf(buf, sizeof buf, "%.17g", s.mos);
    out << std::filesystem::relative(s.image_path, dir.empty() ? "." : dir).generic_string() << ',' << buf << ','
        << s.dataset_id << ',' << (s.split == Split::Train ? "train" : "test");
    for (const auto& c : attribute_columns) {
      auto it = s.attributes.find(c);
      out << ',' << (it == s.attributes.end() ? "" : it->second);
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing manifest '" + path.string() + "'");
}

/// Deterministic random split; `holdout_fraction` of samples (rounded, at least
/// one when the fraction is positive) go to the second manifest.
inline std::pair<DatasetManifest, DatasetManifest> split_manifest(const DatasetManifest& m, double holdout_fraction,
                                                                  std::uint64_t seed) {
  if (holdout_fraction <= 0.0 || holdout_fraction >= 1.0) throw ConfigError("holdout fraction must be in (0,1)");
  if (m.size() < 2) throw ConfigError("cannot split a manifest with fewer than two samples");
  std::vector<std::size_t> order(m.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_test = static_cast<std::size_t>(std::lround(holdout_fraction * static_cast<double>(m.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, m.size() - 1);
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  DatasetManifest train, test;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto s = m.samples[order[i]];
    s.split = i < n_test ? Split::Test : Split::Train;
    (i < n_test ? test : train).samples.push_back(std::move(s));
  }
  train.finalize();
  test.finalize();
  return {std::move(train), std::move(test)};
}

}  // namespace msiqa
