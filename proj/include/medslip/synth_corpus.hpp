#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medslip/report_pipeline.hpp"
#include "medslip/rng.hpp"
#include "medslip/vision_backbone.hpp"

namespace medslip::synth {

enum class GlyphShape { kDisc, kRing, kCross, kBar, kSpeckle };

std::string to_string(GlyphShape s);
GlyphShape parse_shape(const std::string& s);

struct GlyphSpec {
  std::string term;
  GlyphShape shape = GlyphShape::kDisc;
  /// Anatomy terms this glyph may be rendered in; empty means any cell.
  std::vector<std::string> allowed_anatomies;
};

struct SynthConfig {
  int image_size = 96;
  int grid_rows = 3;
  int grid_cols = 2;
  std::vector<std::string> anatomy_terms;  // row-major cell names; derived when empty
  std::vector<GlyphSpec> glyphs;
  int max_findings_per_image = 3;
  double negation_rate = 0.3;
  double noise_std = 0.05;
  double intensity = 0.8;
  double intensity_jitter = 0.2;  // relative, uniform in [1 - j, 1 + j]
  std::uint64_t seed = 0;

  /// 96x96, 3x2 zones, disc/ring/cross/bar/speckle each with a preferred set of zones.
  static SynthConfig defaults();
  void validate() const;
  int cells() const { return grid_rows * grid_cols; }
  std::vector<std::string> resolved_anatomy_terms() const;
  report::GrammarConfig grammar() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel bounds
  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Binary H x W mask, row-major.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  static Mask empty(int height, int width);
  bool at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v = true) { data[static_cast<std::size_t>(y) * width + x] = v; }
  std::size_t count() const;
};

struct Region {
  std::string pathology;
  std::string anatomy;
  BoundingBox bbox;
  Mask mask;
  std::string mask_file;  // relative path when written to disk
};

struct SynthStudy {
  std::string study_id;
  vision::ImageTensor image;
  std::string report;
  std::vector<report::TripletRecord> triplets;
  std::vector<Region> regions;  // one per positive triplet, same order
};

/// Pixel bounds of grid cell `cell` (row-major): [x0, x1] x [y0, y1] inclusive.
BoundingBox cell_bounds(const SynthConfig& cfg, int cell);

std::string study_id_for(std::size_t index);

SynthStudy generate_study(const SynthConfig& cfg, Rng& rng, const std::string& study_id);
/// Study `index` with its own stream derived from (cfg.seed, index).
SynthStudy generate_study(const SynthConfig& cfg, std::size_t index);
std::vector<SynthStudy> generate_studies(const SynthConfig& cfg, std::size_t first,
                                         std::size_t count);

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// 80/10/10 by study index.
Split split_indices(std::size_t count);

struct Corpus {
  SynthConfig config;
  std::vector<SynthStudy> studies;
  Split split;

  std::vector<report::TripletRecord> all_triplets() const;
  std::vector<report::TripletRecord> triplets_of(const std::vector<std::size_t>& indices) const;
};

Corpus make_corpus(const SynthConfig& cfg, std::size_t count);

/// Writes images/, masks/, triplets.jsonl, reports.txt, regions.json and manifest.json.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus generate_corpus(const SynthConfig& cfg, std::size_t count, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

/// Union of all region masks of a study, optionally restricted to one pathology.
Mask union_mask(const SynthStudy& s, const std::string& pathology = {});

}  // namespace medslip::synth
