#include "medslip/synth_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "medslip/errors.hpp"

namespace medslip::synth {

std::string to_string(GlyphShape s) {
  switch (s) {
    case GlyphShape::kDisc: return "disc";
    case GlyphShape::kRing: return "ring";
    case GlyphShape::kCross: return "cross";
    case GlyphShape::kBar: return "bar";
    case GlyphShape::kSpeckle: return "speckle";
  }
  return "disc";
}

GlyphShape parse_shape(const std::string& s) {
  for (auto g : {GlyphShape::kDisc, GlyphShape::kRing, GlyphShape::kCross, GlyphShape::kBar,
                 GlyphShape::kSpeckle})
    if (to_string(g) == s) return g;
  throw ConfigError("synth: unknown glyph shape '" + s + "'");
}

SynthConfig SynthConfig::defaults() {
  SynthConfig c;
  const std::string ul = "upper left zone", ur = "upper right zone", ml = "middle left zone",
                    mr = "middle right zone", ll = "lower left zone", lr = "lower right zone";
  c.glyphs = {
      {"disc", GlyphShape::kDisc, {ul, ur, ml, mr}},
      {"ring", GlyphShape::kRing, {ml, mr, ll, lr}},
      {"cross", GlyphShape::kCross, {ul, ml, ll}},
      {"bar", GlyphShape::kBar, {ur, mr, lr}},
      {"speckle", GlyphShape::kSpeckle, {ul, ur, ll, lr}},
  };
  return c;
}

std::vector<std::string> SynthConfig::resolved_anatomy_terms() const {
  if (!anatomy_terms.empty()) return anatomy_terms;
  std::vector<std::string> rows, cols;
  if (grid_rows == 1) rows = {""};
  else if (grid_rows == 2) rows = {"upper ", "lower "};
  else if (grid_rows == 3) rows = {"upper ", "middle ", "lower "};
  else
    for (int r = 0; r < grid_rows; ++r) rows.push_back("row " + std::to_string(r + 1) + " ");
  if (grid_cols == 1) cols = {"central "};
  else if (grid_cols == 2) cols = {"left ", "right "};
  else
    for (int c = 0; c < grid_cols; ++c) cols.push_back("column " + std::to_string(c + 1) + " ");
  std::vector<std::string> out;
  for (const auto& r : rows)
    for (const auto& c : cols) out.push_back(r + c + "zone");
  return out;
}

void SynthConfig::validate() const {
  if (grid_rows < 1 || grid_cols < 1 || cells() < 2) throw ConfigError("synth: grid needs >= 2 cells");
  if (glyphs.size() < 2) throw ConfigError("synth: at least two glyphs are required");
  if (max_findings_per_image < 0 || max_findings_per_image > cells())
    throw ConfigError("synth: max_findings_per_image must be within [0, cells]");
  if (negation_rate < 0 || negation_rate > 1) throw ConfigError("synth: negation_rate must be in [0, 1]");
  if (noise_std < 0) throw ConfigError("synth: noise_std must be >= 0");
  if (image_size < vision::kMinImageSide) throw ConfigError("synth: image_size below minimum");
  const auto names = resolved_anatomy_terms();
  if (static_cast<int>(names.size()) != cells())
    throw ConfigError("synth: anatomy_terms must name every cell");
  std::set<std::string> terms;
  for (const auto& g : glyphs) {
    if (!terms.insert(g.term).second) throw ConfigError("synth: duplicate glyph term " + g.term);
    for (const auto& a : g.allowed_anatomies)
      if (std::find(names.begin(), names.end(), a) == names.end())
        throw ConfigError("synth: glyph " + g.term + " allows unknown anatomy '" + a + "'");
  }
}

report::GrammarConfig SynthConfig::grammar() const {
  report::GrammarConfig g;
  for (const auto& s : glyphs) g.pathologies.push_back(s.term);
  g.anatomies = resolved_anatomy_terms();
  return g;
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json gl = nlohmann::json::array();
  for (const auto& g : glyphs)
    gl.push_back({{"term", g.term}, {"shape", to_string(g.shape)}, {"allowed_anatomies", g.allowed_anatomies}});
  return {{"image_size", image_size},
          {"grid", {grid_rows, grid_cols}},
          {"anatomy_terms", resolved_anatomy_terms()},
          {"pathology_glyphs", gl},
          {"max_findings_per_image", max_findings_per_image},
          {"negation_rate", negation_rate},
          {"noise_std", noise_std},
          {"intensity", intensity},
          {"intensity_jitter", intensity_jitter},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c = defaults();
  try {
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("grid")) {
      c.grid_rows = j["grid"].at(0).get<int>();
      c.grid_cols = j["grid"].at(1).get<int>();
    }
    if (j.contains("anatomy_terms")) c.anatomy_terms = j["anatomy_terms"].get<std::vector<std::string>>();
    if (j.contains("pathology_glyphs")) {
      c.glyphs.clear();
      for (const auto& g : j["pathology_glyphs"]) {
        GlyphSpec s;
        s.term = g.at("term").get<std::string>();
        s.shape = parse_shape(g.value("shape", s.term));
        if (g.contains("allowed_anatomies"))
          s.allowed_anatomies = g["allowed_anatomies"].get<std::vector<std::string>>();
        c.glyphs.push_back(std::move(s));
      }
    }
    c.max_findings_per_image = j.value("max_findings_per_image", c.max_findings_per_image);
    c.negation_rate = j.value("negation_rate", c.negation_rate);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.intensity = j.value("intensity", c.intensity);
    c.intensity_jitter = j.value("intensity_jitter", c.intensity_jitter);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

Mask Mask::empty(int height, int width) {
  Mask m;
  m.height = height;
  m.width = width;
  m.data.assign(static_cast<std::size_t>(height) * width, 0);
  return m;
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

BoundingBox cell_bounds(const SynthConfig& cfg, int cell) {
  const int ch = cfg.image_size / cfg.grid_rows;
  const int cw = cfg.image_size / cfg.grid_cols;
  const int r = cell / cfg.grid_cols, c = cell % cfg.grid_cols;
  return {c * cw, r * ch, (c + 1) * cw - 1, (r + 1) * ch - 1};
}

std::string study_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", index);
  return buf;
}

namespace {

Mask render_glyph(const SynthConfig& cfg, int cell, GlyphShape shape, Rng& rng) {
  const auto b = cell_bounds(cfg, cell);
  const double cy = (b.y0 + b.y1) / 2.0, cx = (b.x0 + b.x1) / 2.0;
  const double radius = 0.4 * std::min(b.y1 - b.y0 + 1, b.x1 - b.x0 + 1);
  Mask m = Mask::empty(cfg.image_size, cfg.image_size);
  for (int y = b.y0; y <= b.y1; ++y) {
    for (int x = b.x0; x <= b.x1; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double r2 = dy * dy + dx * dx;
      bool on = false;
      switch (shape) {
        case GlyphShape::kDisc: on = r2 <= radius * radius; break;
        case GlyphShape::kRing: {
          const double inner = radius - 4.0;
          on = r2 <= radius * radius && r2 >= inner * inner;
          break;
        }
        case GlyphShape::kCross:
          on = (std::abs(dy) <= 2.5 && std::abs(dx) <= radius) ||
               (std::abs(dx) <= 2.5 && std::abs(dy) <= radius);
          break;
        case GlyphShape::kBar: on = std::abs(dy) <= 3.5 && std::abs(dx) <= radius; break;
        case GlyphShape::kSpeckle: on = r2 <= radius * radius && rng.bernoulli(0.35); break;
      }
      if (on) m.set(y, x);
    }
  }
  return m;
}

BoundingBox mask_bounds(const Mask& m) {
  BoundingBox b{m.width, m.height, -1, -1};
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
  return b;
}

}  // namespace

SynthStudy generate_study(const SynthConfig& cfg, Rng& rng, const std::string& study_id) {
  const auto anatomy = cfg.resolved_anatomy_terms();
  const int cells = cfg.cells();
  const int count = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_findings_per_image) + 1));

  SynthStudy s;
  s.study_id = study_id;
  s.image = vision::ImageTensor::zeros(cfg.image_size, cfg.image_size, 1);
  std::vector<bool> used(cells, false);
  std::vector<bool> rendered(cfg.glyphs.size(), false);
  for (int f = 0; f < count; ++f) {
    // Pathology first (uniform), then a free cell among those it may occupy.
    int glyph = -1;
    std::vector<int> free_cells;
    for (int attempt = 0; attempt < 64 && glyph < 0; ++attempt) {
      const int g = static_cast<int>(rng.below(cfg.glyphs.size()));
      free_cells.clear();
      for (int c = 0; c < cells; ++c) {
        const auto& allowed = cfg.glyphs[g].allowed_anatomies;
        const bool ok = allowed.empty() ||
                        std::find(allowed.begin(), allowed.end(), anatomy[c]) != allowed.end();
        if (!used[c] && ok) free_cells.push_back(c);
      }
      if (!free_cells.empty()) glyph = g;
    }
    if (glyph < 0) break;
    const int cell = free_cells[rng.below(free_cells.size())];
    used[cell] = true;
    rendered[glyph] = true;
    const double amp = cfg.intensity * rng.uniform(1.0 - cfg.intensity_jitter, 1.0 + cfg.intensity_jitter);
    Region reg;
    reg.pathology = cfg.glyphs[glyph].term;
    reg.anatomy = anatomy[cell];
    reg.mask = render_glyph(cfg, cell, cfg.glyphs[glyph].shape, rng);
    reg.bbox = mask_bounds(reg.mask);
    for (int y = 0; y < cfg.image_size; ++y)
      for (int x = 0; x < cfg.image_size; ++x)
        if (reg.mask.at(y, x)) s.image.at(y, x) = amp;
    s.triplets.push_back({study_id, reg.anatomy, reg.pathology, true});
    s.regions.push_back(std::move(reg));
  }
  if (cfg.noise_std > 0) {
    for (Eigen::Index i = 0; i < s.image.pixels.size(); ++i) {
      double& v = s.image.pixels.data()[i];
      v = std::clamp(v + cfg.noise_std * rng.normal(), 0.0, 1.0);
    }
  }
  if (rng.bernoulli(cfg.negation_rate)) {
    std::vector<int> absent;
    for (std::size_t g = 0; g < cfg.glyphs.size(); ++g)
      if (!rendered[g]) absent.push_back(static_cast<int>(g));
    if (!absent.empty()) {
      const int g = absent[rng.below(absent.size())];
      const int cell = static_cast<int>(rng.below(cells));
      s.triplets.push_back({study_id, anatomy[cell], cfg.glyphs[g].term, false});
    }
  }
  s.report = report::render_report(s.triplets);
  return s;
}

SynthStudy generate_study(const SynthConfig& cfg, std::size_t index) {
  Rng rng(derive_seed(cfg.seed, "synth-study", index));
  return generate_study(cfg, rng, study_id_for(index));
}

std::vector<SynthStudy> generate_studies(const SynthConfig& cfg, std::size_t first, std::size_t count) {
  cfg.validate();
  std::vector<SynthStudy> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_study(cfg, first + i));
  return out;
}

Split split_indices(std::size_t count) {
  Split s;
  const std::size_t train_end = count * 8 / 10;
  const std::size_t val_end = count * 9 / 10;
  for (std::size_t i = 0; i < count; ++i) {
    if (i < train_end) s.train.push_back(i);
    else if (i < val_end) s.val.push_back(i);
    else s.test.push_back(i);
  }
  return s;
}

std::vector<report::TripletRecord> Corpus::all_triplets() const {
  std::vector<report::TripletRecord> out;
  for (const auto& s : studies) out.insert(out.end(), s.triplets.begin(), s.triplets.end());
  return out;
}

std::vector<report::TripletRecord> Corpus::triplets_of(const std::vector<std::size_t>& indices) const {
  std::vector<report::TripletRecord> out;
  for (auto i : indices) out.insert(out.end(), studies[i].triplets.begin(), studies[i].triplets.end());
  return out;
}

Corpus make_corpus(const SynthConfig& cfg, std::size_t count) {
  if (count < 1) throw ConfigError("synth: count must be >= 1");
  Corpus c;
  c.config = cfg;
  c.studies = generate_studies(cfg, 0, count);
  c.split = split_indices(count);
  return c;
}

namespace {

vision::ImageTensor mask_image(const Mask& m) {
  auto img = vision::ImageTensor::zeros(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) img.pixels.data()[i] = m.data[i] ? 1.0 : 0.0;
  return img;
}

Mask image_mask(const vision::ImageTensor& img) {
  Mask m = Mask::empty(img.height, img.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = img.pixels.data()[i] >= 0.5 ? 1 : 0;
  return m;
}

void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

nlohmann::json split_json(const Split& s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}};
}

}  // namespace

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  ensure_dir(dir / "images");
  ensure_dir(dir / "masks");
  std::vector<report::TripletRecord> triplets;
  nlohmann::json regions = nlohmann::json::object();
  std::ofstream reports(dir / "reports.txt");
  if (!reports) throw IoError("cannot write " + (dir / "reports.txt").string());
  for (const auto& s : corpus.studies) {
    vision::write_png(dir / "images" / (s.study_id + ".png"), s.image);
    triplets.insert(triplets.end(), s.triplets.begin(), s.triplets.end());
    reports << s.study_id << '\t' << s.report << '\n';
    auto& list = regions[s.study_id];
    list = nlohmann::json::array();
    for (std::size_t k = 0; k < s.regions.size(); ++k) {
      const auto& r = s.regions[k];
      const auto rel = "masks/" + s.study_id + "_" + std::to_string(k) + ".png";
      vision::write_png(dir / rel, mask_image(r.mask));
      list.push_back({{"pathology", r.pathology},
                      {"anatomy", r.anatomy},
                      {"bbox", {r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1}},
                      {"mask_file", rel}});
    }
  }
  report::write_triplets(dir / "triplets.jsonl", triplets);
  {
    std::ofstream out(dir / "regions.json");
    out << regions.dump(1) << '\n';
    if (!out) throw IoError("cannot write regions.json");
  }
  nlohmann::json manifest{{"config", corpus.config.to_json()},
                          {"seed", corpus.config.seed},
                          {"count", corpus.studies.size()},
                          {"split", split_json(corpus.split)}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out || !reports) throw IoError("cannot write corpus files in " + dir.string());
}

Corpus generate_corpus(const SynthConfig& cfg, std::size_t count, const std::filesystem::path& dir) {
  Corpus c = make_corpus(cfg, count);
  write_corpus(dir, c);
  return c;
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("corpus manifest not found in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("corpus manifest: " + std::string(e.what()));
  }
  Corpus c;
  c.config = SynthConfig::from_json(manifest.at("config"));
  const auto count = manifest.at("count").get<std::size_t>();
  const auto& sp = manifest.at("split");
  c.split.train = sp.at("train").get<std::vector<std::size_t>>();
  c.split.val = sp.at("val").get<std::vector<std::size_t>>();
  c.split.test = sp.at("test").get<std::vector<std::size_t>>();

  const auto triplets = report::ingest_triplets(dir / "triplets.jsonl");
  std::map<std::string, std::vector<report::TripletRecord>> by_study;
  for (const auto& t : triplets) by_study[t.study_id].push_back(t);

  std::ifstream rf(dir / "regions.json");
  if (!rf) throw IoError("regions.json not found in " + dir.string());
  const auto regions = nlohmann::json::parse(rf);

  std::map<std::string, std::string> reports;
  {
    std::ifstream in(dir / "reports.txt");
    std::string line;
    while (std::getline(in, line)) {
      const auto tab = line.find('\t');
      if (tab != std::string::npos) reports[line.substr(0, tab)] = line.substr(tab + 1);
    }
  }

  for (std::size_t i = 0; i < count; ++i) {
    SynthStudy s;
    s.study_id = study_id_for(i);
    s.image = vision::read_png(dir / "images" / (s.study_id + ".png"));
    s.triplets = by_study[s.study_id];
    s.report = reports[s.study_id];
    if (regions.contains(s.study_id)) {
      for (const auto& r : regions[s.study_id]) {
        Region reg;
        reg.pathology = r.at("pathology").get<std::string>();
        reg.anatomy = r.at("anatomy").get<std::string>();
        const auto b = r.at("bbox").get<std::vector<int>>();
        reg.bbox = {b.at(0), b.at(1), b.at(2), b.at(3)};
        reg.mask_file = r.at("mask_file").get<std::string>();
        reg.mask = image_mask(vision::read_png(dir / reg.mask_file));
        s.regions.push_back(std::move(reg));
      }
    }
    c.studies.push_back(std::move(s));
  }
  return c;
}

Mask union_mask(const SynthStudy& s, const std::string& pathology) {
  Mask m = Mask::empty(s.image.height, s.image.width);
  for (const auto& r : s.regions) {
    if (!pathology.empty() && r.pathology != pathology) continue;
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] |= r.mask.data[i];
  }
  return m;
}

}  // namespace medslip::synth
