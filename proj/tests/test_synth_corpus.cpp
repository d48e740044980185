#include <doctest.h>

#include <algorithm>
#include <map>

#include "medslip/errors.hpp"
#include "medslip/synth_corpus.hpp"
#include "test_util.hpp"

using namespace medslip;
using namespace medslip::synth;

namespace {

std::vector<report::TripletRecord> sorted(std::vector<report::TripletRecord> t) {
  std::sort(t.begin(), t.end());
  return t;
}

int cell_of(const SynthConfig& cfg, const std::string& anatomy) {
  const auto names = cfg.resolved_anatomy_terms();
  return static_cast<int>(std::find(names.begin(), names.end(), anatomy) - names.begin());
}

}  // namespace

TEST_CASE("default config") {
  const auto cfg = SynthConfig::defaults();
  CHECK(cfg.image_size == 96);
  CHECK(cfg.cells() == 6);
  CHECK(cfg.glyphs.size() == 5);
  CHECK(cfg.resolved_anatomy_terms().front() == "upper left zone");
  CHECK(cfg.resolved_anatomy_terms().back() == "lower right zone");
  CHECK(SynthConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  auto bad = cfg;
  bad.max_findings_per_image = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.glyphs.resize(1);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(parse_shape("blob"), ConfigError);
}

TEST_CASE("single noiseless finding stays inside its cell") {
  auto cfg = SynthConfig::defaults();
  cfg.noise_std = 0;
  cfg.max_findings_per_image = 1;
  bool found = false;
  for (std::size_t i = 0; i < 500 && !found; ++i) {
    const auto s = generate_study(cfg, i);
    if (s.regions.size() != 1 || s.regions[0].pathology != "disc" || s.regions[0].anatomy != "upper left zone")
      continue;
    found = true;
    const auto cell = cell_bounds(cfg, 0);
    const auto& m = s.regions[0].mask;
    for (int y = 0; y < 96; ++y)
      for (int x = 0; x < 96; ++x) {
        const bool lit = s.image.at(y, x) > 0;
        if (lit) CHECK(cell.contains(x, y));
        CHECK(lit == m.at(y, x));
      }
  }
  CHECK(found);
}

TEST_CASE("studies without findings are noise only") {
  auto cfg = SynthConfig::defaults();
  cfg.noise_std = 0;
  bool found = false;
  for (std::size_t i = 0; i < 200 && !found; ++i) {
    const auto s = generate_study(cfg, i);
    if (!s.regions.empty()) continue;
    found = true;
    CHECK(s.image.pixels.isZero(0.0));
    for (const auto& t : s.triplets) CHECK_FALSE(t.existence);
  }
  CHECK(found);
}

TEST_CASE("generation is deterministic") {
  const auto cfg = SynthConfig::defaults();
  const auto a = generate_study(cfg, 17), b = generate_study(cfg, 17);
  CHECK(a.image.pixels == b.image.pixels);
  CHECK(a.report == b.report);
  CHECK(a.triplets == b.triplets);
  CHECK(generate_study(cfg, 18).image.pixels != a.image.pixels);
}

TEST_CASE("study invariants over a corpus") {
  const auto cfg = SynthConfig::defaults();
  const auto corpus = make_corpus(cfg, 1000);
  std::map<std::string, int> positives;
  std::size_t total = 0;
  for (const auto& s : corpus.studies) {
    CHECK(s.image.pixels.minCoeff() >= 0.0);
    CHECK(s.image.pixels.maxCoeff() <= 1.0);
    CHECK(sorted(report::parse_report(s.report, cfg.grammar(), s.study_id).triplets) == sorted(s.triplets));
    std::size_t pos = 0;
    for (const auto& t : s.triplets) {
      if (!t.existence) {
        for (const auto& r : s.regions) CHECK(r.pathology != t.pathology);
        continue;
      }
      const auto& r = s.regions[pos++];
      CHECK(r.pathology == t.pathology);
      CHECK(r.anatomy == t.anatomy);
      ++positives[t.pathology];
      ++total;
      const auto cell = cell_bounds(cfg, cell_of(cfg, t.anatomy));
      double cx = 0, cy = 0;
      for (int y = 0; y < r.mask.height; ++y)
        for (int x = 0; x < r.mask.width; ++x)
          if (r.mask.at(y, x)) {
            CHECK(cell.contains(x, y));
            cx += x;
            cy += y;
          }
      const double n = static_cast<double>(r.mask.count());
      REQUIRE(n > 0);
      CHECK(cell.contains(static_cast<int>(cx / n), static_cast<int>(cy / n)));
    }
    CHECK(pos == s.regions.size());
  }
  const double uniform = static_cast<double>(total) / static_cast<double>(cfg.glyphs.size());
  for (const auto& g : cfg.glyphs) {
    CHECK(positives[g.term] > 0.8 * uniform);
    CHECK(positives[g.term] < 1.2 * uniform);
  }
}

TEST_CASE("split is 80/10/10 by index") {
  const auto s = split_indices(10);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
  CHECK(s.test.front() == 9);
  CHECK(split_indices(2000).train.size() == 1600);
}

TEST_CASE("corpus files round trip") {
  TempDir dir;
  const auto cfg = SynthConfig::defaults();
  const auto corpus = generate_corpus(cfg, 10, dir.path());
  for (const char* f : {"triplets.jsonl", "reports.txt", "regions.json", "manifest.json"})
    CHECK(std::filesystem::exists(dir / f));
  std::size_t images = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "images")) images += e.is_regular_file();
  CHECK(images == 10);

  const auto back = load_corpus(dir.path());
  REQUIRE(back.studies.size() == 10);
  CHECK(back.split.train.size() == 8);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& a = corpus.studies[i];
    const auto& b = back.studies[i];
    CHECK(a.study_id == b.study_id);
    CHECK(a.triplets == b.triplets);
    CHECK(a.report == b.report);
    REQUIRE(a.regions.size() == b.regions.size());
    for (std::size_t k = 0; k < a.regions.size(); ++k) {
      CHECK(a.regions[k].bbox == b.regions[k].bbox);
      CHECK(a.regions[k].mask.data == b.regions[k].mask.data);
    }
    CHECK((a.image.pixels - b.image.pixels).cwiseAbs().maxCoeff() <= 0.5 / 255 + 1e-12);
  }
  const auto triplets = report::ingest_triplets(dir / "triplets.jsonl");
  CHECK(triplets.size() == corpus.all_triplets().size());
  CHECK_THROWS_AS(load_corpus(dir / "nowhere"), IoError);
}

TEST_CASE("union mask") {
  auto cfg = SynthConfig::defaults();
  for (std::size_t i = 0; i < 100; ++i) {
    const auto s = generate_study(cfg, i);
    if (s.regions.size() < 2) continue;
    const auto u = union_mask(s);
    std::size_t sum = 0;
    for (const auto& r : s.regions) sum += r.mask.count();
    CHECK(u.count() == sum);
    CHECK(union_mask(s, s.regions[0].pathology).count() >= s.regions[0].mask.count());
    break;
  }
}
