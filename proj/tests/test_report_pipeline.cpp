#include <doctest.h>

#include <algorithm>

#include "medslip/errors.hpp"
#include "medslip/report_pipeline.hpp"
#include "test_util.hpp"

using namespace medslip;
using namespace medslip::report;

namespace {

TripletRecord trip(std::string a, std::string p, bool e = true, std::string s = "s1") {
  return {std::move(s), std::move(a), std::move(p), e};
}

}  // namespace

TEST_CASE("parse_report on grammar sentences") {
  const GrammarConfig any{};
  auto r = parse_report("Opacity at left lung.", any, "s1");
  REQUIRE(r.triplets.size() == 1);
  CHECK(r.triplets[0] == trip("left lung", "opacity"));

  r = parse_report("No effusion.", any, "s1");
  REQUIRE(r.triplets.size() == 1);
  CHECK(r.triplets[0] == trip("unspecified", "effusion", false));

  r = parse_report("Opacity at nipples. Deformity at ribs.", any, "s1");
  REQUIRE(r.triplets.size() == 2);
  CHECK(r.triplets[0] == trip("nipples", "opacity"));
  CHECK(r.triplets[1] == trip("ribs", "deformity"));

  CHECK(parse_report("", any).triplets.empty());
  CHECK_THROWS_AS(parse_report("opacity at \xff\xfe.", any), InputError);
}

TEST_CASE("parse_report skips sentences outside the grammar") {
  GrammarConfig g{{"opacity"}, {"left lung"}};
  const auto r = parse_report("Heart size normal. Opacity at left lung. Nodule at apex.", g, "s1");
  CHECK(r.triplets.size() == 1);
  CHECK(r.skipped_sentences == 2);
}

TEST_CASE("render and parse are inverse") {
  const std::vector<TripletRecord> t{trip("upper left zone", "disc"), trip("unspecified", "ring", false),
                                     trip("lower right zone", "bar", false)};
  const auto back = parse_report(render_report(t), {}, "s1").triplets;
  CHECK(back == t);
}

TEST_CASE("triplet file ingestion") {
  TempDir dir;
  const auto good = dir / "good.jsonl";
  write_triplets(good, {trip("ribs", "deformity"), trip("ribs", "deformity")});
  CHECK(ingest_triplets(good).size() == 2);

  const auto empty = dir / "empty.jsonl";
  write_text(empty, "");
  CHECK(ingest_triplets(empty).empty());

  const auto bad = dir / "bad.jsonl";
  write_text(bad,
             "{\"study_id\":\"a\",\"anatomy\":\"ribs\",\"pathology\":\"x\",\"existence\":true}\n"
             "{\"study_id\":\"a\",\"anatomy\":\"ribs\",\"existence\":true}\n");
  try {
    ingest_triplets(bad);
    FAIL("expected an ingestion error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
    CHECK(std::string(e.what()).find("pathology") != std::string::npos);
  }
  CHECK_THROWS_AS(ingest_triplets(dir / "missing.jsonl"), IoError);
}

TEST_CASE("anatomy prompting") {
  CHECK(prompt_anatomy("left lung") == "it is located at left lung");
  CHECK(prompt_anatomy("ribs") == "it is located at ribs");
  CHECK_THROWS_AS(prompt_anatomy(""), InputError);
}

TEST_CASE("knowledge enhancement") {
  const auto kt = KnowledgeTable::builtin();
  CHECK(enhance_pathology("collapse", kt) == "collapse collapse lung refers to pneumothorax or atelectasis.");
  CHECK(enhance_pathology("opacity", kt) == "opacity");
  CHECK(enhance_pathology("collapse", KnowledgeTable{}) == "collapse");
  CHECK_THROWS_AS(KnowledgeTable::from_json(nlohmann::json::array()), InputError);
}

TEST_CASE("query selection by frequency") {
  std::vector<TripletRecord> c;
  for (int i = 0; i < 5; ++i) c.push_back(trip("a1", "p1"));
  for (int i = 0; i < 3; ++i) c.push_back(trip("a2", "p2"));
  c.push_back(trip("a3", "p1", false));
  auto qs = select_queries(c, 2, 2);
  CHECK(qs.anatomy_terms == std::vector<std::string>{"a1", "a2"});
  CHECK(qs.prompted_anatomy_texts[0] == "it is located at a1");
  CHECK_THROWS_AS(select_queries(c, 2, 3), ConfigError);

  const std::vector<TripletRecord> tie{trip("a2", "p"), trip("a1", "p"), trip("a1", "p"), trip("a2", "p")};
  CHECK(select_queries(tie, 2, 1).anatomy_terms == std::vector<std::string>{"a1", "a2"});

  auto shuffled = c;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(select_queries(shuffled, 3, 2).to_json() == select_queries(c, 3, 2).to_json());
}

TEST_CASE("query set json round trip") {
  const auto qs = QuerySet::from_terms({"ribs", "left lung"}, {"collapse", "opacity"}, KnowledgeTable::builtin());
  CHECK(qs.unenhanced_terms == std::vector<std::string>{"opacity"});
  const auto back = QuerySet::from_json(qs.to_json(), KnowledgeTable::builtin());
  CHECK(back.anatomy_terms == qs.anatomy_terms);
  CHECK(back.enhanced_pathology_texts == qs.enhanced_pathology_texts);
  CHECK(back.pathology_index("opacity") == 1);
  CHECK(back.anatomy_index("spine") == -1);
}

TEST_CASE("existence matrix") {
  const auto qs = QuerySet::from_terms({"left lung", "ribs"}, {"opacity", "deformity", "effusion"}, {});
  auto em = build_existence_matrix({trip("left lung", "opacity")}, qs);
  CHECK(em.L.sum() == 1);
  CHECK(em.L(0, 0) == 1);
  CHECK(em.y_pathology(0) == 1);
  CHECK(em.y_anatomy(0) == 1);
  CHECK(em.study_id == "s1");

  em = build_existence_matrix({trip("left lung", "opacity", false)}, qs);
  CHECK(em.L.sum() == 0);
  CHECK(em.y_pathology.sum() == 0);
  CHECK(em.y_anatomy.sum() == 0);

  em = build_existence_matrix({trip("spine", "opacity")}, qs);
  CHECK(em.L.sum() == 0);
  CHECK(em.y_pathology(0) == 1);

  CHECK_THROWS_AS(build_existence_matrix({trip("ribs", "opacity", true, "a"), trip("ribs", "opacity", true, "b")}, qs),
                  InputError);
  const auto u = union_existence({build_existence_matrix({trip("ribs", "deformity")}, qs),
                                  build_existence_matrix({trip("left lung", "effusion")}, qs)});
  CHECK(u.sum() == 2);
}

TEST_CASE("grouping and validation") {
  const auto g = group_by_study({trip("a", "p", true, "s2"), trip("a", "q", true, "s1"), trip("b", "p", true, "s2")});
  REQUIRE(g.size() == 2);
  CHECK(g[0].first == "s2");
  CHECK(g[0].second.size() == 2);
  CHECK_THROWS_AS(validate(trip("Left", "p")), InputError);
  CHECK(is_valid_utf8("zone \xc3\xa9"));
  CHECK_FALSE(is_valid_utf8("\xc3"));
}
