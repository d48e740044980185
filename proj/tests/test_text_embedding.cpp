#include <doctest.h>

#include "medslip/errors.hpp"
#include "medslip/text_embedding.hpp"
#include "test_util.hpp"

using namespace medslip;
using namespace medslip::text;

TEST_CASE("fallback provider is deterministic and normalized") {
  const HashFallbackProvider p(0, 32);
  const auto a = p.embed("it is located at left lung");
  CHECK(a.vector == p.embed("it is located at left lung").vector);
  CHECK(a.vector.norm() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(a.vector != p.embed("opacity").vector);
  CHECK(a.provider_id == "hash-fallback");
  CHECK(HashFallbackProvider(1, 32).embed("opacity").vector != p.embed("opacity").vector);
  CHECK_THROWS_AS(p.embed(""), InputError);
  CHECK(tokenize("Upper-Left zone, 2") == std::vector<std::string>{"upper", "left", "zone", "2"});
}

TEST_CASE("provider factory") {
  ProviderConfig c;
  c.provider = "nope";
  CHECK_THROWS_AS(make_provider(c), ConfigError);
  c = ProviderConfig::from_json({{"provider", "hash-fallback"}, {"seed", 3}, {"d_t", 16}});
  CHECK(make_provider(c)->dim() == 16);
}

TEST_CASE("external provider reads a precomputed table") {
  TempDir dir;
  ag::Mat rows(2, 3);
  rows << 0.5, -1, 2, 0.25, 0, 1;
  write_external_table(dir / "emb.bin", {"opacity", "ribs"}, rows);
  ProviderConfig c;
  c.provider = "external";
  c.embeddings = dir / "emb.bin";
  c.texts = dir / "emb.bin.json";
  const auto p = make_provider(c);
  CHECK(p->dim() == 3);
  CHECK(p->embed("ribs").vector(2) == 1.0);
  CHECK(p->embed("opacity").vector(1) == -1.0);
  CHECK_THROWS_AS(p->embed("effusion"), InputError);
}

TEST_CASE("projection") {
  auto P = ProjectionParams::init(3, 3, 1);
  P.weight.mutable_value() = ag::Mat::Identity(3, 3);
  P.bias.mutable_value().setZero();
  RawTextEmbedding raw{Eigen::Vector3d(1, -2, 0.5), "x"};
  CHECK(project(raw, P) == raw.vector);

  P.weight.mutable_value().setZero();
  P.bias.mutable_value() << 4, 5, 6;
  CHECK(project(raw, P) == Eigen::Vector3d(4, 5, 6));

  auto Q = ProjectionParams::init(3, 2, 9);
  Q.bias.mutable_value() << 0.1, -0.2;
  const auto out = project(raw, Q);
  for (int j = 0; j < 2; ++j) {
    double s = Q.bias.value()(0, j);
    for (int i = 0; i < 3; ++i) s += Q.weight.value()(i, j) * raw.vector(i);
    CHECK(out(j) == doctest::Approx(s).epsilon(1e-12));
  }
  RawTextEmbedding wrong{Eigen::Vector2d(1, 1), "x"};
  CHECK_THROWS_AS(project(wrong, Q), ShapeError);
}

TEST_CASE("query embeddings have query-set shape") {
  const auto qs = report::QuerySet::from_terms({"a1", "a2"}, {"p1", "p2", "p3"}, {});
  const HashFallbackProvider p(0, 16);
  const auto P = ProjectionParams::init(16, 8, 2);
  const auto qe = build_query_embeddings(qs, p, P);
  CHECK(qe.E_a.rows() == 2);
  CHECK(qe.E_p.rows() == 3);
  CHECK(qe.d() == 8);
  CHECK(build_query_embeddings(qs, p, P).E_p == qe.E_p);
}
