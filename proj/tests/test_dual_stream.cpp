#include <doctest.h>

#include "medslip/dual_stream.hpp"
#include "medslip/errors.hpp"
#include "test_util.hpp"

using namespace medslip;
using namespace medslip::stream;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_height = c.image_width = 32;
  c.backbone.channels = {4, 8};
  c.backbone.strides = {2, 2};
  c.stream.d = 8;
  c.stream.heads = 2;
  c.stream.layers = 2;
  c.stream.predictor_hidden = 5;
  c.provider.d_t = 6;
  c.seed = 4;
  return c;
}

void perturb_all(ParamStore& s, std::uint64_t seed, double sd = 0.2) {
  Rng rng(seed);
  for (const auto& [name, v] : s.items()) {
    ag::Var p = v;
    p.mutable_value() += random_normal(p.rows(), p.cols(), sd, rng);
  }
}

vision::ImageTensor noise_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  auto img = vision::ImageTensor::zeros(h, w);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = rng.uniform();
  return img;
}

ag::Mat layer_norm(const ag::Mat& x, const ag::Mat& g, const ag::Mat& b) {
  ag::Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = 0, var = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) mu += x(r, c);
    mu /= static_cast<double>(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= static_cast<double>(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5) * g(0, c) + b(0, c);
  }
  return out;
}

}  // namespace

TEST_CASE("mask generator gates") {
  Rng rng(1);
  const auto tokens = ag::constant(random_normal(6, 3, 1.0, rng));
  DualStreamConfig cfg;
  MaskGenerator mg{ag::constant(ag::Mat::Zero(3, 6)), ag::constant(ag::Mat::Constant(1, 6, 40.0))};
  auto r = disentangle(tokens, mg, cfg);
  CHECK((r.F_a.value() - tokens.value()).cwiseAbs().maxCoeff() < 1e-6);
  const auto open = disentangle(tokens, {ag::constant(random_normal(3, 6, 1.0, rng)), ag::constant(ag::Mat::Zero(1, 6))}, cfg);
  CHECK((open.gates.G_a.value().array() > 0).all());
  CHECK((open.gates.G_p.value().array() < 1).all());

  mg.bias = ag::constant(ag::Mat::Constant(1, 6, -40.0));
  r = disentangle(tokens, mg, cfg);
  CHECK(r.F_a.value().cwiseAbs().maxCoeff() < 1e-6);

  cfg.enable_mask_generator = false;
  r = disentangle(tokens, mg, cfg);
  CHECK(r.F_a.value() == tokens.value());
  CHECK(r.F_p.value() == tokens.value());

  MaskGenerator wrong{ag::constant(ag::Mat::Zero(2, 4)), ag::constant(ag::Mat::Zero(1, 4))};
  cfg.enable_mask_generator = true;
  CHECK_THROWS_AS(disentangle(tokens, wrong, cfg), ShapeError);
}

TEST_CASE("identical tokens give uniform attention") {
  auto model = Model::create(small_config());
  const int T = 64;
  Rng rng(2);
  const ag::Mat row = random_normal(1, 8, 1.0, rng);
  const auto F = ag::constant(row.replicate(T, 1));
  const auto E = ag::constant(random_normal(3, 8, 1.0, rng));
  for (std::string mode : {"mean", "final"}) {
    auto cfg = model.config().stream;
    cfg.attention_map = mode;
    const auto r = query_attend(F, E, model.pathology_network(), cfg);
    CHECK((r.A.array() - 1.0 / T).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("single token attention matches a direct oracle") {
  auto cfg = small_config();
  cfg.backbone.channels = {2, 2, 2, 2, 4};
  cfg.backbone.strides = {2, 2, 2, 2, 2};
  cfg.stream.layers = 1;
  auto model = Model::create(cfg);
  REQUIRE(cfg.token_height() * cfg.token_width() == 1);
  perturb_all(model.params(), 9);
  Rng rng(3);
  const ag::Mat Fm = random_normal(1, 4, 1.0, rng);
  const ag::Mat Em = random_normal(3, 8, 1.0, rng);
  const auto& net = model.anatomy_network();
  const auto r = query_attend(ag::constant(Fm), ag::constant(Em), net, cfg.stream);
  CHECK((r.A.array() - 1.0).abs().maxCoeff() < 1e-12);

  const auto& L = net.layers[0];
  ag::Mat v = Fm * L.wv.value() + L.bv.value();
  ag::Mat x1 = Em;
  const ag::Mat attn_out = v * L.wo.value() + L.bo.value();
  for (Eigen::Index i = 0; i < x1.rows(); ++i) x1.row(i) += attn_out.row(0);
  ag::Mat h = layer_norm(x1, L.ln_ffn_gamma.value(), L.ln_ffn_beta.value()) * L.w1.value();
  h.rowwise() += L.b1.value().row(0);
  h = h.cwiseMax(0.0);
  ag::Mat x2 = x1 + h * L.w2.value();
  x2.rowwise() += L.b2.value().row(0);
  const ag::Mat expect = layer_norm(x2, net.ln_out_gamma.value(), net.ln_out_beta.value());
  CHECK((r.R.value() - expect).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("duplicated queries give duplicated outputs") {
  auto model = Model::create(small_config());
  perturb_all(model.params(), 5);
  Rng rng(6);
  const ag::Mat E = random_normal(1, 8, 1.0, rng).replicate(2, 1);
  const auto F = ag::constant(random_normal(64, 8, 1.0, rng));
  const auto r = query_attend(F, ag::constant(E), model.anatomy_network(), model.config().stream);
  CHECK(r.R.value().row(0) == r.R.value().row(1));
  CHECK(r.A.row(0) == r.A.row(1));
  const auto z = predict_existence(r.R, model.anatomy_head());
  CHECK(z.value()(0, 0) == z.value()(1, 0));
}

TEST_CASE("existence predictor") {
  Rng rng(8);
  ExistencePredictor zero{ag::constant(ag::Mat::Zero(3, 4)), ag::constant(ag::Mat::Zero(1, 4)),
                          ag::constant(ag::Mat::Zero(4, 1)), ag::constant(ag::Mat::Zero(1, 1))};
  const auto R = ag::constant(random_normal(2, 3, 1.0, rng));
  CHECK(predict_existence(R, zero).value().isZero(0.0));

  ExistencePredictor p{ag::constant(random_normal(3, 4, 1.0, rng)), ag::constant(random_normal(1, 4, 1.0, rng)),
                       ag::constant(random_normal(4, 1, 1.0, rng)), ag::constant(random_normal(1, 1, 1.0, rng))};
  const auto z = predict_existence(R, p).value();
  for (int i = 0; i < 2; ++i) {
    double out = p.b2.value()(0, 0);
    for (int h = 0; h < 4; ++h) {
      double a = p.b1.value()(0, h);
      for (int c = 0; c < 3; ++c) a += R.value()(i, c) * p.w1.value()(c, h);
      out += std::max(a, 0.0) * p.w2.value()(h, 0);
    }
    CHECK(z(i, 0) == doctest::Approx(out).epsilon(1e-12));
  }
}

TEST_CASE("model forward shapes and determinism") {
  ModelConfig cfg;
  cfg.image_height = cfg.image_width = 64;
  cfg.provider.d_t = 16;
  const auto model = Model::create(cfg);
  Rng rng(1);
  text::QueryEmbeddings qe{random_normal(6, 256, 1.0, rng), random_normal(5, 256, 1.0, rng)};
  const auto img = noise_image(64, 64, 2);
  const auto b = model.forward(img, qe);
  CHECK(b.R_a.rows() == 6);
  CHECK(b.R_a.cols() == 256);
  CHECK(b.R_p.rows() == 5);
  CHECK(b.A_p.rows() == 5);
  CHECK(b.A_p.cols() == 64);
  CHECK(b.z_p.size() == 5);
  CHECK((b.A_a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
  CHECK((b.A_p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
  CHECK((b.A_p.array() >= 0).all());
  CHECK(b.z_p.isZero(0.0));

  const auto again = Model::create(cfg).forward(img, qe);
  CHECK(again.R_p == b.R_p);
  CHECK(again.A_a == b.A_a);

  text::QueryEmbeddings narrow{random_normal(6, 8, 1.0, rng), random_normal(5, 8, 1.0, rng)};
  CHECK_THROWS_AS(model.forward(img, narrow), CompatibilityError);
  CHECK_THROWS_AS(model.forward(noise_image(32, 32, 1), qe), CompatibilityError);
}

TEST_CASE("without the mask generator the gate parameters are unused") {
  auto cfg = small_config();
  cfg.stream.enable_mask_generator = false;
  auto model = Model::create(cfg);
  Rng rng(3);
  text::QueryEmbeddings qe{random_normal(3, 8, 1.0, rng), random_normal(2, 8, 1.0, rng)};
  const auto img = noise_image(32, 32, 4);
  const auto before = model.forward(img, qe);
  auto w = model.params().get("mask_gen.weight");
  const ag::Mat gw = w.value();
  w.mutable_value() << gw.rightCols(8), gw.leftCols(8);
  const auto after = model.forward(img, qe);
  CHECK(before.R_p == after.R_p);
  CHECK(before.z_a == after.z_a);
}

TEST_CASE("config validation") {
  DualStreamConfig c;
  c.heads = 3;
  c.d = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.heads = 2;
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.layers = 1;
  c.attention_map = "first";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(DualStreamConfig::from_json(DualStreamConfig{}.to_json()).to_json() == DualStreamConfig{}.to_json());
}

TEST_CASE("checkpoint round trip") {
  TempDir dir;
  auto model = Model::create(small_config());
  perturb_all(model.params(), 12);
  save_checkpoint(dir / "ck", model.config(), model.params(), {{"epoch", 3}});
  const auto ck = load_checkpoint(dir / "ck");
  CHECK(ck.extra["epoch"] == 3);
  CHECK(ck.params.size() == model.params().size());
  for (const auto& [name, v] : model.params().items()) {
    const ag::Mat as_float = v.value().cast<float>().cast<double>();
    CHECK(ck.params.get(name).value() == as_float);
  }
  const auto loaded = load_model(dir / "ck");
  CHECK(loaded.config().to_json() == model.config().to_json());

  auto other = small_config();
  other.stream.d = 4;
  CHECK_THROWS_AS(Model::from_params(other, ck.params), CompatibilityError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
}
