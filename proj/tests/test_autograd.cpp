#include <doctest.h>

#include <functional>

#include "medslip/autograd.hpp"
#include "medslip/errors.hpp"
#include "medslip/params.hpp"

using namespace medslip;
using ag::Mat;
using ag::Var;

namespace {

// Max normwise relative error between backward() and central differences over all inputs.
double fd_error(const std::function<Var(const std::vector<Var>&)>& f, std::vector<Var> inputs) {
  for (auto& v : inputs) v.zero_grad();
  ag::backward(f(inputs));
  double worst = 0;
  for (auto& v : inputs) {
    const Mat analytic = v.grad();
    Mat numeric(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.value().size(); ++i) {
      double& w = v.mutable_value().data()[i];
      const double saved = w;
      w = saved + 1e-6;
      const double up = f(inputs).scalar();
      w = saved - 1e-6;
      const double dn = f(inputs).scalar();
      w = saved;
      numeric.data()[i] = (up - dn) / 2e-6;
    }
    const double denom = std::max({analytic.norm(), numeric.norm(), 1e-10});
    worst = std::max(worst, (analytic - numeric).norm() / denom);
  }
  return worst;
}

Var rand_param(int r, int c, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return ag::parameter(random_normal(r, c, sd, rng));
}

// Weighted sum so that every output entry has a distinct upstream gradient.
Var probe(const Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ag::sum_all(ag::mul(y, ag::constant(random_normal(y.rows(), y.cols(), 1.0, rng))));
}

}  // namespace

TEST_CASE("elementwise and matrix op gradients") {
  const auto a = rand_param(3, 4, 1), b = rand_param(3, 4, 2), c = rand_param(4, 2, 3), row = rand_param(1, 4, 4);
  const auto s = rand_param(1, 1, 5);
  CHECK(fd_error([](auto& v) { return probe(ag::add(v[0], v[1])); }, {a, b}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::sub(v[0], v[1])); }, {a, b}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::mul(v[0], v[1])); }, {a, b}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::matmul(v[0], v[1])); }, {a, c}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::matmul_nt(v[0], v[1])); }, {a, b}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::add_row(v[0], v[1])); }, {a, row}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::scale_by(v[0], v[1])); }, {a, s}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::transpose(v[0])); }, {a}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::sigmoid(v[0])); }, {a}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::relu(v[0])); }, {a}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::linear(v[0], v[1], v[2])); }, {a, c, rand_param(1, 2, 6)}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::slice_cols(v[0], 1, 2)); }, {a}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::concat_cols({v[0], v[1]})); }, {a, b}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::mean_rows(v[0])); }, {a}) < 1e-7);
  CHECK(fd_error([](auto& v) { return ag::mean_all(ag::mul(v[0], v[0])); }, {a}) < 1e-7);
}

TEST_CASE("normalization op gradients") {
  const auto a = rand_param(4, 5, 7), g = rand_param(1, 5, 8), b = rand_param(1, 5, 9);
  CHECK(fd_error([](auto& v) { return probe(ag::softmax_rows(v[0])); }, {a}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::l2_normalize_rows(v[0])); }, {a}) < 1e-7);
  CHECK(fd_error([](auto& v) { return probe(ag::layer_norm_rows(v[0], v[1], v[2])); }, {a, g, b}) < 1e-6);
}

TEST_CASE("softmax rows are probability vectors") {
  const auto a = rand_param(3, 7, 10, 30.0);
  const auto p = ag::softmax_rows(a).value();
  CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((p.array() >= 0).all());
}

TEST_CASE("conv2d matches a direct loop") {
  const int H = 7, W = 6, C = 2, K = 3, O = 3;
  Rng rng(11);
  const Mat x = random_normal(H * W, C, 1.0, rng);
  const Mat w = random_normal(K * K * C, O, 1.0, rng);
  const Mat bias = random_normal(1, O, 1.0, rng);
  const auto y = ag::conv2d({ag::constant(x), H, W}, ag::constant(w), ag::constant(bias), K, 2, 1);
  CHECK(y.height == 4);
  CHECK(y.width == 3);
  for (int oy = 0; oy < y.height; ++oy)
    for (int ox = 0; ox < y.width; ++ox)
      for (int o = 0; o < O; ++o) {
        double s = bias(0, o);
        for (int ky = 0; ky < K; ++ky)
          for (int kx = 0; kx < K; ++kx) {
            const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            for (int c = 0; c < C; ++c) s += x(iy * W + ix, c) * w((ky * K + kx) * C + c, o);
          }
        CHECK(y.value.value()(oy * y.width + ox, o) == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("spatial op gradients") {
  const auto x = rand_param(6 * 5, 2, 12), w = rand_param(4 * 4 * 2, 3, 13), b = rand_param(1, 3, 14);
  auto conv = [](auto& v) { return probe(ag::conv2d({v[0], 6, 5}, v[1], v[2], 4, 2, 2).value); };
  CHECK(fd_error(conv, {x, w, b}) < 1e-7);
  auto up = [](auto& v) { return probe(ag::crop(ag::upsample2x_nearest({v[0], 6, 5}), 11, 9).value); };
  CHECK(fd_error(up, {x}) < 1e-7);
  auto cat = [](auto& v) { return probe(ag::concat_channels({v[0], 6, 5}, {v[1], 6, 5}).value); };
  CHECK(fd_error(cat, {x, rand_param(30, 3, 15)}) < 1e-7);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  auto p = ag::parameter(Mat::Ones(1, 1));
  ag::backward(ag::scale(p, 3.0));
  ag::backward(ag::scale(p, 3.0));
  CHECK(p.grad()(0, 0) == 6.0);
  p.zero_grad();
  CHECK(p.grad()(0, 0) == 0.0);
  CHECK_THROWS(ag::backward(ag::matmul(ag::constant(Mat::Ones(2, 1)), p)));
}

TEST_CASE("param store") {
  ParamStore s;
  s.add("a", Mat::Ones(2, 2));
  CHECK_THROWS(s.add("a", Mat::Ones(1, 1)));
  CHECK_THROWS(s.get("b"));
  CHECK(s.scalar_count() == 4);
  auto c = s.clone();
  c.get("a").mutable_value()(0, 0) = 5;
  CHECK(s.get("a").value()(0, 0) == 1);
  CHECK(s.load_values_from(c) == 1);
  CHECK(s.get("a").value()(0, 0) == 5);
}

TEST_CASE("rng streams are reproducible and distinct") {
  Rng a(derive_seed(1, "x", 0)), b(derive_seed(1, "x", 0)), c(derive_seed(1, "x", 1));
  CHECK(a.next_u64() == b.next_u64());
  CHECK(a.next_u64() != c.next_u64());
  Rng r(3);
  double sum = 0;
  for (int i = 0; i < 20000; ++i) sum += r.uniform();
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));
}
