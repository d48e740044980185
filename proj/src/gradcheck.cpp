#include <algorithm>
#include <cmath>

#include "medslip/errors.hpp"
#include "medslip/train_eval.hpp"

namespace medslip::train {

GradCheckResult check_gradients(const std::string& name, const std::function<ag::Var()>& loss,
                                const std::vector<std::pair<std::string, ag::Var>>& groups,
                                const GradCheckOptions& opt) {
  for (const auto& [g, v] : groups) {
    ag::Var p = v;
    p.zero_grad();
  }
  ag::backward(loss());
  std::vector<ag::Mat> analytic;
  for (const auto& [g, v] : groups) {
    analytic.push_back(v.grad());
    if (!opt.corrupt_group.empty() && g.find(opt.corrupt_group) != std::string::npos)
      analytic.back() *= 1.01;
  }

  GradCheckResult res;
  res.name = name;
  Rng rng(derive_seed(opt.seed, "gradcheck-entries", std::hash<std::string>{}(name)));
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    ag::Var p = groups[gi].second;
    const auto size = static_cast<std::size_t>(p.value().size());
    std::vector<std::size_t> entries(size);
    for (std::size_t i = 0; i < size; ++i) entries[i] = i;
    if (opt.samples_per_group > 0 && size > opt.samples_per_group) {
      for (std::size_t i = 0; i < opt.samples_per_group; ++i)
        std::swap(entries[i], entries[i + rng.below(size - i)]);
      entries.resize(opt.samples_per_group);
    }
    double diff = 0, an = 0, nn = 0;
    std::size_t kinks = 0;
    for (auto e : entries) {
      double& w = p.mutable_value().data()[e];
      const double saved = w;
      auto central = [&](double h) {
        w = saved + h;
        const double up = loss().scalar();
        w = saved - h;
        const double down = loss().scalar();
        w = saved;
        return (up - down) / (2 * h);
      };
      const double numeric = central(opt.h);
      const double a = analytic[gi].data()[e];
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (std::abs(a - numeric) > 1e-6 * scale) {
        // A ReLU boundary inside the step makes the two step sizes disagree at first order.
        const double fine = central(opt.h / 4);
        if (std::abs(fine - numeric) > 1e-3 * std::max({std::abs(fine), std::abs(numeric), 1e-8})) {
          ++kinks;
          continue;
        }
      }
      diff += (a - numeric) * (a - numeric);
      an += a * a;
      nn += numeric * numeric;
    }
    const double err = std::sqrt(diff) / std::max({std::sqrt(an), std::sqrt(nn), 1e-10});
    res.groups.push_back({groups[gi].first, err, entries.size() - kinks, kinks});
    res.max_rel_error = std::max(res.max_rel_error, err);
    p.zero_grad();
  }
  return res;
}

namespace {

ag::Var random_param(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  return ag::parameter(random_normal(r, c, sd, rng));
}

int dim(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

GradCheckResult check_protocl(objectives::ProtoCLVariant variant, const std::string& name,
                              Rng& rng, const GradCheckOptions& opt) {
  const int d = dim(rng, 2, 8), l = dim(rng, 1, 3), k = dim(rng, 1, 4);
  objectives::ProtoCLConfig cfg;
  cfg.variant = variant;
  cfg.tau = rng.uniform(0.5, 2.0);
  cfg.k = k;
  auto R = random_param(1, d, rng, 0.7);
  auto E = random_param(l + k, d, rng, 0.7);
  std::vector<int> pos, neg;
  for (int i = 0; i < l; ++i) pos.push_back(i);
  for (int i = 0; i < k; ++i) neg.push_back(l + static_cast<int>(rng.below(static_cast<std::uint64_t>(k))));
  return check_gradients(name, [&] { return objectives::protocl_loss(R, E, pos, neg, cfg); },
                         {{"R", R}, {"E", E}}, opt);
}

GradCheckResult check_icl(Rng& rng, const GradCheckOptions& opt) {
  const int m = dim(rng, 1, 6), n = dim(rng, 1, 6), d = dim(rng, 2, 8);
  auto Rp = random_param(m, d, rng), Ra = random_param(n, d, rng);
  ag::Mat scale_init(1, 1);
  scale_init(0, 0) = rng.uniform(0.5, 5.0);
  auto s = ag::parameter(scale_init);
  ag::Mat L(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) L(i, j) = rng.bernoulli(0.4) ? 1.0 : 0.0;
  return check_gradients("icl", [&] { return objectives::icl_loss(Rp, Ra, L, s); },
                         {{"R_p", Rp}, {"R_a", Ra}, {"scale", s}}, opt);
}

GradCheckResult check_exist(Rng& rng, const GradCheckOptions& opt) {
  const int q = dim(rng, 1, 8);
  auto z = random_param(q, 1, rng, 2.0);
  Eigen::VectorXd y(q);
  for (int i = 0; i < q; ++i) y(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return check_gradients("exist", [&] { return objectives::exist_loss(z, y); }, {{"logits", z}}, opt);
}

GradCheckResult check_projection(Rng& rng, const GradCheckOptions& opt) {
  const int dt = dim(rng, 2, 8), d = dim(rng, 2, 8), rows = dim(rng, 1, 5);
  auto P = text::ProjectionParams::init(dt, d, rng.next_u64());
  P.bias.mutable_value() = random_normal(1, d, 0.3, rng);
  const auto raw = ag::constant(random_normal(rows, dt, 1.0, rng));
  const auto C = ag::constant(random_normal(rows, d, 1.0, rng));
  auto fn = [&] {
    const auto out = text::project_rows(raw, P);
    return ag::add(ag::sum_all(ag::mul(out, C)), ag::scale(ag::sum_all(ag::mul(out, out)), 0.5));
  };
  return check_gradients("projection", fn, {{"text_proj.weight", P.weight}, {"text_proj.bias", P.bias}}, opt);
}

vision::ImageTensor random_image(int h, int w, Rng& rng) {
  auto img = vision::ImageTensor::zeros(h, w, 1);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = rng.uniform();
  return img;
}

void perturb(ParamStore& store, Rng& rng, double sd) {
  for (const auto& [name, v] : store.items()) {
    ag::Var p = v;
    p.mutable_value() += random_normal(p.rows(), p.cols(), sd, rng);
  }
}

std::vector<std::pair<std::string, ag::Var>> groups_of(const ParamStore& store) {
  return {store.items().begin(), store.items().end()};
}

GradCheckResult check_backbone(Rng& rng, const GradCheckOptions& opt) {
  vision::BackboneConfig bc;
  bc.channels = {3, 4, 5};
  bc.strides = {2, 2, 1};
  ParamStore store;
  const auto bb = vision::Backbone::create(bc, store, rng.next_u64());
  perturb(store, rng, 0.05);
  const auto img = random_image(32, 32, rng);
  const auto fm0 = vision::encode(img, bb);
  const auto C = ag::constant(random_normal(fm0.tokens.value.rows(), fm0.tokens.value.cols(), 1.0, rng));
  auto fn = [&] { return ag::sum_all(ag::mul(vision::encode(img, bb).tokens.value, C)); };
  return check_gradients("backbone", fn, groups_of(store), opt);
}

GradCheckResult check_forward(Rng& rng, const GradCheckOptions& opt) {
  stream::ModelConfig mc;
  mc.image_height = mc.image_width = 32;
  mc.backbone.channels = {4, 6};
  mc.backbone.strides = {2, 2};
  mc.stream.d = 8;
  mc.stream.heads = 2;
  mc.stream.layers = 2;
  mc.stream.predictor_hidden = 4;
  mc.provider.d_t = 8;
  mc.seed = rng.next_u64();
  mc.icl_scale_init = 2.0;
  auto model = stream::Model::create(mc);
  perturb(model.params(), rng, 0.1);

  const int n = 3, m = 2;
  text::RawQueryTexts raw{random_normal(n, mc.provider.d_t, 1.0, rng),
                          random_normal(m, mc.provider.d_t, 1.0, rng)};
  report::ExistenceMatrix em;
  em.study_id = "gradcheck";
  em.L = ag::Mat::Zero(m, n);
  em.L(0, static_cast<Eigen::Index>(rng.below(n))) = 1.0;
  if (rng.bernoulli(0.5)) em.L(1, static_cast<Eigen::Index>(rng.below(n))) = 1.0;
  em.y_pathology = em.L.rowwise().maxCoeff();
  em.y_anatomy = em.L.colwise().maxCoeff().transpose();
  const auto img = random_image(32, 32, rng);

  TrainConfig tc;
  tc.protocl.tau = 0.5;
  tc.protocl.k = 2;
  const std::uint64_t neg_seed = rng.next_u64();
  auto fn = [&] {
    Rng r(neg_seed);
    const auto q = model.query_vars(raw);
    const auto bundle = model.forward(img, q);
    return image_loss(bundle, q, em, model, tc, r).total;
  };
  // Key biases shift every score of a query equally, so softmax makes their gradient exactly zero.
  auto groups = groups_of(model.params());
  std::erase_if(groups, [](const auto& g) { return g.first.ends_with(".bk"); });
  return check_gradients("forward", fn, groups, opt);
}

}  // namespace

std::vector<std::string> grad_check_selectors() {
  return {"protocl", "protocl-literal", "icl", "exist", "projection", "backbone", "forward"};
}

GradCheckResult grad_check(const std::string& selector, std::uint64_t instance,
                           const GradCheckOptions& opt) {
  Rng rng(derive_seed(opt.seed, "gradcheck-" + selector, instance));
  if (selector == "protocl") return check_protocl(objectives::ProtoCLVariant::kStandard, selector, rng, opt);
  if (selector == "protocl-literal")
    return check_protocl(objectives::ProtoCLVariant::kPaperLiteral, selector, rng, opt);
  if (selector == "icl") return check_icl(rng, opt);
  if (selector == "exist") return check_exist(rng, opt);
  if (selector == "projection") return check_projection(rng, opt);
  if (selector == "backbone") return check_backbone(rng, opt);
  if (selector == "forward") return check_forward(rng, opt);
  throw ConfigError("unknown gradient check '" + selector + "'");
}

}  // namespace medslip::train
