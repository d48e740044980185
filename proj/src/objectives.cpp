#include "medslip/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "medslip/errors.hpp"

namespace medslip::objectives {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void ProtoCLConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("protocl: tau must be > 0");
  if (k < 1) throw ConfigError("protocl: k must be >= 1");
}

std::string to_string(ProtoCLVariant v) {
  return v == ProtoCLVariant::kStandard ? "standard" : "paper-literal";
}

ProtoCLVariant parse_variant(const std::string& s) {
  if (s == "standard") return ProtoCLVariant::kStandard;
  if (s == "paper-literal") return ProtoCLVariant::kPaperLiteral;
  throw ConfigError("protocl: unknown variant '" + s + "'");
}

nlohmann::json ProtoCLConfig::to_json() const {
  return {{"tau", tau}, {"k", k}, {"variant", to_string(variant)}, {"rng_seed", rng_seed},
          {"normalize", normalize}};
}

ProtoCLConfig ProtoCLConfig::from_json(const nlohmann::json& j) {
  ProtoCLConfig c;
  c.tau = j.value("tau", c.tau);
  c.k = j.value("k", c.k);
  if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.normalize = j.value("normalize", c.normalize);
  c.validate();
  return c;
}

Prototype compute_prototype(const std::vector<Eigen::VectorXd>& positives) {
  if (positives.empty()) throw PreconditionError("compute_prototype: no positives");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(positives.front().size());
  for (const auto& p : positives) {
    if (p.size() != sum.size()) throw ShapeError("compute_prototype: dimension mismatch");
    sum += p;
  }
  return {sum / static_cast<double>(positives.size()), positives.size()};
}

namespace {

// log(sum(exp(s))) with the max-shift.
double log_sum_exp(const Eigen::VectorXd& s) {
  const double mx = s.maxCoeff();
  return mx + std::log((s.array() - mx).exp().sum());
}

void check_finite(const Eigen::VectorXd& v, const char* what) {
  if (!v.allFinite()) throw NumericError(std::string("protocl_loss: non-finite ") + what);
}

}  // namespace

ProtoCLGradient protocl_loss_grad(const Eigen::VectorXd& R,
                                  const std::vector<Eigen::VectorXd>& positives,
                                  const std::vector<Eigen::VectorXd>& negatives,
                                  const ProtoCLConfig& cfg) {
  cfg.validate();
  if (negatives.empty()) throw PreconditionError("protocl_loss: no negatives");
  check_finite(R, "representation");
  for (const auto& p : positives) check_finite(p, "positive");
  for (const auto& n : negatives) {
    check_finite(n, "negative");
    if (n.size() != R.size()) throw ShapeError("protocl_loss: negative dimension mismatch");
  }
  const Prototype proto = compute_prototype(positives);
  if (proto.vector.size() != R.size()) throw ShapeError("protocl_loss: positive dimension mismatch");
  const auto k = static_cast<Eigen::Index>(negatives.size());
  const double inv_tau = 1.0 / cfg.tau;

  ProtoCLGradient g;
  g.d_negatives.resize(negatives.size());
  const double s_pos = R.dot(proto.vector) * inv_tau;
  Eigen::VectorXd d_proto;
  if (cfg.variant == ProtoCLVariant::kStandard) {
    Eigen::VectorXd s(k + 1);
    s(0) = s_pos;
    for (Eigen::Index i = 0; i < k; ++i) s(i + 1) = R.dot(negatives[i]) * inv_tau;
    const double lse = log_sum_exp(s);
    g.loss = lse - s_pos;
    const Eigen::VectorXd w = (s.array() - lse).exp();
    g.d_R = (w(0) - 1.0) * inv_tau * proto.vector;
    for (Eigen::Index i = 0; i < k; ++i) {
      g.d_R += w(i + 1) * inv_tau * negatives[i];
      g.d_negatives[i] = w(i + 1) * inv_tau * R;
    }
    d_proto = (w(0) - 1.0) * inv_tau * R;
  } else {
    Eigen::VectorXd s(k);
    for (Eigen::Index i = 0; i < k; ++i) s(i) = R.dot(negatives[i]);
    const double lse = log_sum_exp(s);
    g.loss = lse - s_pos;
    const Eigen::VectorXd w = (s.array() - lse).exp();
    g.d_R = -inv_tau * proto.vector;
    for (Eigen::Index i = 0; i < k; ++i) {
      g.d_R += w(i) * negatives[i];
      g.d_negatives[i] = w(i) * R;
    }
    d_proto = -inv_tau * R;
  }
  g.d_positives.assign(positives.size(), d_proto / static_cast<double>(positives.size()));
  if (!std::isfinite(g.loss)) throw NumericError("protocl_loss: non-finite loss");
  return g;
}

double protocl_loss(const Eigen::VectorXd& R, const std::vector<Eigen::VectorXd>& positives,
                    const std::vector<Eigen::VectorXd>& negatives, const ProtoCLConfig& cfg) {
  return protocl_loss_grad(R, positives, negatives, cfg).loss;
}

namespace {

struct ProtoTerm {
  int query = 0;
  std::vector<int> positives;
  std::vector<int> negatives;
};

// Mean of ProtoCL terms; each term pairs row `query` of R with rows of E.
ag::Var protocl_terms(const ag::Var& R, const ag::Var& E, std::vector<ProtoTerm> terms,
                      const ProtoCLConfig& cfg) {
  if (R.cols() != E.cols()) throw ShapeError("protocl: representation and embedding widths differ");
  if (terms.empty()) return ag::constant(ag::Mat::Zero(1, 1));
  const ag::Mat& Rv = R.value();
  const ag::Mat& Ev = E.value();
  ag::Mat dR = ag::Mat::Zero(Rv.rows(), Rv.cols());
  ag::Mat dE = ag::Mat::Zero(Ev.rows(), Ev.cols());
  double total = 0.0;
  const double inv_count = 1.0 / static_cast<double>(terms.size());
  for (const auto& t : terms) {
    std::vector<Eigen::VectorXd> pos, neg;
    for (int i : t.positives) pos.push_back(Ev.row(i).transpose());
    for (int i : t.negatives) neg.push_back(Ev.row(i).transpose());
    const auto g = protocl_loss_grad(Rv.row(t.query).transpose(), pos, neg, cfg);
    total += g.loss;
    dR.row(t.query) += g.d_R.transpose() * inv_count;
    for (std::size_t i = 0; i < t.positives.size(); ++i)
      dE.row(t.positives[i]) += g.d_positives[i].transpose() * inv_count;
    for (std::size_t i = 0; i < t.negatives.size(); ++i)
      dE.row(t.negatives[i]) += g.d_negatives[i].transpose() * inv_count;
  }
  ag::Mat out(1, 1);
  out(0, 0) = total * inv_count;
  return ag::make_op(std::move(out), {R, E},
                     [dR = std::move(dR), dE = std::move(dE)](ag::Node& self) {
                       const double g = self.grad(0, 0);
                       if (self.parents[0]->requires_grad) self.parents[0]->grad_ref() += g * dR;
                       if (self.parents[1]->requires_grad) self.parents[1]->grad_ref() += g * dE;
                     });
}

}  // namespace

ag::Var protocl_loss(const ag::Var& R, const ag::Var& E, const std::vector<int>& positive_rows,
                     const std::vector<int>& negative_rows, const ProtoCLConfig& cfg) {
  if (R.rows() != 1) throw ShapeError("protocl_loss: R must be a single row");
  for (int i : positive_rows)
    if (i < 0 || i >= E.rows()) throw ShapeError("protocl_loss: positive row out of range");
  for (int i : negative_rows)
    if (i < 0 || i >= E.rows()) throw ShapeError("protocl_loss: negative row out of range");
  if (positive_rows.empty()) throw PreconditionError("protocl_loss: no positives");
  return protocl_terms(R, E, {{0, positive_rows, negative_rows}}, cfg);
}

std::vector<int> sample_negatives(int rows, const std::vector<int>& positive_rows, int k, Rng& rng) {
  if (k < 1) throw ConfigError("sample_negatives: k must be >= 1");
  std::vector<int> pool;
  for (int r = 0; r < rows; ++r)
    if (std::find(positive_rows.begin(), positive_rows.end(), r) == positive_rows.end())
      pool.push_back(r);
  if (pool.empty()) throw SamplingError("sample_negatives: every row is positive");
  std::vector<int> out;
  out.reserve(k);
  if (static_cast<int>(pool.size()) >= k) {
    // Partial Fisher-Yates.
    for (int i = 0; i < k; ++i) {
      const auto j = i + static_cast<int>(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    for (int i = 0; i < k; ++i) out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

std::vector<Eigen::VectorXd> sample_negatives(const ag::Mat& qe_rows,
                                              const std::vector<int>& positive_rows, int k,
                                              Rng& rng) {
  std::vector<Eigen::VectorXd> out;
  for (int i : sample_negatives(static_cast<int>(qe_rows.rows()), positive_rows, k, rng))
    out.push_back(qe_rows.row(i).transpose());
  return out;
}

ag::Var protocl_stream_loss(const stream::StreamBundleVar& bundle,
                            const report::ExistenceMatrix& em, const stream::QueryVars& qe,
                            const ProtoCLConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto m = em.L.rows(), n = em.L.cols();
  if (bundle.R_a.rows() != n || bundle.R_p.rows() != m || qe.E_a.rows() != n || qe.E_p.rows() != m)
    throw ShapeError("protocl_stream_loss: bundle, embeddings and existence matrix disagree");

  // Anatomy direction: R_a[j] against prototypes of positive pathology embeddings.
  std::vector<ProtoTerm> anatomy_terms;
  for (Eigen::Index j = 0; j < n; ++j) {
    ProtoTerm t{static_cast<int>(j), {}, {}};
    for (Eigen::Index i = 0; i < m; ++i)
      if (em.L(i, j) > 0.5) t.positives.push_back(static_cast<int>(i));
    if (t.positives.empty() || static_cast<Eigen::Index>(t.positives.size()) == m) continue;
    t.negatives = sample_negatives(static_cast<int>(m), t.positives, cfg.k, rng);
    anatomy_terms.push_back(std::move(t));
  }
  // Pathology direction: R_p[i] against prototypes of positive anatomy embeddings.
  std::vector<ProtoTerm> pathology_terms;
  for (Eigen::Index i = 0; i < m; ++i) {
    ProtoTerm t{static_cast<int>(i), {}, {}};
    for (Eigen::Index j = 0; j < n; ++j)
      if (em.L(i, j) > 0.5) t.positives.push_back(static_cast<int>(j));
    if (t.positives.empty() || static_cast<Eigen::Index>(t.positives.size()) == n) continue;
    t.negatives = sample_negatives(static_cast<int>(n), t.positives, cfg.k, rng);
    pathology_terms.push_back(std::move(t));
  }
  const auto na = anatomy_terms.size(), np = pathology_terms.size();
  if (na + np == 0) return ag::constant(ag::Mat::Zero(1, 1));

  auto prep = [&](const ag::Var& v) { return cfg.normalize ? ag::l2_normalize_rows(v) : v; };
  const double total = static_cast<double>(na + np);
  ag::Var loss;
  if (na > 0)
    loss = ag::scale(protocl_terms(prep(bundle.R_a), prep(qe.E_p), std::move(anatomy_terms), cfg),
                     static_cast<double>(na) / total);
  if (np > 0) {
    ag::Var lp = ag::scale(
        protocl_terms(prep(bundle.R_p), prep(qe.E_a), std::move(pathology_terms), cfg),
        static_cast<double>(np) / total);
    loss = loss ? ag::add(loss, lp) : lp;
  }
  return loss;
}

namespace {

void check_icl_shapes(const ag::Mat& R_p, const ag::Mat& R_a, const ag::Mat& L) {
  if (R_p.cols() != R_a.cols()) throw ShapeError("icl_loss: representation widths differ");
  if (L.rows() != R_p.rows() || L.cols() != R_a.rows())
    throw ShapeError("icl_loss: L must be m x n");
}

constexpr double kNormEps = 1e-8;

}  // namespace

double icl_loss(const ag::Mat& R_p, const ag::Mat& R_a, const ag::Mat& L, double scale) {
  check_icl_shapes(R_p, R_a, L);
  const ag::Mat U = R_p.array().colwise() / R_p.rowwise().norm().cwiseMax(kNormEps).array();
  const ag::Mat V = R_a.array().colwise() / R_a.rowwise().norm().cwiseMax(kNormEps).array();
  const ag::Mat S = U * V.transpose();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < S.rows(); ++i)
    for (Eigen::Index j = 0; j < S.cols(); ++j) {
      const double z = scale * S(i, j);
      sum += softplus(z) - L(i, j) * z;
    }
  return sum / static_cast<double>(S.size());
}

ag::Var icl_loss(const ag::Var& R_p, const ag::Var& R_a, const ag::Mat& L, const ag::Var& scale) {
  check_icl_shapes(R_p.value(), R_a.value(), L);
  if (scale.rows() != 1 || scale.cols() != 1) throw ShapeError("icl_loss: scale must be 1x1");
  const ag::Var U = ag::l2_normalize_rows(R_p, kNormEps);
  const ag::Var V = ag::l2_normalize_rows(R_a, kNormEps);
  const ag::Mat S = U.value() * V.value().transpose();
  const double s = scale.scalar();
  const double inv = 1.0 / static_cast<double>(S.size());
  double sum = 0.0;
  ag::Mat dz(S.rows(), S.cols());
  for (Eigen::Index i = 0; i < S.rows(); ++i)
    for (Eigen::Index j = 0; j < S.cols(); ++j) {
      const double z = s * S(i, j);
      sum += softplus(z) - L(i, j) * z;
      dz(i, j) = (sigmoid(z) - L(i, j)) * inv;
    }
  ag::Mat out(1, 1);
  out(0, 0) = sum * inv;
  return ag::make_op(std::move(out), {U, V, scale},
                     [S, dz = std::move(dz)](ag::Node& self) {
                       const double g = self.grad(0, 0);
                       auto& pu = self.parents[0];
                       auto& pv = self.parents[1];
                       auto& ps = self.parents[2];
                       const double sc = ps->value(0, 0);
                       const ag::Mat dS = dz * (g * sc);
                       if (pu->requires_grad) pu->grad_ref().noalias() += dS * pv->value;
                       if (pv->requires_grad) pv->grad_ref().noalias() += dS.transpose() * pu->value;
                       if (ps->requires_grad) ps->grad_ref()(0, 0) += g * dz.cwiseProduct(S).sum();
                     });
}

namespace {

void check_labels(const Eigen::VectorXd& y) {
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y(i) != 0.0 && y(i) != 1.0)
      throw InputError("exist_loss: labels must be 0 or 1, got " + std::to_string(y(i)));
}

}  // namespace

double exist_loss(const Eigen::VectorXd& logits, const Eigen::VectorXd& y) {
  if (logits.size() != y.size()) throw ShapeError("exist_loss: length mismatch");
  if (logits.size() == 0) throw ShapeError("exist_loss: empty input");
  check_labels(y);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) sum += softplus(logits(i)) - y(i) * logits(i);
  return sum / static_cast<double>(y.size());
}

ag::Var exist_loss(const ag::Var& logits, const Eigen::VectorXd& y) {
  if (logits.cols() != 1) throw ShapeError("exist_loss: logits must be a column");
  const Eigen::VectorXd z = logits.value().col(0);
  ag::Mat out(1, 1);
  out(0, 0) = exist_loss(z, y);
  const double inv = 1.0 / static_cast<double>(y.size());
  ag::Mat dz(z.size(), 1);
  for (Eigen::Index i = 0; i < z.size(); ++i) dz(i, 0) = (sigmoid(z(i)) - y(i)) * inv;
  return ag::make_op(std::move(out), {logits}, [dz = std::move(dz)](ag::Node& self) {
    self.parents[0]->grad_ref() += self.grad(0, 0) * dz;
  });
}

LossReport total_loss(double protocl, double icl, double exist, const LossWeights& w) {
  if (!std::isfinite(protocl) || !std::isfinite(icl) || !std::isfinite(exist))
    throw NumericError("total_loss: non-finite component (protocl=" + std::to_string(protocl) +
                       ", icl=" + std::to_string(icl) + ", exist=" + std::to_string(exist) + ")");
  if (w.protocl < 0 || w.icl < 0 || w.exist < 0) throw ConfigError("total_loss: negative weight");
  LossReport r;
  r.protocl = protocl;
  r.icl = icl;
  r.exist = exist;
  r.weights = w;
  r.total = w.protocl * protocl + w.icl * icl + w.exist * exist;
  return r;
}

}  // namespace medslip::objectives
