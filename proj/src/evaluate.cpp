#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "medslip/errors.hpp"
#include "medslip/train_eval.hpp"

namespace medslip::train {

ag::Mat zero_shot_classify(const stream::Model& model,
                           const std::vector<const vision::ImageTensor*>& images,
                           const text::QueryEmbeddings& qe) {
  ag::Mat scores(static_cast<Eigen::Index>(images.size()), qe.E_p.rows());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto b = model.forward(*images[i], qe);
    for (Eigen::Index c = 0; c < b.z_p.size(); ++c)
      scores(static_cast<Eigen::Index>(i), c) = objectives::sigmoid(b.z_p(c));
  }
  return scores;
}

ag::Mat bilinear_upsample(const ag::Mat& grid, int height, int width) {
  const int h = static_cast<int>(grid.rows()), w = static_cast<int>(grid.cols());
  ag::Mat out(height, width);
  const double sy = static_cast<double>(h) / height, sx = static_cast<double>(w) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      out(y, x) = (1 - ty) * ((1 - tx) * grid(y0, x0) + tx * grid(y0, x1)) +
                  ty * ((1 - tx) * grid(y1, x0) + tx * grid(y1, x1));
    }
  }
  return out;
}

double quantile(const ag::Mat& values, double q) {
  if (values.size() == 0) throw InputError("quantile of an empty array");
  if (q < 0 || q > 1) throw InputError("quantile must be in [0, 1]");
  std::vector<double> v(values.data(), values.data() + values.size());
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

GroundingResult ground_attention(const Eigen::VectorXd& attention, int token_height,
                                 int token_width, int height, int width,
                                 double threshold_quantile) {
  if (attention.size() != static_cast<Eigen::Index>(token_height) * token_width)
    throw ShapeError("grounding: attention length does not match the token grid");
  ag::Mat grid(token_height, token_width);
  for (int t = 0; t < attention.size(); ++t) grid(t / token_width, t % token_width) = attention(t);

  GroundingResult r;
  r.heatmap = bilinear_upsample(grid, height, width);
  const double lo = r.heatmap.minCoeff(), hi = r.heatmap.maxCoeff();
  r.binary_mask = synth::Mask::empty(height, width);
  if (!(hi - lo > 1e-12 * std::max(1.0, std::abs(hi)))) {
    r.heatmap.setZero();
    r.degenerate = true;
    r.threshold_used = 1.0;
    return r;
  }
  r.heatmap = (r.heatmap.array() - lo) / (hi - lo);
  // First maximum in row-major order.
  double best = -1.0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (r.heatmap(y, x) > best) {
        best = r.heatmap(y, x);
        r.peak_x = x;
        r.peak_y = y;
      }
  r.threshold_used = quantile(r.heatmap, threshold_quantile);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) r.binary_mask.set(y, x, r.heatmap(y, x) >= r.threshold_used);
  return r;
}

GroundingResult zero_shot_ground(const stream::Model& model, const vision::ImageTensor& image,
                                 const text::QueryEmbeddings& qe, int pathology_index,
                                 double threshold_quantile) {
  if (pathology_index < 0 || pathology_index >= qe.E_p.rows())
    throw InputError("grounding: pathology index " + std::to_string(pathology_index) +
                     " out of range");
  const auto b = model.forward(image, qe);
  return ground_attention(b.A_p.row(pathology_index).transpose(), b.token_height, b.token_width,
                          image.height, image.width, threshold_quantile);
}

int pointing_game(const GroundingResult& result, const synth::BoundingBox& box) {
  return box.contains(result.peak_x, result.peak_y) ? 1 : 0;
}

int pointing_game(const GroundingResult& result, const synth::Mask& mask) {
  if (result.peak_y >= mask.height || result.peak_x >= mask.width) return 0;
  return mask.at(result.peak_y, result.peak_x) ? 1 : 0;
}

DiceIou dice_iou(const synth::Mask& pred, const synth::Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("dice_iou: mask shapes differ");
  std::size_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    a += p;
    b += g;
    inter += p && g;
  }
  if (a == 0 && b == 0) return {1.0, 1.0};
  const double uni = static_cast<double>(a + b - inter);
  return {2.0 * static_cast<double>(inter) / static_cast<double>(a + b),
          static_cast<double>(inter) / uni};
}

std::optional<double> auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  const Eigen::Index N = scores.size();
  std::vector<Eigen::Index> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores(a) < scores(b); });
  std::vector<double> rank(N);
  for (Eigen::Index i = 0; i < N;) {
    Eigen::Index j = i;
    while (j + 1 < N && scores(idx[j + 1]) == scores(idx[i])) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double pos = 0, neg = 0, rank_sum = 0;
  for (Eigen::Index i = 0; i < N; ++i) {
    if (labels(i) != 0.0 && labels(i) != 1.0) throw InputError("auc: labels must be binary");
    if (labels(i) == 1.0) {
      pos += 1;
      rank_sum += rank[i];
    } else {
      neg += 1;
    }
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

MetricReport metric_auc_f1_acc(const ag::Mat& scores, const ag::Mat& labels,
                               const std::vector<std::string>& names, double threshold) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols())
    throw ShapeError("metrics: scores and labels differ in shape");
  if (static_cast<Eigen::Index>(names.size()) != scores.cols())
    throw ShapeError("metrics: one name per class required");
  MetricReport rep;
  double auc_sum = 0, f1_sum = 0, acc_sum = 0;
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    ClassMetrics cm;
    cm.name = names[c];
    cm.auc = auc(scores.col(c), labels.col(c));
    double tp = 0, fp = 0, fn = 0, correct = 0;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      const bool p = scores(i, c) >= threshold, y = labels(i, c) == 1.0;
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
      correct += p == y;
    }
    cm.f1 = (2 * tp + fp + fn) > 0 ? 2 * tp / (2 * tp + fp + fn) : 1.0;
    cm.acc = scores.rows() > 0 ? correct / static_cast<double>(scores.rows()) : 0.0;
    if (cm.auc) {
      auc_sum += *cm.auc;
      ++rep.auc_classes;
    }
    f1_sum += cm.f1;
    acc_sum += cm.acc;
    rep.classes.push_back(cm);
  }
  const double C = static_cast<double>(scores.cols());
  rep.macro_auc = rep.auc_classes ? auc_sum / static_cast<double>(rep.auc_classes) : 0.0;
  rep.macro_f1 = C > 0 ? f1_sum / C : 0.0;
  rep.macro_acc = C > 0 ? acc_sum / C : 0.0;
  return rep;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json j{{"name", c.name}, {"f1", c.f1}, {"acc", c.acc}};
    j["auc"] = c.auc ? nlohmann::json(*c.auc) : nlohmann::json(nullptr);
    cls.push_back(j);
  }
  nlohmann::json j{{"classes", cls},
                   {"macro", {{"auc", macro_auc}, {"f1", macro_f1}, {"acc", macro_acc}}},
                   {"auc_classes", auc_classes}};
  if (dice) j["dice"] = *dice;
  if (iou) j["iou"] = *iou;
  if (pointing_game) j["pointing_game"] = *pointing_game;
  return j;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(10) << "class,auc,f1,acc\n";
  for (const auto& c : classes) {
    out << c.name << ',';
    if (c.auc) out << *c.auc;
    out << ',' << c.f1 << ',' << c.acc << '\n';
  }
  out << "macro," << macro_auc << ',' << macro_f1 << ',' << macro_acc << '\n';
  return out.str();
}

std::string GroundingEval::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(10) << "study_id,pathology,pointing_game,dice,iou,degenerate\n";
  for (const auto& r : rows)
    out << r.study_id << ',' << r.pathology << ',' << r.hit << ',' << r.dice << ',' << r.iou << ','
        << (r.degenerate ? 1 : 0) << '\n';
  out << "macro,," << pointing_game << ',' << dice << ',' << iou << ",\n";
  return out.str();
}

GroundingEval evaluate_grounding(const stream::Model& model, const synth::Corpus& corpus,
                                 const std::vector<std::size_t>& indices,
                                 const report::QuerySet& qs, const text::QueryEmbeddings& qe,
                                 double threshold_quantile) {
  GroundingEval ev;
  for (auto i : indices) {
    const auto& s = corpus.studies.at(i);
    std::vector<std::string> seen;
    std::optional<stream::StreamBundle> bundle;
    for (const auto& reg : s.regions) {
      if (std::find(seen.begin(), seen.end(), reg.pathology) != seen.end()) continue;
      seen.push_back(reg.pathology);
      const int pi = qs.pathology_index(reg.pathology);
      if (pi < 0) continue;
      if (!bundle) bundle = model.forward(s.image, qe);
      const auto g = ground_attention(bundle->A_p.row(pi).transpose(), bundle->token_height,
                                      bundle->token_width, s.image.height, s.image.width,
                                      threshold_quantile);
      int hit = 0;
      for (const auto& r2 : s.regions)
        if (r2.pathology == reg.pathology) hit = std::max(hit, pointing_game(g, r2.bbox));
      const auto di = dice_iou(g.binary_mask, synth::union_mask(s, reg.pathology));
      ev.rows.push_back({s.study_id, reg.pathology, hit, di.dice, di.iou, g.degenerate});
    }
  }
  if (!ev.rows.empty()) {
    for (const auto& r : ev.rows) {
      ev.pointing_game += r.hit;
      ev.dice += r.dice;
      ev.iou += r.iou;
    }
    const double n = static_cast<double>(ev.rows.size());
    ev.pointing_game /= n;
    ev.dice /= n;
    ev.iou /= n;
  }
  return ev;
}

MetricReport evaluate_zero_shot(const stream::Model& model, const synth::Corpus& corpus,
                                const std::vector<std::size_t>& indices,
                                const report::QuerySet& qs, const text::QueryEmbeddings& qe,
                                double threshold) {
  std::vector<const vision::ImageTensor*> images;
  ag::Mat labels(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(qs.m()));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& s = corpus.studies.at(indices[r]);
    images.push_back(&s.image);
    const auto em = report::build_existence_matrix(s.triplets, qs, s.study_id);
    labels.row(static_cast<Eigen::Index>(r)) = em.y_pathology.transpose();
  }
  const auto scores = zero_shot_classify(model, images, qe);
  return metric_auc_f1_acc(scores, labels, qs.pathology_terms, threshold);
}

double measure_latent_alignment(const text::QueryEmbeddings& qe, const ag::Mat& L_global,
                                double eps) {
  const Eigen::Index m = qe.E_p.rows(), n = qe.E_a.rows();
  if (L_global.rows() != m || L_global.cols() != n)
    throw ShapeError("latent alignment: L_global must be m x n");
  const double total = L_global.sum();
  if (!(total > 0)) throw InputError("latent alignment: L_global is all zero");
  auto unit = [](const ag::Mat& E) {
    ag::Mat U = E;
    for (Eigen::Index r = 0; r < U.rows(); ++r) U.row(r) /= std::max(U.row(r).norm(), 1e-8);
    return U;
  };
  const ag::Mat S = unit(qe.E_p) * unit(qe.E_a).transpose();
  const double mx = S.maxCoeff();
  const ag::Mat ex = (S.array() - mx).exp().matrix();
  const double z = ex.sum();
  double kl = 0.0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double p = L_global(i, j) / total;
      const double q = ex(i, j) / z;
      kl += p * std::log((p + eps) / (q + eps));
    }
  return kl;
}

ag::Mat global_existence(const std::vector<Example>& examples) {
  std::vector<report::ExistenceMatrix> ms;
  ms.reserve(examples.size());
  for (const auto& e : examples) ms.push_back(e.labels);
  return report::union_existence(ms);
}

}  // namespace medslip::train
