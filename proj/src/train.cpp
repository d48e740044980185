#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "medslip/errors.hpp"
#include "medslip/train_eval.hpp"

namespace medslip::train {

std::string AblationFlags::label() const {
  std::string s = "BL";
  if (pcl) s += "+PCL";
  if (ds) s += "+DS";
  if (mg) s += "+MG";
  if (icl) s += "+ICL";
  return s;
}

nlohmann::json AblationFlags::to_json() const {
  return {{"pcl", pcl}, {"ds", ds}, {"mg", mg}, {"icl", icl}};
}

AblationFlags AblationFlags::from_json(const nlohmann::json& j) {
  AblationFlags f;
  f.pcl = j.value("pcl", f.pcl);
  f.ds = j.value("ds", f.ds);
  f.mg = j.value("mg", f.mg);
  f.icl = j.value("icl", f.icl);
  return f;
}

AblationFlags AblationFlags::row(int id) {
  switch (id) {
    case 1: return {false, false, false, false};
    case 2: return {true, false, false, false};
    case 3: return {true, true, true, false};
    case 4: return {true, true, false, true};
    case 5: return {true, true, true, true};
  }
  throw ConfigError("ablation row must be in 1..5, got " + std::to_string(id));
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("train: betas must be in [0, 1)");
  if (warmup_fraction < 0 || warmup_fraction >= 1) throw ConfigError("train: warmup_fraction must be in [0, 1)");
  if (weights.protocl < 0 || weights.icl < 0 || weights.exist < 0)
    throw ConfigError("train: loss weights must be >= 0");
  protocl.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"epochs", epochs},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"betas", {beta1, beta2}},
          {"adam_eps", adam_eps},
          {"warmup_fraction", warmup_fraction},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"flags", flags.to_json()},
          {"weights", {{"protocl", weights.protocl}, {"icl", weights.icl}, {"exist", weights.exist}}},
          {"protocl", protocl.to_json()},
          {"keep_checkpoints", keep_checkpoints}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      c.beta1 = j["betas"].at(0).get<double>();
      c.beta2 = j["betas"].at(1).get<double>();
    }
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    if (j.contains("flags")) c.flags = AblationFlags::from_json(j["flags"]);
    if (j.contains("weights")) {
      const auto& w = j["weights"];
      c.weights.protocl = w.value("protocl", c.weights.protocl);
      c.weights.icl = w.value("icl", c.weights.icl);
      c.weights.exist = w.value("exist", c.weights.exist);
    }
    if (j.contains("protocl")) c.protocl = objectives::ProtoCLConfig::from_json(j["protocl"]);
    c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double cosine_lr(long step, long total_steps, long warmup_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const long span = std::max(1L, total_steps - warmup_steps);
  const double progress = std::clamp(static_cast<double>(step - warmup_steps) / span, 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

bool touched(const ag::Var& v) { return v.node()->grad.size() != 0; }
bool decayed(const ag::Var& v) { return v.rows() > 1 && v.cols() > 1; }

}  // namespace

AdamW::AdamW(ParamStore& params, double beta1, double beta2, double eps, double weight_decay)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& [name, v] : params_.items()) {
    m_.push_back(ag::Mat::Zero(v.rows(), v.cols()));
    v_.push_back(ag::Mat::Zero(v.rows(), v.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto& items = params_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    ag::Var p = items[i].second;
    if (!touched(p)) continue;
    const ag::Mat& g = p.grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    ag::Mat& w = p.mutable_value();
    if (decayed(p) && weight_decay_ > 0) w *= (1.0 - lr * weight_decay_);
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

double clip_gradients(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, v] : params.items())
    if (touched(v)) sq += v.grad().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [name, v] : params.items()) {
      ag::Var p = v;
      if (touched(p)) p.mutable_grad() *= s;
    }
  }
  return norm;
}

std::vector<Example> make_examples(const synth::Corpus& corpus,
                                   const std::vector<std::size_t>& indices,
                                   const report::QuerySet& qs) {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    if (i >= corpus.studies.size()) throw InputError("study index out of range: " + std::to_string(i));
    const auto& s = corpus.studies[i];
    out.push_back({&s.image, report::build_existence_matrix(s.triplets, qs, s.study_id), s.study_id});
  }
  return out;
}

ImageLoss image_loss(const stream::StreamBundleVar& bundle, const stream::QueryVars& q,
                     const report::ExistenceMatrix& em, const stream::Model& model,
                     const TrainConfig& cfg, Rng& rng) {
  ImageLoss out;
  std::vector<ag::Var> terms;
  if (cfg.flags.pcl) {
    out.protocl = objectives::protocl_stream_loss(bundle, em, q, cfg.protocl, rng);
    terms.push_back(ag::scale(out.protocl, cfg.weights.protocl));
  }
  if (cfg.flags.icl) {
    out.icl = objectives::icl_loss(bundle.R_p, bundle.R_a, em.L, model.icl_scale());
    terms.push_back(ag::scale(out.icl, cfg.weights.icl));
  }
  out.exist = ag::add(objectives::exist_loss(bundle.z_a, em.y_anatomy),
                      objectives::exist_loss(bundle.z_p, em.y_pathology));
  terms.push_back(ag::scale(out.exist, cfg.weights.exist));
  out.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = ag::add(out.total, terms[i]);
  return out;
}

std::string trace_header(const AblationFlags& flags) {
  std::string h = "step,epoch";
  if (flags.pcl) h += ",protocl";
  if (flags.icl) h += ",icl";
  return h + ",exist,total";
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<StepRecord>& trace,
                     const AblationFlags& flags) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + path.string());
    out << trace_header(flags) << '\n' << std::setprecision(17);
    for (const auto& r : trace) {
      out << r.step << ',' << r.epoch;
      if (flags.pcl) out << ',' << r.report.protocl;
      if (flags.icl) out << ',' << r.report.icl;
      out << ',' << r.report.exist << ',' << r.report.total << '\n';
    }
    if (!out) throw IoError("cannot write " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

void check_finite(const char* component, double v, long step) {
  if (!std::isfinite(v))
    throw DivergenceError(component, std::string("non-finite ") + component + " loss at step " +
                                         std::to_string(step));
}

nlohmann::json run_extra(const PretrainInputs& inputs, const TrainConfig& cfg, int epoch) {
  return {{"queries", inputs.queries.to_json()}, {"train", cfg.to_json()}, {"epoch", epoch}};
}

}  // namespace

TrainResult pretrain(stream::Model& model, const PretrainInputs& inputs, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir) {
  cfg.validate();
  if (inputs.examples.empty()) throw InputError("pretrain: no training examples");
  if (static_cast<std::size_t>(inputs.raw.anatomy.rows()) != inputs.queries.n() ||
      static_cast<std::size_t>(inputs.raw.pathology.rows()) != inputs.queries.m())
    throw CompatibilityError("pretrain: raw query texts do not match the query set");
  for (const auto& ex : inputs.examples)
    if (static_cast<std::size_t>(ex.labels.L.rows()) != inputs.queries.m() ||
        static_cast<std::size_t>(ex.labels.L.cols()) != inputs.queries.n())
      throw CompatibilityError("pretrain: existence matrix of " + ex.study_id +
                               " does not match the query set");

  model.set_flags(cfg.flags.ds, cfg.flags.mg);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  const std::size_t N = inputs.examples.size();
  const long steps_per_epoch = static_cast<long>((N + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup = static_cast<long>(std::floor(cfg.warmup_fraction * total_steps));

  AdamW opt(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  TrainResult result;
  std::vector<std::size_t> order(N);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, "pretrain-shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_total = 0.0;
    for (long b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end = std::min(N, begin + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - begin);
      model.params().zero_grad();
      objectives::LossReport rep;
      rep.weights = cfg.weights;
      for (std::size_t k = begin; k < end; ++k) {
        const Example& ex = inputs.examples[order[k]];
        Rng rng(derive_seed(cfg.seed, "pretrain-negatives", static_cast<std::uint64_t>(step * cfg.batch_size + (k - begin))));
        ImageLoss loss;
        try {
          const auto q = model.query_vars(inputs.raw);
          const auto bundle = model.forward(*ex.image, q);
          loss = image_loss(bundle, q, ex.labels, model, cfg, rng);
        } catch (const DivergenceError&) {
          throw;
        } catch (const NumericError& e) {
          throw DivergenceError("forward", "forward pass diverged at step " + std::to_string(step) + ": " + e.what());
        }
        if (loss.protocl) check_finite("protocl", loss.protocl.scalar(), step);
        if (loss.icl) check_finite("icl", loss.icl.scalar(), step);
        check_finite("exist", loss.exist.scalar(), step);
        check_finite("total", loss.total.scalar(), step);
        if (loss.protocl) rep.protocl += inv * loss.protocl.scalar();
        if (loss.icl) rep.icl += inv * loss.icl.scalar();
        rep.exist += inv * loss.exist.scalar();
        rep.total += inv * loss.total.scalar();
        ag::backward(loss.total, inv);
      }
      const double gnorm = clip_gradients(model.params(), cfg.grad_clip);
      check_finite("gradient", gnorm, step);
      opt.step(cosine_lr(step, total_steps, warmup, cfg.lr));
      for (const auto& [name, v] : model.params().items())
        if (!v.value().allFinite())
          throw DivergenceError(name, "non-finite parameter " + name + " after step " + std::to_string(step));
      result.trace.push_back({step, epoch, rep});
      epoch_total += rep.total;
    }
    result.epoch_mean_total.push_back(epoch_total / static_cast<double>(steps_per_epoch));

    if (!out_dir.empty()) {
      const auto dir = out_dir / ("epoch_" + std::to_string(epoch + 1));
      stream::save_checkpoint(dir, model.config(), model.params(), run_extra(inputs, cfg, epoch + 1));
      result.checkpoints.push_back(dir);
      if (cfg.keep_checkpoints > 0 &&
          result.checkpoints.size() > static_cast<std::size_t>(cfg.keep_checkpoints)) {
        const auto stale = result.checkpoints[result.checkpoints.size() - cfg.keep_checkpoints - 1];
        std::filesystem::remove_all(stale);
      }
      write_trace_csv(out_dir / "loss_trace.csv", result.trace, cfg.flags);
    }
  }
  model.params().zero_grad();
  if (!out_dir.empty())
    stream::save_checkpoint(out_dir / "final", model.config(), model.params(),
                            run_extra(inputs, cfg, cfg.epochs));
  return result;
}

}  // namespace medslip::train
