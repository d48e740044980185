#include <algorithm>
#include <cmath>

#include "medslip/errors.hpp"
#include "medslip/train_eval.hpp"

namespace medslip::train {

void FinetuneConfig::validate() const {
  if (!(fraction > 0) || fraction > 1) throw ConfigError("finetune: fraction must be in (0, 1]");
  if (epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("finetune: lr must be > 0");
}

nlohmann::json FinetuneConfig::to_json() const {
  return {{"fraction", fraction}, {"epochs", epochs},       {"batch_size", batch_size},
          {"lr", lr},             {"weight_decay", weight_decay}, {"seed", seed}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  try {
    c.fraction = j.value("fraction", c.fraction);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("finetune config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::size_t> sample_fraction(const std::vector<std::size_t>& pool, double fraction,
                                         std::uint64_t seed) {
  if (!(fraction > 0) || fraction > 1) throw ConfigError("fraction must be in (0, 1]");
  // Guard against 0.1 * 200 = 20.000000000000004 rounding up to 21.
  const double raw = fraction * static_cast<double>(pool.size());
  const auto count = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  if (count == 0) throw ConfigError("fraction selects zero studies");
  std::vector<std::size_t> pos(pool.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  Rng rng(derive_seed(seed, "finetune-fraction", 0));
  for (std::size_t i = 0; i < count; ++i) std::swap(pos[i], pos[i + rng.below(pos.size() - i)]);
  pos.resize(count);
  std::sort(pos.begin(), pos.end());
  std::vector<std::size_t> out;
  for (auto p : pos) out.push_back(pool[p]);
  return out;
}

namespace {

struct Loop {
  long steps_per_epoch = 0;
  long total = 0;
  long warmup = 0;
};

Loop plan(std::size_t n, const FinetuneConfig& cfg) {
  Loop l;
  l.steps_per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
  l.total = l.steps_per_epoch * cfg.epochs;
  l.warmup = static_cast<long>(std::floor(0.05 * l.total));
  return l;
}

std::vector<std::string> ids_of(const synth::Corpus& corpus, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(corpus.studies.at(i).study_id);
  return out;
}

/// Runs minibatch AdamW; `loss_of(k)` builds the graph for the k-th sampled study.
template <class LossFn>
void run_loop(ParamStore& store, std::size_t n, const FinetuneConfig& cfg, const char* purpose,
              LossFn&& loss_of) {
  const Loop lp = plan(n, cfg);
  AdamW opt(store, 0.9, 0.999, 1e-8, cfg.weight_decay);
  std::vector<std::size_t> order(n);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, purpose, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    for (long b = 0; b < lp.steps_per_epoch; ++b, ++step) {
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - begin);
      store.zero_grad();
      for (std::size_t k = begin; k < end; ++k) {
        const ag::Var loss = loss_of(order[k]);
        if (!std::isfinite(loss.scalar()))
          throw DivergenceError(purpose, std::string(purpose) + ": non-finite loss at step " +
                                             std::to_string(step));
        ag::backward(loss, inv);
      }
      clip_gradients(store, 1.0);
      opt.step(cosine_lr(step, lp.total, lp.warmup, cfg.lr));
    }
  }
  store.zero_grad();
}

}  // namespace

ClassifierResult finetune_classifier(const stream::Model& pretrained, const synth::Corpus& corpus,
                                     const std::vector<std::size_t>& train_pool,
                                     const std::vector<std::size_t>& test,
                                     const report::QuerySet& qs, const FinetuneConfig& cfg) {
  cfg.validate();
  const auto sampled = sample_fraction(train_pool, cfg.fraction, cfg.seed);
  const auto& bcfg = pretrained.config().backbone;

  ParamStore store;
  for (const auto& [name, v] : pretrained.params().items())
    if (name.rfind("backbone.", 0) == 0) store.add(name, v.value());
  const auto backbone = vision::Backbone::bind(bcfg, store);
  Rng init(derive_seed(cfg.seed, "finetune-head", 0));
  const int dv = bcfg.out_channels();
  const int m = static_cast<int>(qs.m());
  const auto W = store.add("head.weight", random_normal(dv, m, 1.0 / std::sqrt(dv), init));
  const auto b = store.add("head.bias", ag::Mat::Zero(1, m));

  auto logits_of = [&](const vision::ImageTensor& img) {
    const auto fm = vision::encode(img, backbone);
    return ag::transpose(ag::linear(ag::mean_rows(fm.tokens.value), W, b));  // m x 1
  };

  std::vector<Eigen::VectorXd> labels;
  for (auto i : sampled) {
    const auto& s = corpus.studies.at(i);
    labels.push_back(report::build_existence_matrix(s.triplets, qs, s.study_id).y_pathology);
  }
  run_loop(store, sampled.size(), cfg, "finetune-classifier", [&](std::size_t k) {
    return objectives::exist_loss(logits_of(corpus.studies.at(sampled[k]).image), labels[k]);
  });

  ag::Mat scores(static_cast<Eigen::Index>(test.size()), m), y(static_cast<Eigen::Index>(test.size()), m);
  for (std::size_t r = 0; r < test.size(); ++r) {
    const auto& s = corpus.studies.at(test[r]);
    const auto z = logits_of(s.image).value();
    for (int c = 0; c < m; ++c) scores(static_cast<Eigen::Index>(r), c) = objectives::sigmoid(z(c, 0));
    y.row(static_cast<Eigen::Index>(r)) =
        report::build_existence_matrix(s.triplets, qs, s.study_id).y_pathology.transpose();
  }
  ClassifierResult res;
  res.report = metric_auc_f1_acc(scores, y, qs.pathology_terms);
  res.sampled_ids = ids_of(corpus, sampled);
  res.head = std::move(store);
  return res;
}

namespace {

int level_stride(const vision::BackboneConfig& bb, int k) {
  int s = 1;
  for (int i = 0; i <= k; ++i) s *= bb.strides[static_cast<std::size_t>(i)];
  return s;
}

bool takes_skip(const vision::BackboneConfig& bb, int k) { return level_stride(bb, k) >= 4; }

ag::Spatial match(const ag::Spatial& x, int height, int width) {
  return x.height < height ? ag::crop(ag::upsample2x_nearest(x), height, width) : x;
}

}  // namespace

SegDecoder SegDecoder::create(const vision::BackboneConfig& bb, ParamStore& store,
                              std::uint64_t seed) {
  SegDecoder d;
  d.backbone = bb;
  Rng rng(derive_seed(seed, "seg-decoder", 0));
  const int K = static_cast<int>(bb.channels.size());
  int in = bb.channels[K - 1];
  auto conv = [&](int k, int cin, int cout, int level) {
    const int fan_in = k * k * cin;
    d.weights.push_back(store.add("decoder.level" + std::to_string(level) + ".weight",
                                  random_normal(fan_in, cout, std::sqrt(2.0 / fan_in), rng)));
    d.biases.push_back(store.add("decoder.level" + std::to_string(level) + ".bias", ag::Mat::Zero(1, cout)));
  };
  for (int k = K - 2; k >= 0; --k) {
    const int skip = takes_skip(bb, k) ? bb.channels[k] : 0;
    conv(3, in + skip, bb.channels[k], k);
    in = bb.channels[k];
  }
  const int head_ch = 8;
  conv(3, in, head_ch, -1);
  conv(1, head_ch, 1, -2);
  return d;
}

ag::Spatial SegDecoder::forward(const vision::FeatureMapVar& fm, int height, int width) const {
  const int K = static_cast<int>(fm.pyramid.size());
  ag::Spatial x = fm.pyramid[K - 1];
  std::size_t li = 0;
  for (int k = K - 2; k >= 0; --k, ++li) {
    const auto& ref = fm.pyramid[k];
    x = match(x, ref.height, ref.width);
    if (takes_skip(backbone, k)) x = ag::concat_channels(x, ref);
    x = ag::conv2d(x, weights[li], biases[li], 3, 1, 1);
    x.value = ag::relu(x.value);
  }
  x = match(x, height, width);
  x = ag::conv2d(x, weights[li], biases[li], 3, 1, 1);
  x.value = ag::relu(x.value);
  ++li;
  x = ag::conv2d(x, weights[li], biases[li], 1, 1, 0);
  x.value = ag::sigmoid(x.value);
  return x;
}

ag::Var dice_loss(const ag::Var& probs, const synth::Mask& gt, double smooth) {
  if (probs.rows() != static_cast<Eigen::Index>(gt.data.size()) || probs.cols() != 1)
    throw ShapeError("dice_loss: prediction does not match mask");
  Eigen::VectorXd g(probs.rows());
  for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = gt.data[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  const Eigen::VectorXd p = probs.value().col(0);
  const double I = p.dot(g), S = p.sum() + g.sum() + smooth;
  ag::Mat v(1, 1);
  v(0, 0) = 1.0 - (2.0 * I + smooth) / S;
  return ag::make_op(std::move(v), {probs}, [g, I, S, smooth](ag::Node& n) {
    const double up = n.grad(0, 0);
    auto& pg = n.parents[0]->grad_ref();
    const double num = 2.0 * I + smooth;
    for (Eigen::Index i = 0; i < g.size(); ++i) pg(i, 0) += up * -(2.0 * g(i) * S - num) / (S * S);
  });
}

SegmenterResult finetune_segmenter(const stream::Model& pretrained, const synth::Corpus& corpus,
                                   const std::vector<std::size_t>& train_pool,
                                   const std::vector<std::size_t>& test, const FinetuneConfig& cfg) {
  cfg.validate();
  const auto sampled = sample_fraction(train_pool, cfg.fraction, cfg.seed);
  const auto& bcfg = pretrained.config().backbone;
  ParamStore store;
  for (const auto& [name, v] : pretrained.params().items())
    if (name.rfind("backbone.", 0) == 0) store.add(name, v.value());
  const auto backbone = vision::Backbone::bind(bcfg, store);
  const auto decoder = SegDecoder::create(bcfg, store, cfg.seed);

  auto predict = [&](const vision::ImageTensor& img) {
    return decoder.forward(vision::encode(img, backbone), img.height, img.width);
  };
  std::vector<synth::Mask> masks;
  for (auto i : sampled) masks.push_back(synth::union_mask(corpus.studies.at(i)));
  run_loop(store, sampled.size(), cfg, "finetune-segmenter", [&](std::size_t k) {
    return dice_loss(predict(corpus.studies.at(sampled[k]).image).value, masks[k]);
  });

  SegmenterResult res;
  res.sampled_ids = ids_of(corpus, sampled);
  for (auto i : test) {
    const auto& s = corpus.studies.at(i);
    if (s.regions.empty()) continue;
    const auto p = predict(s.image);
    synth::Mask pred = synth::Mask::empty(s.image.height, s.image.width);
    for (std::size_t t = 0; t < pred.data.size(); ++t)
      pred.data[t] = p.value.value()(static_cast<Eigen::Index>(t), 0) >= 0.5 ? 1 : 0;
    const auto di = dice_iou(pred, synth::union_mask(s));
    res.dice += di.dice;
    res.iou += di.iou;
    ++res.evaluated;
  }
  if (res.evaluated) {
    res.dice /= static_cast<double>(res.evaluated);
    res.iou /= static_cast<double>(res.evaluated);
  }
  return res;
}

}  // namespace medslip::train
