#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medslip/dual_stream.hpp"
#include "medslip/objectives.hpp"
#include "medslip/report_pipeline.hpp"
#include "medslip/synth_corpus.hpp"

namespace medslip::train {

/// Ablation toggles. The five rows of the ablation table are rows().
struct AblationFlags {
  bool pcl = true;
  bool ds = true;
  bool mg = true;
  bool icl = true;

  std::string label() const;
  nlohmann::json to_json() const;
  static AblationFlags from_json(const nlohmann::json& j);
  /// 1: exist only; 2: +PCL; 3: +PCL+DS+MG; 4: +PCL+DS+ICL; 5: everything.
  static AblationFlags row(int id);
};

struct TrainConfig {
  int batch_size = 16;
  int epochs = 20;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.05;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  std::uint64_t seed = 0;
  AblationFlags flags;
  objectives::LossWeights weights;
  objectives::ProtoCLConfig protocl;
  /// Per-epoch checkpoints kept on disk (older ones are pruned); 0 keeps all.
  int keep_checkpoints = 2;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Linear warmup to base_lr over warmup steps, then cosine decay to zero.
double cosine_lr(long step, long total_steps, long warmup_steps, double base_lr);

/// AdamW with decoupled weight decay on weight matrices (biases, norms and 1x1 scalars are
/// not decayed). Parameters whose gradient was never touched in a step are left unchanged.
class AdamW {
 public:
  AdamW(ParamStore& params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  long steps() const { return t_; }

 private:
  ParamStore& params_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<ag::Mat> m_, v_;
  long t_ = 0;
};

/// Global L2 norm of all touched gradients; rescales them to `max_norm` when above it.
double clip_gradients(ParamStore& params, double max_norm);

struct Example {
  const vision::ImageTensor* image = nullptr;
  report::ExistenceMatrix labels;
  std::string study_id;
};

std::vector<Example> make_examples(const synth::Corpus& corpus,
                                   const std::vector<std::size_t>& indices,
                                   const report::QuerySet& qs);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  objectives::LossReport report;
};

struct TrainResult {
  std::vector<StepRecord> trace;
  std::vector<double> epoch_mean_total;
  std::vector<std::filesystem::path> checkpoints;
};

/// Per-image loss terms as graph nodes; disabled components are empty Vars.
struct ImageLoss {
  ag::Var protocl, icl, exist, total;
};

ImageLoss image_loss(const stream::StreamBundleVar& bundle, const stream::QueryVars& q,
                     const report::ExistenceMatrix& em, const stream::Model& model,
                     const TrainConfig& cfg, Rng& rng);

/// Everything a pre-training run needs besides the model.
struct PretrainInputs {
  std::vector<Example> examples;
  report::QuerySet queries;
  text::RawQueryTexts raw;
};

/// Trains `model` in place. With a non-empty out_dir, writes loss_trace.csv, per-epoch
/// checkpoints and final/. Throws DivergenceError naming the first non-finite component.
TrainResult pretrain(stream::Model& model, const PretrainInputs& inputs, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir = {});

std::string trace_header(const AblationFlags& flags);
void write_trace_csv(const std::filesystem::path& path, const std::vector<StepRecord>& trace,
                     const AblationFlags& flags);

// ---------------------------------------------------------------------------------------
// Evaluation

/// sigmoid(z_p) per image; rows follow `images`.
ag::Mat zero_shot_classify(const stream::Model& model,
                           const std::vector<const vision::ImageTensor*>& images,
                           const text::QueryEmbeddings& qe);

struct GroundingResult {
  ag::Mat heatmap;  // H x W, rescaled to [0, 1]
  int peak_x = 0;
  int peak_y = 0;
  synth::Mask binary_mask;
  double threshold_used = 0.0;
  bool degenerate = false;
};

/// Bilinear resize with half-pixel centers (align_corners = false).
ag::Mat bilinear_upsample(const ag::Mat& grid, int height, int width);
/// Linear-interpolated quantile of all entries, q in [0, 1].
double quantile(const ag::Mat& values, double q);

/// Heatmap post-processing shared by zero_shot_ground: `attention` is one length-T row.
GroundingResult ground_attention(const Eigen::VectorXd& attention, int token_height,
                                 int token_width, int height, int width,
                                 double threshold_quantile = 0.95);

GroundingResult zero_shot_ground(const stream::Model& model, const vision::ImageTensor& image,
                                 const text::QueryEmbeddings& qe, int pathology_index,
                                 double threshold_quantile = 0.95);

int pointing_game(const GroundingResult& result, const synth::BoundingBox& box);
int pointing_game(const GroundingResult& result, const synth::Mask& mask);

struct DiceIou {
  double dice = 0.0;
  double iou = 0.0;
};
DiceIou dice_iou(const synth::Mask& pred, const synth::Mask& gt);

/// Mid-rank Mann-Whitney AUC; nullopt unless both classes are present.
std::optional<double> auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels);

struct ClassMetrics {
  std::string name;
  std::optional<double> auc;
  double f1 = 0.0;
  double acc = 0.0;
};

struct MetricReport {
  std::vector<ClassMetrics> classes;
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  double macro_acc = 0.0;
  std::size_t auc_classes = 0;  // classes with a defined AUC
  std::optional<double> dice, iou, pointing_game;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// scores and labels are N x C. Classes without both labels are excluded from macro AUC.
MetricReport metric_auc_f1_acc(const ag::Mat& scores, const ag::Mat& labels,
                               const std::vector<std::string>& names, double threshold = 0.5);

struct GroundingEval {
  struct Row {
    std::string study_id;
    std::string pathology;
    int hit = 0;
    double dice = 0.0;
    double iou = 0.0;
    bool degenerate = false;
  };
  std::vector<Row> rows;
  double pointing_game = 0.0;
  double dice = 0.0;
  double iou = 0.0;

  std::string to_csv() const;
};

/// Grounds every (study, positive in-set pathology) pair. Hits are scored against the bounding
/// boxes of all regions of that pathology; Dice/IoU against the union of their masks.
GroundingEval evaluate_grounding(const stream::Model& model, const synth::Corpus& corpus,
                                 const std::vector<std::size_t>& indices,
                                 const report::QuerySet& qs, const text::QueryEmbeddings& qe,
                                 double threshold_quantile = 0.95);

MetricReport evaluate_zero_shot(const stream::Model& model, const synth::Corpus& corpus,
                                const std::vector<std::size_t>& indices,
                                const report::QuerySet& qs, const text::QueryEmbeddings& qe,
                                double threshold = 0.5);

/// KL(p || q) with q = softmax of the flattened m x n cosine matrix of (E_p, E_a) and
/// p = L_global / sum(L_global). Throws InputError for an all-zero L_global.
double measure_latent_alignment(const text::QueryEmbeddings& qe, const ag::Mat& L_global,
                                double eps = 1e-12);
ag::Mat global_existence(const std::vector<Example>& examples);

// ---------------------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
  double fraction = 1.0;
  int epochs = 8;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

/// ceil(fraction * pool.size()) entries drawn without replacement, returned in pool order.
std::vector<std::size_t> sample_fraction(const std::vector<std::size_t>& pool, double fraction,
                                         std::uint64_t seed);

struct ClassifierResult {
  MetricReport report;
  std::vector<std::string> sampled_ids;
  ParamStore head;
};

/// Global-average-pooled backbone features -> linear head, BCE, backbone trained end-to-end.
ClassifierResult finetune_classifier(const stream::Model& pretrained, const synth::Corpus& corpus,
                                     const std::vector<std::size_t>& train_pool,
                                     const std::vector<std::size_t>& test,
                                     const report::QuerySet& qs, const FinetuneConfig& cfg);

/// U-Net style decoder over the backbone pyramid. Every level at stride >= 4 contributes a
/// skip connection; stride-2 transitions are undone by nearest 2x upsampling.
struct SegDecoder {
  vision::BackboneConfig backbone;
  std::vector<ag::Var> weights, biases;
  static SegDecoder create(const vision::BackboneConfig& bb, ParamStore& store, std::uint64_t seed);
  /// Per-pixel foreground probabilities, H x W flattened as a (H*W) x 1 spatial map.
  ag::Spatial forward(const vision::FeatureMapVar& fm, int height, int width) const;
};

ag::Var dice_loss(const ag::Var& probs, const synth::Mask& gt, double smooth = 1.0);

struct SegmenterResult {
  double dice = 0.0;
  double iou = 0.0;
  std::size_t evaluated = 0;  // test studies with at least one region
  std::vector<std::string> sampled_ids;
};

SegmenterResult finetune_segmenter(const stream::Model& pretrained, const synth::Corpus& corpus,
                                   const std::vector<std::size_t>& train_pool,
                                   const std::vector<std::size_t>& test, const FinetuneConfig& cfg);

// ---------------------------------------------------------------------------------------
// Gradient verification

struct GroupError {
  std::string group;
  double rel_error = 0.0;
  std::size_t entries = 0;  // entries compared
  std::size_t kinks = 0;    // entries skipped because the step crossed a non-differentiable point
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::vector<GroupError> groups;
  bool passed(double tol = 1e-4) const { return max_rel_error < tol; }
};

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t samples_per_group = 6;  // 0 checks every entry
  std::uint64_t seed = 0;
  /// Test fixture: analytic gradients of groups whose name contains this are corrupted by 1%.
  std::string corrupt_group;
};

/// Central differences on sampled entries of each named group versus backward().
/// Error is normwise: ||a - n|| / max(||a||, ||n||, 1e-10) over the sampled entries. An entry
/// whose central difference at h and h/4 disagree is counted as a kink and left out.
GradCheckResult check_gradients(const std::string& name, const std::function<ag::Var()>& loss,
                                const std::vector<std::pair<std::string, ag::Var>>& groups,
                                const GradCheckOptions& opt);

/// Named checks: "protocl", "protocl-literal", "icl", "exist", "projection", "backbone",
/// "forward". `instance` selects the random instance.
GradCheckResult grad_check(const std::string& selector, std::uint64_t instance,
                           const GradCheckOptions& opt = {});
std::vector<std::string> grad_check_selectors();

}  // namespace medslip::train
