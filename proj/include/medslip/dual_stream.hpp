#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "medslip/autograd.hpp"
#include "medslip/params.hpp"
#include "medslip/text_embedding.hpp"
#include "medslip/vision_backbone.hpp"

namespace medslip::stream {

struct DualStreamConfig {
  int layers = 2;
  int heads = 4;
  int d = 256;
  int predictor_hidden = 128;
  bool enable_dual_stream = true;   // DS
  bool enable_mask_generator = true;  // MG
  /// Attention map reported in A: "mean" averages heads over every layer, "final" uses the
  /// last layer only.
  std::string attention_map = "mean";

  /// Throws ConfigError unless heads divides d and layers >= 1.
  void validate() const;
  nlohmann::json to_json() const;
  static DualStreamConfig from_json(const nlohmann::json& j);
};

struct ModelConfig {
  int image_height = 96;
  int image_width = 96;
  vision::BackboneConfig backbone;
  DualStreamConfig stream;
  text::ProviderConfig provider;
  double icl_scale_init = 1.0 / 0.07;
  std::uint64_t seed = 0;

  int token_height() const;
  int token_width() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Per-token linear map d_v -> 2 d_v followed by a sigmoid, split into (G_a, G_p).
struct MaskGenerator {
  ag::Var weight;  // d_v x 2 d_v
  ag::Var bias;    // 1 x 2 d_v
};

struct AttentionLayer {
  ag::Var ln_query_gamma, ln_query_beta;
  ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
  ag::Var ln_ffn_gamma, ln_ffn_beta;
  ag::Var w1, b1, w2, b2;
};

/// Stack of pre-norm cross-attention decoder layers (queries attend to image tokens).
struct QueryNetwork {
  std::vector<AttentionLayer> layers;
  ag::Var pos_embed;  // T x d_v, added to key inputs only
  ag::Var ln_out_gamma, ln_out_beta;
};

/// Shared two-layer perceptron mapping a representation row to an existence logit.
struct ExistencePredictor {
  ag::Var w1, b1, w2, b2;
};

struct StreamGates {
  ag::Var G_a;
  ag::Var G_p;
};

/// Differentiable outputs of one forward pass.
struct StreamBundleVar {
  ag::Var R_a, R_p;  // n x d, m x d
  ag::Mat A_a, A_p;  // n x T, m x T attention (no gradient)
  ag::Var z_a, z_p;  // n x 1, m x 1 logits
  int token_height = 0;
  int token_width = 0;
};

struct StreamBundle {
  ag::Mat R_a, R_p;
  ag::Mat A_a, A_p;
  Eigen::VectorXd z_a, z_p;
  int token_height = 0;
  int token_width = 0;
};

StreamBundle values(const StreamBundleVar& b);

/// Query embeddings as graph inputs (projected through the trainable text layer).
struct QueryVars {
  ag::Var E_a;
  ag::Var E_p;
};

struct DisentangleResult {
  ag::Var F_a;
  ag::Var F_p;
  StreamGates gates;  // empty Vars when the mask generator is disabled
};

DisentangleResult disentangle(const ag::Var& tokens, const MaskGenerator& mg,
                              const DualStreamConfig& cfg);

struct AttendResult {
  ag::Var R;  // q x d
  ag::Mat A;  // q x T, head-averaged attention (all layers or final, per config)
};

AttendResult query_attend(const ag::Var& F, const ag::Var& E, const QueryNetwork& net,
                          const DualStreamConfig& cfg);

ag::Var predict_existence(const ag::Var& R, const ExistencePredictor& head);

/// All model parameters plus typed views onto them.
class Model {
 public:
  static Model create(const ModelConfig& cfg);
  /// Build a model whose parameters come from `store` (names must match create()).
  static Model from_params(const ModelConfig& cfg, const ParamStore& store);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  const vision::Backbone& backbone() const { return backbone_; }
  const text::ProjectionParams& projection() const { return projection_; }
  const MaskGenerator& mask_generator() const { return mask_generator_; }
  const QueryNetwork& anatomy_network() const { return anatomy_net_; }
  const QueryNetwork& pathology_network() const { return pathology_net_; }
  const ExistencePredictor& anatomy_head() const { return anatomy_head_; }
  const ExistencePredictor& pathology_head() const { return pathology_head_; }
  const ag::Var& icl_scale() const { return icl_scale_; }

  /// Change ablation flags without touching parameters.
  void set_flags(bool dual_stream, bool mask_generator);

  QueryVars query_vars(const text::RawQueryTexts& raw) const;
  /// encode_image -> disentangle -> query_attend per stream -> predict_existence.
  StreamBundleVar forward(const vision::ImageTensor& img, const QueryVars& q) const;
  /// Same pipeline starting from an already-encoded feature map.
  StreamBundleVar forward_features(const vision::FeatureMapVar& fm, const QueryVars& q) const;
  StreamBundle forward(const vision::ImageTensor& img, const text::QueryEmbeddings& qe) const;

 private:
  void bind();

  ModelConfig config_;
  ParamStore params_;
  vision::Backbone backbone_;
  text::ProjectionParams projection_;
  MaskGenerator mask_generator_;
  QueryNetwork anatomy_net_, pathology_net_;
  ExistencePredictor anatomy_head_, pathology_head_;
  ag::Var icl_scale_;
};

/// Checkpoint directory: params.bin (float32 arrays back to back) + manifest.json
/// ({"config": ..., "params": [{"name","shape","offset"}], "extra": ...}).
void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg,
                     const ParamStore& params, const nlohmann::json& extra = {});

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  nlohmann::json extra;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);
Model load_model(const std::filesystem::path& dir);

}  // namespace medslip::stream
