#include "medslip/dual_stream.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "medslip/errors.hpp"

namespace medslip::stream {

void DualStreamConfig::validate() const {
  if (layers < 1) throw ConfigError("dual stream: layers must be >= 1");
  if (heads < 1 || d % heads != 0)
    throw ConfigError("dual stream: heads (" + std::to_string(heads) + ") must divide d (" +
                      std::to_string(d) + ")");
  if (predictor_hidden < 1) throw ConfigError("dual stream: predictor_hidden must be >= 1");
  if (attention_map != "mean" && attention_map != "final")
    throw ConfigError("dual stream: attention_map must be 'mean' or 'final', got '" + attention_map + "'");
}

nlohmann::json DualStreamConfig::to_json() const {
  return {{"layers", layers},
          {"heads", heads},
          {"d", d},
          {"predictor_hidden", predictor_hidden},
          {"enable_dual_stream", enable_dual_stream},
          {"enable_mask_generator", enable_mask_generator},
          {"attention_map", attention_map}};
}

DualStreamConfig DualStreamConfig::from_json(const nlohmann::json& j) {
  DualStreamConfig c;
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.d = j.value("d", c.d);
  c.predictor_hidden = j.value("predictor_hidden", c.predictor_hidden);
  c.enable_dual_stream = j.value("enable_dual_stream", c.enable_dual_stream);
  c.enable_mask_generator = j.value("enable_mask_generator", c.enable_mask_generator);
  c.attention_map = j.value("attention_map", c.attention_map);
  c.validate();
  return c;
}

int ModelConfig::token_height() const { return backbone.output_size(image_height); }

int ModelConfig::token_width() const { return backbone.output_size(image_width); }

nlohmann::json ModelConfig::to_json() const {
  return {{"image_height", image_height},
          {"image_width", image_width},
          {"backbone", backbone.to_json()},
          {"stream", stream.to_json()},
          {"provider", provider.to_json()},
          {"icl_scale_init", icl_scale_init},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_height = j.value("image_height", c.image_height);
  c.image_width = j.value("image_width", c.image_width);
  if (j.contains("backbone")) c.backbone = vision::BackboneConfig::from_json(j["backbone"]);
  if (j.contains("stream")) c.stream = DualStreamConfig::from_json(j["stream"]);
  if (j.contains("provider")) c.provider = text::ProviderConfig::from_json(j["provider"]);
  c.icl_scale_init = j.value("icl_scale_init", c.icl_scale_init);
  c.seed = j.value("seed", c.seed);
  return c;
}

StreamBundle values(const StreamBundleVar& b) {
  StreamBundle out;
  out.R_a = b.R_a.value();
  out.R_p = b.R_p.value();
  out.A_a = b.A_a;
  out.A_p = b.A_p;
  out.z_a = b.z_a.value().col(0);
  out.z_p = b.z_p.value().col(0);
  out.token_height = b.token_height;
  out.token_width = b.token_width;
  return out;
}

DisentangleResult disentangle(const ag::Var& tokens, const MaskGenerator& mg,
                              const DualStreamConfig& cfg) {
  if (!cfg.enable_mask_generator) return {tokens, tokens, {}};
  const auto dv = tokens.cols();
  if (mg.weight.rows() != dv || mg.weight.cols() != 2 * dv)
    throw ShapeError("disentangle: mask generator expects " + std::to_string(mg.weight.rows()) +
                     " channels, tokens have " + std::to_string(dv));
  ag::Var gates = ag::sigmoid(ag::linear(tokens, mg.weight, mg.bias));
  StreamGates g{ag::slice_cols(gates, 0, dv), ag::slice_cols(gates, dv, dv)};
  return {ag::mul(tokens, g.G_a), ag::mul(tokens, g.G_p), g};
}

AttendResult query_attend(const ag::Var& F, const ag::Var& E, const QueryNetwork& net,
                          const DualStreamConfig& cfg) {
  cfg.validate();
  if (E.cols() != cfg.d) throw ShapeError("query_attend: query width does not match d");
  if (!F.value().allFinite()) throw NumericError("query_attend: non-finite image tokens");
  if (net.pos_embed.rows() != F.rows() || net.pos_embed.cols() != F.cols())
    throw ShapeError("query_attend: token grid does not match the positional embedding");
  const int dh = cfg.d / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const ag::Var keys_in = ag::add(F, net.pos_embed);

  ag::Var x = E;
  ag::Mat attention = ag::Mat::Zero(E.rows(), F.rows());
  const bool all_layers = cfg.attention_map == "mean";
  const double attention_weight =
      1.0 / static_cast<double>(cfg.heads * (all_layers ? net.layers.size() : 1));
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& L = net.layers[l];
    const ag::Var q = ag::linear(ag::layer_norm_rows(x, L.ln_query_gamma, L.ln_query_beta), L.wq, L.bq);
    const ag::Var k = ag::linear(keys_in, L.wk, L.bk);
    const ag::Var v = ag::linear(F, L.wv, L.bv);
    std::vector<ag::Var> heads;
    heads.reserve(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      const ag::Var scores = ag::scale(ag::matmul_nt(ag::slice_cols(q, h * dh, dh),
                                                     ag::slice_cols(k, h * dh, dh)),
                                       inv_sqrt);
      const ag::Var a = ag::softmax_rows(scores);
      if (all_layers || l + 1 == net.layers.size()) attention += attention_weight * a.value();
      heads.push_back(ag::matmul(a, ag::slice_cols(v, h * dh, dh)));
    }
    x = ag::add(x, ag::linear(ag::concat_cols(heads), L.wo, L.bo));
    const ag::Var hidden =
        ag::relu(ag::linear(ag::layer_norm_rows(x, L.ln_ffn_gamma, L.ln_ffn_beta), L.w1, L.b1));
    x = ag::add(x, ag::linear(hidden, L.w2, L.b2));
  }
  return {ag::layer_norm_rows(x, net.ln_out_gamma, net.ln_out_beta), std::move(attention)};
}

ag::Var predict_existence(const ag::Var& R, const ExistencePredictor& head) {
  if (R.cols() != head.w1.rows()) throw ShapeError("predict_existence: representation width");
  return ag::linear(ag::relu(ag::linear(R, head.w1, head.b1)), head.w2, head.b2);
}

namespace {

void add_query_network(ParamStore& s, const std::string& prefix, const ModelConfig& cfg,
                       std::uint64_t seed) {
  const int d = cfg.stream.d;
  const int dv = cfg.backbone.out_channels();
  const int t = cfg.token_height() * cfg.token_width();
  Rng rng(derive_seed(seed, prefix));
  auto lin = [&](int in, int out) { return random_normal(in, out, 1.0 / std::sqrt(in), rng); };
  for (int l = 0; l < cfg.stream.layers; ++l) {
    const auto p = prefix + ".layer" + std::to_string(l) + ".";
    s.add(p + "ln_query.gamma", ag::Mat::Ones(1, d));
    s.add(p + "ln_query.beta", ag::Mat::Zero(1, d));
    s.add(p + "wq", lin(d, d));
    s.add(p + "bq", ag::Mat::Zero(1, d));
    s.add(p + "wk", lin(dv, d));
    s.add(p + "bk", ag::Mat::Zero(1, d));
    s.add(p + "wv", lin(dv, d));
    s.add(p + "bv", ag::Mat::Zero(1, d));
    s.add(p + "wo", lin(d, d));
    s.add(p + "bo", ag::Mat::Zero(1, d));
    s.add(p + "ln_ffn.gamma", ag::Mat::Ones(1, d));
    s.add(p + "ln_ffn.beta", ag::Mat::Zero(1, d));
    s.add(p + "ffn.w1", lin(d, d));
    s.add(p + "ffn.b1", ag::Mat::Zero(1, d));
    s.add(p + "ffn.w2", lin(d, d));
    s.add(p + "ffn.b2", ag::Mat::Zero(1, d));
  }
  // Zero-initialized so that, at initialization, attention depends on content only.
  s.add(prefix + ".pos_embed", ag::Mat::Zero(t, dv));
  s.add(prefix + ".ln_out.gamma", ag::Mat::Ones(1, d));
  s.add(prefix + ".ln_out.beta", ag::Mat::Zero(1, d));
}

QueryNetwork bind_query_network(const ParamStore& s, const std::string& prefix, int layers) {
  QueryNetwork net;
  for (int l = 0; l < layers; ++l) {
    const auto p = prefix + ".layer" + std::to_string(l) + ".";
    AttentionLayer L;
    L.ln_query_gamma = s.get(p + "ln_query.gamma");
    L.ln_query_beta = s.get(p + "ln_query.beta");
    L.wq = s.get(p + "wq");
    L.bq = s.get(p + "bq");
    L.wk = s.get(p + "wk");
    L.bk = s.get(p + "bk");
    L.wv = s.get(p + "wv");
    L.bv = s.get(p + "bv");
    L.wo = s.get(p + "wo");
    L.bo = s.get(p + "bo");
    L.ln_ffn_gamma = s.get(p + "ln_ffn.gamma");
    L.ln_ffn_beta = s.get(p + "ln_ffn.beta");
    L.w1 = s.get(p + "ffn.w1");
    L.b1 = s.get(p + "ffn.b1");
    L.w2 = s.get(p + "ffn.w2");
    L.b2 = s.get(p + "ffn.b2");
    net.layers.push_back(L);
  }
  net.pos_embed = s.get(prefix + ".pos_embed");
  net.ln_out_gamma = s.get(prefix + ".ln_out.gamma");
  net.ln_out_beta = s.get(prefix + ".ln_out.beta");
  return net;
}

void add_predictor(ParamStore& s, const std::string& prefix, const ModelConfig& cfg,
                   std::uint64_t seed) {
  const int d = cfg.stream.d, h = cfg.stream.predictor_hidden;
  Rng rng(derive_seed(seed, prefix));
  s.add(prefix + ".w1", random_normal(d, h, std::sqrt(2.0 / d), rng));
  s.add(prefix + ".b1", ag::Mat::Zero(1, h));
  // Zero final layer: an untrained predictor scores every query at exactly 0.5.
  s.add(prefix + ".w2", ag::Mat::Zero(h, 1));
  s.add(prefix + ".b2", ag::Mat::Zero(1, 1));
}

ExistencePredictor bind_predictor(const ParamStore& s, const std::string& prefix) {
  return {s.get(prefix + ".w1"), s.get(prefix + ".b1"), s.get(prefix + ".w2"), s.get(prefix + ".b2")};
}

}  // namespace

Model Model::create(const ModelConfig& cfg) {
  cfg.stream.validate();
  if (cfg.image_height < vision::kMinImageSide || cfg.image_width < vision::kMinImageSide)
    throw ConfigError("model: image size below minimum");
  Model m;
  m.config_ = cfg;
  auto& s = m.params_;
  const auto seed = cfg.seed;
  {
    Rng rng(derive_seed(seed, "text_proj"));
    const int dt = cfg.provider.d_t;
    s.add("text_proj.weight", random_normal(dt, cfg.stream.d, 1.0 / std::sqrt(dt), rng));
    s.add("text_proj.bias", ag::Mat::Zero(1, cfg.stream.d));
  }
  vision::Backbone::create(cfg.backbone, s, seed);
  {
    const int dv = cfg.backbone.out_channels();
    Rng rng(derive_seed(seed, "mask_gen"));
    s.add("mask_gen.weight", random_normal(dv, 2 * dv, 1.0 / std::sqrt(dv), rng));
    s.add("mask_gen.bias", ag::Mat::Zero(1, 2 * dv));
  }
  add_query_network(s, "anatomy_qn", cfg, seed);
  add_query_network(s, "pathology_qn", cfg, seed);
  add_predictor(s, "anatomy_head", cfg, seed);
  add_predictor(s, "pathology_head", cfg, seed);
  s.add("icl.scale", ag::Mat::Constant(1, 1, cfg.icl_scale_init));
  m.bind();
  return m;
}

Model Model::from_params(const ModelConfig& cfg, const ParamStore& store) {
  Model m = create(cfg);
  for (const auto& [name, v] : m.params_.items()) {
    const auto& src = store.get(name).value();
    if (src.rows() != v.rows() || src.cols() != v.cols())
      throw CompatibilityError("parameter " + name + " has shape " + std::to_string(src.rows()) +
                               "x" + std::to_string(src.cols()) + ", model expects " +
                               std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
  }
  m.params_.load_values_from(store);
  return m;
}

void Model::bind() {
  const auto& s = params_;
  projection_.weight = s.get("text_proj.weight");
  projection_.bias = s.get("text_proj.bias");
  projection_.trainable = true;
  backbone_ = vision::Backbone::bind(config_.backbone, s);
  mask_generator_ = {s.get("mask_gen.weight"), s.get("mask_gen.bias")};
  anatomy_net_ = bind_query_network(s, "anatomy_qn", config_.stream.layers);
  pathology_net_ = bind_query_network(s, "pathology_qn", config_.stream.layers);
  anatomy_head_ = bind_predictor(s, "anatomy_head");
  pathology_head_ = bind_predictor(s, "pathology_head");
  icl_scale_ = s.get("icl.scale");
}

void Model::set_flags(bool dual_stream, bool mask_generator) {
  config_.stream.enable_dual_stream = dual_stream;
  config_.stream.enable_mask_generator = mask_generator;
}

QueryVars Model::query_vars(const text::RawQueryTexts& raw) const {
  return {text::project_rows(ag::constant(raw.anatomy), projection_),
          text::project_rows(ag::constant(raw.pathology), projection_)};
}

StreamBundleVar Model::forward_features(const vision::FeatureMapVar& fm, const QueryVars& q) const {
  const auto& cfg = config_.stream;
  StreamBundleVar out;
  out.token_height = fm.tokens.height;
  out.token_width = fm.tokens.width;
  if (cfg.enable_dual_stream) {
    const auto parts = disentangle(fm.tokens.value, mask_generator_, cfg);
    auto a = query_attend(parts.F_a, q.E_a, anatomy_net_, cfg);
    auto p = query_attend(parts.F_p, q.E_p, pathology_net_, cfg);
    out.R_a = a.R;
    out.A_a = std::move(a.A);
    out.R_p = p.R;
    out.A_p = std::move(p.A);
    out.z_a = predict_existence(out.R_a, anatomy_head_);
    out.z_p = predict_existence(out.R_p, pathology_head_);
  } else {
    // Single stream: entangled tokens, one query network and one predictor for both query sets.
    const auto& tokens = fm.tokens.value;
    auto a = query_attend(tokens, q.E_a, pathology_net_, cfg);
    auto p = query_attend(tokens, q.E_p, pathology_net_, cfg);
    out.R_a = a.R;
    out.A_a = std::move(a.A);
    out.R_p = p.R;
    out.A_p = std::move(p.A);
    out.z_a = predict_existence(out.R_a, pathology_head_);
    out.z_p = predict_existence(out.R_p, pathology_head_);
  }
  return out;
}

StreamBundleVar Model::forward(const vision::ImageTensor& img, const QueryVars& q) const {
  if (img.height != config_.image_height || img.width != config_.image_width)
    throw CompatibilityError("forward: image is " + std::to_string(img.height) + "x" +
                             std::to_string(img.width) + ", model expects " +
                             std::to_string(config_.image_height) + "x" +
                             std::to_string(config_.image_width));
  return forward_features(vision::encode(img, backbone_), q);
}

StreamBundle Model::forward(const vision::ImageTensor& img, const text::QueryEmbeddings& qe) const {
  if (qe.d() != config_.stream.d)
    throw CompatibilityError("forward: query embedding width " + std::to_string(qe.d()) +
                             " does not match model width " + std::to_string(config_.stream.d));
  return values(forward(img, QueryVars{ag::constant(qe.E_a), ag::constant(qe.E_p)}));
}

namespace {

void write_le_float(std::ostream& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  const char b[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff),
                     char((u >> 24) & 0xff)};
  out.write(b, 4);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg,
                     const ParamStore& params, const nlohmann::json& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "medslip-checkpoint-v1";
  manifest["dtype"] = "float32-le";
  manifest["config"] = cfg.to_json();
  manifest["params"] = nlohmann::json::array();
  const auto bin_tmp = dir / "params.bin.tmp";
  {
    std::ofstream bin(bin_tmp, std::ios::binary);
    if (!bin) throw IoError("cannot write " + bin_tmp.string());
    std::size_t offset = 0;
    for (const auto& [name, v] : params.items()) {
      const auto& m = v.value();
      if (!m.allFinite()) throw NumericError("save_checkpoint: non-finite values in " + name);
      manifest["params"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
      for (Eigen::Index i = 0; i < m.size(); ++i) write_le_float(bin, m.data()[i]);
      offset += 4 * static_cast<std::size_t>(m.size());
    }
    if (!bin) throw IoError("write failed: " + bin_tmp.string());
  }
  if (!extra.is_null()) manifest["extra"] = extra;
  const auto js_tmp = dir / "manifest.json.tmp";
  {
    std::ofstream js(js_tmp);
    js << manifest.dump(2) << '\n';
    if (!js) throw IoError("write failed: " + js_tmp.string());
  }
  std::filesystem::rename(bin_tmp, dir / "params.bin");
  std::filesystem::rename(js_tmp, dir / "manifest.json");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream js(dir / "manifest.json");
  if (!js) throw IoError("cannot open checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::parse_error& e) {
    throw CompatibilityError("checkpoint manifest: " + std::string(e.what()));
  }
  std::ifstream bin(dir / "params.bin", std::ios::binary | std::ios::ate);
  if (!bin) throw IoError("cannot open checkpoint parameters in " + dir.string());
  const auto size = static_cast<std::size_t>(bin.tellg());
  bin.seekg(0);
  std::vector<unsigned char> raw(size);
  bin.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));

  Checkpoint ck;
  ck.config = ModelConfig::from_json(manifest.at("config"));
  ck.extra = manifest.value("extra", nlohmann::json{});
  for (const auto& p : manifest.at("params")) {
    const auto name = p.at("name").get<std::string>();
    const auto rows = p.at("shape")[0].get<Eigen::Index>();
    const auto cols = p.at("shape")[1].get<Eigen::Index>();
    const auto offset = p.at("offset").get<std::size_t>();
    if (offset + 4 * static_cast<std::size_t>(rows * cols) > size)
      throw CompatibilityError("checkpoint: parameter " + name + " extends past end of file");
    ag::Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const unsigned char* b = raw.data() + offset + 4 * static_cast<std::size_t>(i);
      const std::uint32_t u = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                              (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
      float f;
      std::memcpy(&f, &u, 4);
      m.data()[i] = f;
    }
    ck.params.add(name, std::move(m));
  }
  return ck;
}

Model load_model(const std::filesystem::path& dir) {
  const auto ck = load_checkpoint(dir);
  return Model::from_params(ck.config, ck.params);
}

}  // namespace medslip::stream
