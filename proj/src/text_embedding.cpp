#include "medslip/text_embedding.hpp"

#include <cctype>
#include <cstring>
#include <fstream>

#include "medslip/errors.hpp"
#include "medslip/rng.hpp"

namespace medslip::text {

nlohmann::json ProviderConfig::to_json() const {
  nlohmann::json j{{"provider", provider}, {"seed", seed}, {"d_t", d_t}};
  if (!embeddings.empty()) j["embeddings"] = embeddings.string();
  if (!texts.empty()) j["texts"] = texts.string();
  return j;
}

ProviderConfig ProviderConfig::from_json(const nlohmann::json& j) {
  ProviderConfig c;
  c.provider = j.value("provider", c.provider);
  c.seed = j.value("seed", c.seed);
  c.d_t = j.value("d_t", c.d_t);
  if (j.contains("embeddings")) c.embeddings = j["embeddings"].get<std::string>();
  if (j.contains("texts")) c.texts = j["texts"].get<std::string>();
  return c;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

HashFallbackProvider::HashFallbackProvider(std::uint64_t seed, int d_t)
    : seed_(seed), d_t_(d_t) {
  if (d_t <= 0) throw ConfigError("hash-fallback provider: d_t must be positive");
  Rng rng(derive_seed(seed, "hash-fallback-mix"));
  mix_.resize(d_t, d_t);
  const double s = 1.0 / std::sqrt(static_cast<double>(d_t));
  for (Eigen::Index r = 0; r < mix_.rows(); ++r)
    for (Eigen::Index c = 0; c < mix_.cols(); ++c) mix_(r, c) = rng.normal() * s;
}

RawTextEmbedding HashFallbackProvider::embed(std::string_view text) const {
  if (text.empty()) throw InputError("embed_text: empty text");
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(d_t_);
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw InputError("embed_text: text has no tokens");
  for (const auto& tok : tokens) {
    const auto bucket = splitmix64(fnv1a64(tok) ^ seed_) % static_cast<std::uint64_t>(d_t_);
    counts(static_cast<Eigen::Index>(bucket)) += 1.0;
  }
  Eigen::VectorXd v = mix_.transpose() * counts;
  const double norm = v.norm();
  if (!(norm > 0.0)) throw NumericError("embed_text: degenerate embedding");
  return {v / norm, id()};
}

ExternalProvider::ExternalProvider(const std::filesystem::path& embeddings,
                                   const std::filesystem::path& texts) {
  const auto sidecar = texts.empty() ? std::filesystem::path(embeddings.string() + ".json") : texts;
  std::ifstream js(sidecar);
  if (!js) throw IoError("external provider: cannot open sidecar " + sidecar.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(js);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("external provider sidecar: " + std::string(e.what()));
  }
  const auto& list = j.is_array() ? j : j.at("texts");
  const auto names = list.get<std::vector<std::string>>();
  if (names.empty()) throw ConfigError("external provider: sidecar lists no texts");

  std::ifstream bin(embeddings, std::ios::binary | std::ios::ate);
  if (!bin) throw IoError("external provider: cannot open " + embeddings.string());
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  bin.seekg(0);
  if (bytes % (4 * names.size()) != 0)
    throw ConfigError("external provider: file size is not a multiple of the row count");
  d_t_ = static_cast<int>(bytes / (4 * names.size()));
  if (j.is_object() && j.contains("d_t") && j["d_t"].get<int>() != d_t_)
    throw ConfigError("external provider: d_t in sidecar does not match file size");
  std::vector<unsigned char> raw(bytes);
  bin.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  for (std::size_t r = 0; r < names.size(); ++r) {
    Eigen::VectorXd v(d_t_);
    for (int c = 0; c < d_t_; ++c) {
      const unsigned char* p = raw.data() + 4 * (r * static_cast<std::size_t>(d_t_) + c);
      const std::uint32_t u = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                              (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
      float f;
      std::memcpy(&f, &u, 4);
      if (!std::isfinite(f)) throw NumericError("external provider: non-finite embedding entry");
      v(c) = f;
    }
    table_.emplace(names[r], std::move(v));
  }
}

RawTextEmbedding ExternalProvider::embed(std::string_view text) const {
  auto it = table_.find(std::string(text));
  if (it == table_.end())
    throw InputError("external provider: no precomputed embedding for '" + std::string(text) + "'");
  return {it->second, id()};
}

void write_external_table(const std::filesystem::path& embeddings,
                          const std::vector<std::string>& texts, const ag::Mat& rows) {
  if (rows.rows() != static_cast<Eigen::Index>(texts.size()))
    throw ShapeError("write_external_table: row count does not match text count");
  std::ofstream bin(embeddings, std::ios::binary);
  if (!bin) throw IoError("cannot write " + embeddings.string());
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      const float f = static_cast<float>(rows(r, c));
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      const char b[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff),
                         char((u >> 24) & 0xff)};
      bin.write(b, 4);
    }
  }
  std::ofstream js(embeddings.string() + ".json");
  js << nlohmann::json{{"texts", texts}, {"d_t", rows.cols()}}.dump(2) << '\n';
  if (!bin || !js) throw IoError("write failed: " + embeddings.string());
}

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& cfg) {
  if (cfg.provider == "hash-fallback") return std::make_unique<HashFallbackProvider>(cfg.seed, cfg.d_t);
  if (cfg.provider == "external") return std::make_unique<ExternalProvider>(cfg.embeddings, cfg.texts);
  throw ConfigError("unknown embedding provider '" + cfg.provider + "'");
}

RawTextEmbedding embed_text(std::string_view text, const EmbeddingProvider& provider) {
  return provider.embed(text);
}

RawTextEmbedding embed_text(std::string_view text, const ProviderConfig& cfg) {
  return make_provider(cfg)->embed(text);
}

ProjectionParams ProjectionParams::init(int d_t, int d, std::uint64_t seed, bool trainable) {
  Rng rng(derive_seed(seed, "text-projection"));
  ag::Mat w(d_t, d);
  const double s = 1.0 / std::sqrt(static_cast<double>(d_t));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal() * s;
  ProjectionParams p;
  p.weight = ag::parameter(std::move(w));
  p.bias = ag::parameter(ag::Mat::Zero(1, d));
  p.trainable = trainable;
  return p;
}

Eigen::VectorXd project(const RawTextEmbedding& raw, const ProjectionParams& params) {
  if (raw.vector.size() != params.weight.rows())
    throw ShapeError("project: embedding dimension " + std::to_string(raw.vector.size()) +
                     " does not match projection input " + std::to_string(params.weight.rows()));
  return params.weight.value().transpose() * raw.vector + params.bias.value().row(0).transpose();
}

ag::Var project_rows(const ag::Var& raw_rows, const ProjectionParams& params) {
  if (raw_rows.cols() != params.weight.rows()) throw ShapeError("project_rows: dimension mismatch");
  if (!params.trainable) {
    ag::Mat out = raw_rows.value() * params.weight.value();
    out.rowwise() += params.bias.value().row(0);
    return ag::constant(std::move(out));
  }
  return ag::linear(raw_rows, params.weight, params.bias);
}

RawQueryTexts embed_queries(const report::QuerySet& qs, const EmbeddingProvider& provider) {
  RawQueryTexts raw;
  const int dt = provider.dim();
  raw.anatomy.resize(static_cast<Eigen::Index>(qs.n()), dt);
  raw.pathology.resize(static_cast<Eigen::Index>(qs.m()), dt);
  for (std::size_t j = 0; j < qs.n(); ++j)
    raw.anatomy.row(static_cast<Eigen::Index>(j)) =
        provider.embed(qs.prompted_anatomy_texts[j]).vector.transpose();
  for (std::size_t i = 0; i < qs.m(); ++i)
    raw.pathology.row(static_cast<Eigen::Index>(i)) =
        provider.embed(qs.enhanced_pathology_texts[i]).vector.transpose();
  return raw;
}

QueryEmbeddings build_query_embeddings(const report::QuerySet& qs,
                                       const EmbeddingProvider& provider,
                                       const ProjectionParams& params) {
  const auto raw = embed_queries(qs, provider);
  if (provider.dim() != params.input_dim())
    throw ShapeError("build_query_embeddings: provider dimension does not match projection");
  QueryEmbeddings qe;
  qe.E_a = raw.anatomy * params.weight.value();
  qe.E_a.rowwise() += params.bias.value().row(0);
  qe.E_p = raw.pathology * params.weight.value();
  qe.E_p.rowwise() += params.bias.value().row(0);
  return qe;
}

}  // namespace medslip::text
