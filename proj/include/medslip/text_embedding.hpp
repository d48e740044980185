#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "medslip/autograd.hpp"
#include "medslip/report_pipeline.hpp"

namespace medslip::text {

struct RawTextEmbedding {
  Eigen::VectorXd vector;
  std::string provider_id;
};

/// {provider: "hash-fallback" | "external", seed, d_t, embeddings, texts}
struct ProviderConfig {
  std::string provider = "hash-fallback";
  std::uint64_t seed = 0;
  int d_t = 256;
  std::filesystem::path embeddings;  // external: float32 rows
  std::filesystem::path texts;       // external: JSON sidecar; defaults to embeddings + ".json"

  nlohmann::json to_json() const;
  static ProviderConfig from_json(const nlohmann::json& j);
};

/// Frozen text encoder. Implementations are immutable after construction.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual RawTextEmbedding embed(std::string_view text) const = 0;
  virtual int dim() const = 0;
  virtual std::string id() const = 0;
};

/// Hashed bag of tokens, mixed by a seeded Gaussian matrix, then unit-normalized.
class HashFallbackProvider final : public EmbeddingProvider {
 public:
  HashFallbackProvider(std::uint64_t seed, int d_t);
  RawTextEmbedding embed(std::string_view text) const override;
  int dim() const override { return d_t_; }
  std::string id() const override { return "hash-fallback"; }

 private:
  std::uint64_t seed_;
  int d_t_;
  ag::Mat mix_;
};

/// Looks texts up in a table of precomputed embeddings.
class ExternalProvider final : public EmbeddingProvider {
 public:
  ExternalProvider(const std::filesystem::path& embeddings, const std::filesystem::path& texts);
  RawTextEmbedding embed(std::string_view text) const override;
  int dim() const override { return d_t_; }
  std::string id() const override { return "external"; }

 private:
  int d_t_ = 0;
  std::unordered_map<std::string, Eigen::VectorXd> table_;
};

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& cfg);

/// Writes an external-provider table (float32 rows + JSON sidecar listing the texts).
void write_external_table(const std::filesystem::path& embeddings,
                          const std::vector<std::string>& texts, const ag::Mat& rows);

RawTextEmbedding embed_text(std::string_view text, const EmbeddingProvider& provider);
RawTextEmbedding embed_text(std::string_view text, const ProviderConfig& cfg);

/// Learnable linear layer on top of the frozen encoder: out = weight^T x + bias.
struct ProjectionParams {
  ag::Var weight;  // d_t x d
  ag::Var bias;    // 1 x d
  bool trainable = true;

  int input_dim() const { return static_cast<int>(weight.rows()); }
  int output_dim() const { return static_cast<int>(weight.cols()); }
  static ProjectionParams init(int d_t, int d, std::uint64_t seed, bool trainable = true);
};

Eigen::VectorXd project(const RawTextEmbedding& raw, const ProjectionParams& params);
/// Differentiable row-wise projection of stacked raw embeddings.
ag::Var project_rows(const ag::Var& raw_rows, const ProjectionParams& params);

struct QueryEmbeddings {
  ag::Mat E_a;  // n x d
  ag::Mat E_p;  // m x d
  int d() const { return static_cast<int>(E_a.cols()); }
};

/// Raw encoder outputs for a query set; the frozen half of build_query_embeddings.
struct RawQueryTexts {
  ag::Mat anatomy;    // n x d_t
  ag::Mat pathology;  // m x d_t
};

RawQueryTexts embed_queries(const report::QuerySet& qs, const EmbeddingProvider& provider);
QueryEmbeddings build_query_embeddings(const report::QuerySet& qs,
                                       const EmbeddingProvider& provider,
                                       const ProjectionParams& params);

/// Tokenizer shared by the fallback provider: lowercase alphanumeric runs.
std::vector<std::string> tokenize(std::string_view text);

}  // namespace medslip::text
