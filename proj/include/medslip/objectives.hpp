#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medslip/autograd.hpp"
#include "medslip/dual_stream.hpp"
#include "medslip/report_pipeline.hpp"
#include "medslip/rng.hpp"

namespace medslip::objectives {

enum class ProtoCLVariant {
  /// -log( e^{R.P/tau} / (e^{R.P/tau} + sum_i e^{R.N_i/tau}) )
  kStandard,
  /// -log( e^{R.P/tau} / sum_i e^{R.N_i} ), the typeset form: no positive term and
  /// no temperature in the denominator. Unbounded below.
  kPaperLiteral,
};

struct ProtoCLConfig {
  double tau = 0.07;
  int k = 8;
  ProtoCLVariant variant = ProtoCLVariant::kStandard;
  std::uint64_t rng_seed = 0;
  /// Stream loss only: L2-normalize representations and embeddings before the dot products.
  bool normalize = true;

  void validate() const;
  nlohmann::json to_json() const;
  static ProtoCLConfig from_json(const nlohmann::json& j);
};

std::string to_string(ProtoCLVariant v);
ProtoCLVariant parse_variant(const std::string& s);

struct Prototype {
  Eigen::VectorXd vector;
  std::size_t support = 0;
};

/// Arithmetic mean of the positives. Throws PreconditionError on an empty list.
Prototype compute_prototype(const std::vector<Eigen::VectorXd>& positives);

struct ProtoCLGradient {
  double loss = 0.0;
  Eigen::VectorXd d_R;
  std::vector<Eigen::VectorXd> d_positives;
  std::vector<Eigen::VectorXd> d_negatives;
};

double protocl_loss(const Eigen::VectorXd& R, const std::vector<Eigen::VectorXd>& positives,
                    const std::vector<Eigen::VectorXd>& negatives, const ProtoCLConfig& cfg);
/// Loss together with its analytic gradient with respect to every input vector.
ProtoCLGradient protocl_loss_grad(const Eigen::VectorXd& R,
                                  const std::vector<Eigen::VectorXd>& positives,
                                  const std::vector<Eigen::VectorXd>& negatives,
                                  const ProtoCLConfig& cfg);

/// Graph op: R is 1 x d; positives and negatives are row indices into E (duplicates allowed).
ag::Var protocl_loss(const ag::Var& R, const ag::Var& E, const std::vector<int>& positive_rows,
                     const std::vector<int>& negative_rows, const ProtoCLConfig& cfg);

/// k row indices drawn from rows outside `positive_rows`: without replacement when the pool
/// holds at least k rows, with replacement otherwise. Throws SamplingError if no row qualifies.
std::vector<int> sample_negatives(int rows, const std::vector<int>& positive_rows, int k, Rng& rng);
std::vector<Eigen::VectorXd> sample_negatives(const ag::Mat& qe_rows,
                                              const std::vector<int>& positive_rows, int k,
                                              Rng& rng);

/// Symmetric ProtoCL over both streams: anatomy representations against pathology-embedding
/// prototypes and pathology representations against anatomy-embedding prototypes. Mean over
/// contributing queries; zero when none contribute.
ag::Var protocl_stream_loss(const stream::StreamBundleVar& bundle,
                            const report::ExistenceMatrix& em, const stream::QueryVars& qe,
                            const ProtoCLConfig& cfg, Rng& rng);

/// Mean BCE of sigmoid(scale * cos(R_p_i, R_a_j)) against L (m x n).
double icl_loss(const ag::Mat& R_p, const ag::Mat& R_a, const ag::Mat& L, double scale);
ag::Var icl_loss(const ag::Var& R_p, const ag::Var& R_a, const ag::Mat& L, const ag::Var& scale);

/// Mean numerically stable BCE-with-logits; y entries must be 0 or 1.
double exist_loss(const Eigen::VectorXd& logits, const Eigen::VectorXd& y);
ag::Var exist_loss(const ag::Var& logits, const Eigen::VectorXd& y);

struct LossWeights {
  double protocl = 1.0;
  double icl = 1.0;
  double exist = 1.0;
};

struct LossReport {
  double protocl = 0.0;
  double icl = 0.0;
  double exist = 0.0;
  double total = 0.0;
  LossWeights weights;
};

/// Throws NumericError on non-finite inputs, ConfigError on negative weights.
LossReport total_loss(double protocl, double icl, double exist, const LossWeights& w);

/// Stable log(1 + e^x).
double softplus(double x);
double sigmoid(double x);

}  // namespace medslip::objectives
