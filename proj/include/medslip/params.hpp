#pragma once

#include <string>
#include <utility>
#include <vector>

#include "medslip/autograd.hpp"
#include "medslip/rng.hpp"

namespace medslip {

/// Ordered collection of named trainable parameters. Names are unique; iteration
/// order is registration order, which fixes the checkpoint layout.
class ParamStore {
 public:
  ag::Var add(const std::string& name, ag::Mat init);
  ag::Var get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, ag::Var>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  /// Deep copy of values into fresh leaves (gradients are not copied).
  ParamStore clone() const;
  /// Copy values from `other` for every name both stores share; returns how many were copied.
  std::size_t load_values_from(const ParamStore& other);

 private:
  std::vector<std::pair<std::string, ag::Var>> items_;
};

/// Gaussian init with standard deviation `stddev`.
ag::Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

}  // namespace medslip
