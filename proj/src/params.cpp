#include "medslip/params.hpp"

#include <algorithm>

#include "medslip/errors.hpp"

namespace medslip {

ag::Var ParamStore::add(const std::string& name, ag::Mat init) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  ag::Var v = ag::parameter(std::move(init));
  items_.emplace_back(name, v);
  return v;
}

ag::Var ParamStore::get(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw CompatibilityError("missing parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(items_.begin(), items_.end(), [&](const auto& it) { return it.first == name; });
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : items_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : items_) v.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [n, v] : items_) out.add(n, v.value());
  return out;
}

std::size_t ParamStore::load_values_from(const ParamStore& other) {
  std::size_t copied = 0;
  for (auto& [n, v] : items_) {
    if (!other.contains(n)) continue;
    const auto& src = other.get(n).value();
    if (src.rows() != v.rows() || src.cols() != v.cols())
      throw CompatibilityError("parameter shape mismatch for " + n);
    v.mutable_value() = src;
    ++copied;
  }
  return copied;
}

ag::Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  ag::Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
  return m;
}

}  // namespace medslip
