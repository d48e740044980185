#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "medslip/autograd.hpp"

namespace medslip::report {

inline constexpr std::string_view kUnspecifiedAnatomy = "unspecified";
inline constexpr std::string_view kAnatomyPromptPrefix = "it is located at ";

/// One (anatomy, pathology, existence) extraction from a study's report.
struct TripletRecord {
  std::string study_id;
  std::string anatomy;
  std::string pathology;
  bool existence = true;

  friend bool operator==(const TripletRecord&, const TripletRecord&) = default;
  friend auto operator<=>(const TripletRecord&, const TripletRecord&) = default;
};

/// Throws InputError unless the record satisfies the field invariants.
void validate(const TripletRecord& t);

/// Recognized vocabularies of the constrained report grammar. An empty list accepts any term.
struct GrammarConfig {
  std::vector<std::string> pathologies;
  std::vector<std::string> anatomies;
};

struct ParseResult {
  std::vector<TripletRecord> triplets;
  std::size_t skipped_sentences = 0;
};

/// Extracts triplets from sentences of the form "<pathology> at <anatomy>." and
/// "no <pathology> [at <anatomy>].". Matching is case-insensitive.
ParseResult parse_report(std::string_view text, const GrammarConfig& grammar,
                         std::string_view study_id = "report");

/// Inverse of parse_report for one study: one sentence per triplet, in order.
std::string render_report(const std::vector<TripletRecord>& triplets);

std::vector<TripletRecord> ingest_triplets(const std::filesystem::path& path);
void write_triplets(const std::filesystem::path& path, const std::vector<TripletRecord>& records);

nlohmann::json to_json(const TripletRecord& t);

std::string prompt_anatomy(std::string_view term);

/// Pathology term -> plain-language enhancement sentence.
class KnowledgeTable {
 public:
  KnowledgeTable() = default;
  explicit KnowledgeTable(std::map<std::string, std::string> entries);

  /// The built-in table: a single entry for "collapse".
  static KnowledgeTable builtin();
  static KnowledgeTable load(const std::filesystem::path& path);
  static KnowledgeTable from_json(const nlohmann::json& j);

  const std::string* find(std::string_view term) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  std::map<std::string, std::string> entries_;
};

/// term + " " + sentence when the table has an entry, otherwise the term unchanged.
std::string enhance_pathology(std::string_view term, const KnowledgeTable& table);

struct QuerySet {
  std::vector<std::string> anatomy_terms;
  std::vector<std::string> pathology_terms;
  std::vector<std::string> prompted_anatomy_texts;
  std::vector<std::string> enhanced_pathology_texts;
  std::vector<std::string> unenhanced_terms;  // pathology terms with no knowledge entry

  std::size_t n() const { return anatomy_terms.size(); }
  std::size_t m() const { return pathology_terms.size(); }
  /// Index of a term in its list, or -1.
  int anatomy_index(std::string_view term) const;
  int pathology_index(std::string_view term) const;

  nlohmann::json to_json() const;
  static QuerySet from_json(const nlohmann::json& j, const KnowledgeTable& table);
  static QuerySet from_terms(std::vector<std::string> anatomy, std::vector<std::string> pathology,
                             const KnowledgeTable& table);
};

/// Picks the n most frequent anatomy and m most frequent pathology terms (every
/// triplet counts, negated ones included; ties break lexicographically).
QuerySet select_queries(const std::vector<TripletRecord>& corpus, std::size_t n, std::size_t m,
                        const KnowledgeTable& table = KnowledgeTable::builtin());

/// Per-study ground truth. L is m x n (rows = pathology, cols = anatomy).
struct ExistenceMatrix {
  std::string study_id;
  ag::Mat L;
  Eigen::VectorXd y_pathology;
  Eigen::VectorXd y_anatomy;
};

ExistenceMatrix build_existence_matrix(const std::vector<TripletRecord>& study_triplets,
                                       const QuerySet& qs, std::string_view study_id = {});

/// Entrywise maximum of per-study matrices.
ag::Mat union_existence(const std::vector<ExistenceMatrix>& matrices);

/// Groups records by study id, preserving first-appearance order of studies.
std::vector<std::pair<std::string, std::vector<TripletRecord>>> group_by_study(
    const std::vector<TripletRecord>& records);

bool is_valid_utf8(std::string_view s);

}  // namespace medslip::report
