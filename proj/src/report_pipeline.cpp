#include "medslip/report_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "medslip/errors.hpp"

namespace medslip::report {

namespace {

std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

// Lowercase ASCII and collapse whitespace runs into single spaces.
std::string normalize(std::string_view s) {
  std::string out;
  bool space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

bool is_lower_trimmed(std::string_view s) {
  if (s.empty() || trim(s) != s) return false;
  return std::none_of(s.begin(), s.end(), [](unsigned char c) { return std::isupper(c); });
}

bool in_vocab(const std::vector<std::string>& vocab, std::string_view term) {
  return vocab.empty() || std::find(vocab.begin(), vocab.end(), term) != vocab.end();
}

std::vector<std::string> ranked_terms(const std::map<std::string, std::size_t>& counts,
                                      std::size_t take) {
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(items[i].first);
  return out;
}

}  // namespace

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  const auto n = s.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Reject overlong encodings, surrogates and out-of-range code points.
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
        (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF)
      return false;
    i += len;
  }
  return true;
}

void validate(const TripletRecord& t) {
  if (t.study_id.empty()) throw InputError("triplet: empty study_id");
  if (!is_lower_trimmed(t.anatomy))
    throw InputError("triplet: anatomy must be non-empty, trimmed and lowercase: '" + t.anatomy + "'");
  if (!is_lower_trimmed(t.pathology))
    throw InputError("triplet: pathology must be non-empty, trimmed and lowercase: '" +
                     t.pathology + "'");
}

ParseResult parse_report(std::string_view text, const GrammarConfig& grammar,
                         std::string_view study_id) {
  if (!is_valid_utf8(text)) throw InputError("parse_report: malformed UTF-8");
  ParseResult result;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('.', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string sentence = normalize(text.substr(start, end - start));
    start = end + 1;
    if (sentence.empty()) continue;

    std::string body = sentence;
    bool negated = false;
    if (body.rfind("no ", 0) == 0) {
      negated = true;
      body = body.substr(3);
    }
    std::string pathology, anatomy;
    const auto at = body.find(" at ");
    if (at == std::string::npos) {
      pathology = body;
      anatomy = std::string(kUnspecifiedAnatomy);
    } else {
      pathology = body.substr(0, at);
      anatomy = body.substr(at + 4);
    }
    const bool anatomy_ok = anatomy == kUnspecifiedAnatomy || in_vocab(grammar.anatomies, anatomy);
    if (pathology.empty() || anatomy.empty() || !in_vocab(grammar.pathologies, pathology) ||
        !anatomy_ok) {
      ++result.skipped_sentences;
      continue;
    }
    result.triplets.push_back({std::string(study_id), anatomy, pathology, !negated});
  }
  return result;
}

std::string render_report(const std::vector<TripletRecord>& triplets) {
  std::string out;
  for (const auto& t : triplets) {
    std::string s = t.existence ? t.pathology : "no " + t.pathology;
    if (t.anatomy != kUnspecifiedAnatomy) s += " at " + t.anatomy;
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    if (!out.empty()) out.push_back(' ');
    out += s + ".";
  }
  return out;
}

nlohmann::json to_json(const TripletRecord& t) {
  return {{"study_id", t.study_id},
          {"anatomy", t.anatomy},
          {"pathology", t.pathology},
          {"existence", t.existence}};
}

std::vector<TripletRecord> ingest_triplets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open triplet file: " + path.string());
  std::vector<TripletRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError("triplet ingestion error at " + where + ": " + e.what());
    }
    auto get_string = [&](const char* key) {
      if (!j.is_object() || !j.contains(key))
        throw InputError("triplet ingestion error at " + where + ": missing key '" + key + "'");
      if (!j[key].is_string())
        throw InputError("triplet ingestion error at " + where + ": key '" + key +
                         "' must be a string");
      return j[key].get<std::string>();
    };
    TripletRecord t;
    t.study_id = get_string("study_id");
    t.anatomy = get_string("anatomy");
    t.pathology = get_string("pathology");
    if (!j.contains("existence"))
      throw InputError("triplet ingestion error at " + where + ": missing key 'existence'");
    if (!j["existence"].is_boolean())
      throw InputError("triplet ingestion error at " + where + ": key 'existence' must be a boolean");
    t.existence = j["existence"].get<bool>();
    try {
      validate(t);
    } catch (const InputError& e) {
      throw InputError("triplet ingestion error at " + where + ": " + e.what());
    }
    out.push_back(std::move(t));
  }
  return out;
}

void write_triplets(const std::filesystem::path& path, const std::vector<TripletRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write triplet file: " + path.string());
  for (const auto& t : records) out << to_json(t).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::string prompt_anatomy(std::string_view term) {
  if (term.empty()) throw InputError("prompt_anatomy: empty anatomy term");
  return std::string(kAnatomyPromptPrefix) + std::string(term);
}

KnowledgeTable::KnowledgeTable(std::map<std::string, std::string> entries) {
  for (auto& [k, v] : entries) {
    if (!is_lower_trimmed(k)) throw InputError("knowledge table: key must be lowercase: '" + k + "'");
    if (trim(v).empty()) throw InputError("knowledge table: empty sentence for '" + k + "'");
    entries_.emplace(k, std::move(v));
  }
}

KnowledgeTable KnowledgeTable::builtin() {
  return KnowledgeTable(std::map<std::string, std::string>{
      {"collapse", "collapse lung refers to pneumothorax or atelectasis."}});
}

KnowledgeTable KnowledgeTable::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("knowledge table: expected a JSON object");
  std::map<std::string, std::string> entries;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw InputError("knowledge table: value for '" + k + "' must be a string");
    if (!entries.emplace(k, v.get<std::string>()).second)
      throw InputError("knowledge table: duplicate key '" + k + "'");
  }
  return KnowledgeTable(std::move(entries));
}

KnowledgeTable KnowledgeTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open knowledge table: " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("knowledge table " + path.string() + ": " + e.what());
  }
}

const std::string* KnowledgeTable::find(std::string_view term) const {
  auto it = entries_.find(std::string(term));
  return it == entries_.end() ? nullptr : &it->second;
}

std::string enhance_pathology(std::string_view term, const KnowledgeTable& table) {
  if (const auto* s = table.find(term)) return std::string(term) + " " + *s;
  return std::string(term);
}

int QuerySet::anatomy_index(std::string_view term) const {
  auto it = std::find(anatomy_terms.begin(), anatomy_terms.end(), term);
  return it == anatomy_terms.end() ? -1 : static_cast<int>(it - anatomy_terms.begin());
}

int QuerySet::pathology_index(std::string_view term) const {
  auto it = std::find(pathology_terms.begin(), pathology_terms.end(), term);
  return it == pathology_terms.end() ? -1 : static_cast<int>(it - pathology_terms.begin());
}

nlohmann::json QuerySet::to_json() const {
  return {{"anatomy_terms", anatomy_terms},
          {"pathology_terms", pathology_terms},
          {"prompted_anatomy_texts", prompted_anatomy_texts},
          {"enhanced_pathology_texts", enhanced_pathology_texts}};
}

QuerySet QuerySet::from_terms(std::vector<std::string> anatomy, std::vector<std::string> pathology,
                              const KnowledgeTable& table) {
  if (anatomy.empty() || pathology.empty()) throw ConfigError("query set: empty term list");
  auto unique = [](const std::vector<std::string>& v) {
    return std::set<std::string>(v.begin(), v.end()).size() == v.size();
  };
  if (!unique(anatomy) || !unique(pathology)) throw ConfigError("query set: duplicate terms");
  QuerySet qs;
  qs.anatomy_terms = std::move(anatomy);
  qs.pathology_terms = std::move(pathology);
  for (const auto& a : qs.anatomy_terms) qs.prompted_anatomy_texts.push_back(prompt_anatomy(a));
  for (const auto& p : qs.pathology_terms) {
    qs.enhanced_pathology_texts.push_back(enhance_pathology(p, table));
    if (!table.find(p)) qs.unenhanced_terms.push_back(p);
  }
  return qs;
}

QuerySet QuerySet::from_json(const nlohmann::json& j, const KnowledgeTable& table) {
  try {
    QuerySet qs = from_terms(j.at("anatomy_terms").get<std::vector<std::string>>(),
                             j.at("pathology_terms").get<std::vector<std::string>>(), table);
    // Exported texts win over re-derived ones so a query set travels with its prompts.
    if (j.contains("prompted_anatomy_texts"))
      qs.prompted_anatomy_texts = j["prompted_anatomy_texts"].get<std::vector<std::string>>();
    if (j.contains("enhanced_pathology_texts"))
      qs.enhanced_pathology_texts = j["enhanced_pathology_texts"].get<std::vector<std::string>>();
    if (qs.prompted_anatomy_texts.size() != qs.n() || qs.enhanced_pathology_texts.size() != qs.m())
      throw ConfigError("query set: text list length does not match term list");
    return qs;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("query set JSON: ") + e.what());
  }
}

QuerySet select_queries(const std::vector<TripletRecord>& corpus, std::size_t n, std::size_t m,
                        const KnowledgeTable& table) {
  if (corpus.empty()) throw ConfigError("select_queries: empty corpus");
  if (n == 0 || m == 0) throw ConfigError("select_queries: n and m must be positive");
  std::map<std::string, std::size_t> anatomy_counts, pathology_counts;
  for (const auto& t : corpus) {
    ++anatomy_counts[t.anatomy];
    ++pathology_counts[t.pathology];
  }
  if (n > anatomy_counts.size())
    throw ConfigError("select_queries: n=" + std::to_string(n) + " exceeds " +
                      std::to_string(anatomy_counts.size()) + " distinct anatomy terms");
  if (m > pathology_counts.size())
    throw ConfigError("select_queries: m=" + std::to_string(m) + " exceeds " +
                      std::to_string(pathology_counts.size()) + " distinct pathology terms");
  return QuerySet::from_terms(ranked_terms(anatomy_counts, n), ranked_terms(pathology_counts, m),
                              table);
}

ExistenceMatrix build_existence_matrix(const std::vector<TripletRecord>& study_triplets,
                                       const QuerySet& qs, std::string_view study_id) {
  ExistenceMatrix em;
  em.study_id = study_id.empty() && !study_triplets.empty() ? study_triplets.front().study_id
                                                            : std::string(study_id);
  for (const auto& t : study_triplets) {
    if (t.study_id != em.study_id)
      throw InputError("build_existence_matrix: mixed study ids '" + em.study_id + "' and '" +
                       t.study_id + "'");
  }
  const auto m = static_cast<Eigen::Index>(qs.m());
  const auto n = static_cast<Eigen::Index>(qs.n());
  em.L = ag::Mat::Zero(m, n);
  em.y_pathology = Eigen::VectorXd::Zero(m);
  em.y_anatomy = Eigen::VectorXd::Zero(n);
  for (const auto& t : study_triplets) {
    if (!t.existence) continue;
    const int i = qs.pathology_index(t.pathology);
    const int j = qs.anatomy_index(t.anatomy);
    if (i >= 0) em.y_pathology(i) = 1.0;
    if (j >= 0) em.y_anatomy(j) = 1.0;
    if (i >= 0 && j >= 0) em.L(i, j) = 1.0;
  }
  return em;
}

ag::Mat union_existence(const std::vector<ExistenceMatrix>& matrices) {
  if (matrices.empty()) throw InputError("union_existence: no matrices");
  ag::Mat u = matrices.front().L;
  for (const auto& em : matrices) {
    if (em.L.rows() != u.rows() || em.L.cols() != u.cols())
      throw ShapeError("union_existence: shape mismatch");
    u = u.cwiseMax(em.L);
  }
  return u;
}

std::vector<std::pair<std::string, std::vector<TripletRecord>>> group_by_study(
    const std::vector<TripletRecord>& records) {
  std::vector<std::pair<std::string, std::vector<TripletRecord>>> out;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& t : records) {
    auto [it, inserted] = index.emplace(t.study_id, out.size());
    if (inserted) out.emplace_back(t.study_id, std::vector<TripletRecord>{});
    out[it->second].second.push_back(t);
  }
  return out;
}

}  // namespace medslip::report
