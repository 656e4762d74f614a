#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "clmex/image.hpp"

namespace clmex {

inline constexpr int kNoLabel = -1;

struct ManifestRecord {
  std::string image_path;
  std::string subject_id;
  std::string expression_name;
  int view_angle_deg = 0;
  std::string session_id;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::vector<std::string> expression_vocabulary;
  std::vector<int> view_set;
  // Directory that relative image paths resolve against.
  std::filesystem::path root;
};

class ManifestError : public std::runtime_error {
 public:
  enum class Kind { missing_file, parse_error, duplicate_record, unknown_expression, unknown_view, empty_dataset };

  ManifestError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Manifest text format (one record per line, comma separated, no quoting):
//
//   # expressions: neutral,happy,sad,surprised      (optional directive)
//   # views: -90,-45,0,45,90                        (optional directive)
//   image_path,subject_id,expression_name,view_angle_deg,session_id
//   images/s00_p0_v0.rawf,s00,happy,0,p0
//
// Without directives the vocabulary is the sorted set of expression names and
// the view set the sorted set of angles found in the records.
inline constexpr const char* kManifestHeader = "image_path,subject_id,expression_name,view_angle_deg,session_id";

namespace detail {

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream iss(line);
  while (std::getline(iss, field, sep)) out.push_back(trim(field));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline int parse_int(const std::string& s, const std::string& context) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw ManifestError(ManifestError::Kind::parse_error, context + ": expected an integer, got '" + s + "'");
  }
  return v;
}

}  // namespace detail

/// Checks vocabulary membership, view membership, uniqueness of
/// (subject, session, angle) and non-emptiness.
inline void validate_manifest(const DatasetManifest& m) {
  using K = ManifestError::Kind;
  if (m.records.empty()) throw ManifestError(K::empty_dataset, "manifest has no records");
  const std::set<std::string> vocab(m.expression_vocabulary.begin(), m.expression_vocabulary.end());
  const std::set<int> views(m.view_set.begin(), m.view_set.end());
  std::set<std::tuple<std::string, std::string, int>> seen;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (!vocab.contains(r.expression_name)) {
      throw ManifestError(K::unknown_expression,
                          "record " + std::to_string(i) + ": unknown expression '" + r.expression_name + "'");
    }
    if (!views.contains(r.view_angle_deg)) {
      throw ManifestError(K::unknown_view, "record " + std::to_string(i) + ": angle " +
                                               std::to_string(r.view_angle_deg) + " not in the view set");
    }
    if (!seen.emplace(r.subject_id, r.session_id, r.view_angle_deg).second) {
      throw ManifestError(K::duplicate_record, "duplicate record (subject=" + r.subject_id + ", session=" +
                                                   r.session_id + ", angle=" + std::to_string(r.view_angle_deg) +
                                                   ")");
    }
  }
}

inline DatasetManifest parse_manifest(std::istream& is, std::filesystem::path root = {}) {
  using K = ManifestError::Kind;
  DatasetManifest m;
  m.root = std::move(root);
  bool have_vocab = false, have_views = false, have_header = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto text = detail::trim(line);
    if (text.empty()) continue;
    if (text.front() == '#') {
      const auto body = detail::trim(text.substr(1));
      if (const auto colon = body.find(':'); colon != std::string::npos) {
        const auto key = detail::trim(body.substr(0, colon));
        const auto value = body.substr(colon + 1);
        if (key == "expressions") {
          m.expression_vocabulary = detail::split(value, ',');
          have_vocab = true;
        } else if (key == "views") {
          for (const auto& v : detail::split(value, ',')) {
            m.view_set.push_back(detail::parse_int(v, "views directive"));
          }
          have_views = true;
        }
      }
      continue;
    }
    if (!have_header) {
      if (text != kManifestHeader) {
        throw ManifestError(K::parse_error, "line " + std::to_string(line_no) + ": expected header '" +
                                                kManifestHeader + "'");
      }
      have_header = true;
      continue;
    }
    const auto fields = detail::split(text, ',');
    if (fields.size() != 5) {
      throw ManifestError(K::parse_error, "line " + std::to_string(line_no) + ": expected 5 fields, got " +
                                              std::to_string(fields.size()));
    }
    m.records.push_back({fields[0], fields[1], fields[2],
                         detail::parse_int(fields[3], "line " + std::to_string(line_no)), fields[4]});
  }
  if (!have_header) throw ManifestError(K::parse_error, "manifest header missing");
  if (!have_vocab) {
    std::set<std::string> names;
    for (const auto& r : m.records) names.insert(r.expression_name);
    m.expression_vocabulary.assign(names.begin(), names.end());
  }
  if (!have_views) {
    std::set<int> angles;
    for (const auto& r : m.records) angles.insert(r.view_angle_deg);
    m.view_set.assign(angles.begin(), angles.end());
  }
  validate_manifest(m);
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ManifestError(ManifestError::Kind::missing_file, "manifest not found: " + path.string());
  }
  std::ifstream is(path);
  if (!is) throw ManifestError(ManifestError::Kind::missing_file, "cannot read manifest: " + path.string());
  return parse_manifest(is, path.parent_path());
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << "# expressions: ";
  for (std::size_t i = 0; i < m.expression_vocabulary.size(); ++i) os << (i ? "," : "") << m.expression_vocabulary[i];
  os << "\n# views: ";
  for (std::size_t i = 0; i < m.view_set.size(); ++i) os << (i ? "," : "") << m.view_set[i];
  os << '\n' << kManifestHeader << '\n';
  for (const auto& r : m.records) {
    os << r.image_path << ',' << r.subject_id << ',' << r.expression_name << ',' << r.view_angle_deg << ','
       << r.session_id << '\n';
  }
}

struct Sample {
  Image image;
  std::string subject_id;
  int expression = kNoLabel;
  int view_angle_deg = 0;
  std::string session_id;
  // Dense id of the (subject, session) capture this image belongs to.
  int view_invariant_id = 0;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// In-memory dataset: samples plus the vocabulary and view set they index into.
struct Dataset {
  std::vector<std::string> expression_vocabulary;
  std::vector<int> view_set;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const { return expression_vocabulary.size(); }
  bool labeled() const {
    return std::ranges::all_of(samples, [](const Sample& s) { return s.expression != kNoLabel; });
  }

  /// Sample indices per view-invariant group, ordered by group id.
  std::vector<std::vector<std::size_t>> groups() const {
    std::map<int, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < samples.size(); ++i) by_id[samples[i].view_invariant_id].push_back(i);
    std::vector<std::vector<std::size_t>> out;
    for (auto& [id, members] : by_id) out.push_back(std::move(members));
    return out;
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset d{expression_vocabulary, view_set, {}};
    d.samples.reserve(indices.size());
    for (auto i : indices) d.samples.push_back(samples.at(i));
    return d;
  }

  /// Copy with every expression label removed; the only form the
  /// self-supervised stage receives.
  Dataset without_labels() const {
    Dataset d = *this;
    for (auto& s : d.samples) s.expression = kNoLabel;
    return d;
  }

  std::vector<std::string> subjects() const {
    std::set<std::string> ids;
    for (const auto& s : samples) ids.insert(s.subject_id);
    return {ids.begin(), ids.end()};
  }
};

/// Assigns dense view-invariant ids by first appearance of (subject, session)
/// and checks that every group carries a single expression.
inline void assign_view_invariant_ids(Dataset& d) {
  std::map<std::pair<std::string, std::string>, int> ids;
  std::map<int, int> group_expression;
  for (auto& s : d.samples) {
    auto [it, inserted] = ids.try_emplace({s.subject_id, s.session_id}, static_cast<int>(ids.size()));
    s.view_invariant_id = it->second;
    auto [ge, fresh] = group_expression.try_emplace(s.view_invariant_id, s.expression);
    if (!fresh && ge->second != s.expression) {
      throw DatasetError("subject " + s.subject_id + " session " + s.session_id +
                         " mixes expressions across views");
    }
  }
}

inline Dataset load_dataset(const DatasetManifest& m) {
  Dataset d{m.expression_vocabulary, m.view_set, {}};
  std::map<std::string, int> class_index;
  for (std::size_t i = 0; i < m.expression_vocabulary.size(); ++i) {
    class_index[m.expression_vocabulary[i]] = static_cast<int>(i);
  }
  std::optional<std::tuple<std::size_t, std::size_t, std::size_t>> dims;
  for (const auto& r : m.records) {
    std::filesystem::path p = r.image_path;
    if (p.is_relative()) p = m.root / p;
    Sample s;
    s.image = read_image(p);
    const auto these = std::make_tuple(s.image.height, s.image.width, s.image.channels);
    if (dims && *dims != these) throw DatasetError("image " + p.string() + " differs in size from earlier images");
    dims = these;
    s.subject_id = r.subject_id;
    s.expression = class_index.at(r.expression_name);
    s.view_angle_deg = r.view_angle_deg;
    s.session_id = r.session_id;
    d.samples.push_back(std::move(s));
  }
  assign_view_invariant_ids(d);
  return d;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  return load_dataset(load_manifest(manifest_path));
}

}  // namespace clmex
