#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hcv/error.hpp"
#include "hcv/lingauss.hpp"

// =============================================================================
// CSV tables (RFC-4180 subset: header row, comma separator, double-quote
// quoting, LF line endings) and JSON sidecars for linear-Gaussian models.
// =============================================================================

namespace hcv::io {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a column by name, or by a plain non-negative integer index.
  std::size_t column(const std::string& name_or_index) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name_or_index) return i;
    }
    if (!name_or_index.empty() && name_or_index.find_first_not_of("0123456789") == std::string::npos) {
      const auto idx = std::stoul(name_or_index);
      if (idx < header.size()) return idx;
    }
    throw InvalidInput("csv: no column named '" + name_or_index + "'");
  }

  /// Numeric matrix of the selected columns (rows x columns.size()).
  Eigen::MatrixXd numeric(const std::vector<std::string>& columns) const {
    std::vector<std::size_t> idx;
    for (const auto& c : columns) idx.push_back(column(c));
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const auto& cell = rows[r][idx[j]];
        std::size_t used = 0;
        double value = 0.0;
        try {
          value = std::stod(cell, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used == 0 || used != cell.size() || !std::isfinite(value)) {
          // Line numbers are 1-based and count the header.
          throw InvalidInput("csv: line " + std::to_string(r + 2) + ", column " + std::to_string(idx[j] + 1) + " ('" +
                             header[idx[j]] + "'): not a finite number: '" + cell + "'");
        }
        out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = value;
      }
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::string> split_record(std::istream& in, std::size_t& line, bool& eof) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool any = false;
  const std::size_t start_line = line;
  for (int ch; (ch = in.get()) != EOF;) {
    any = true;
    const char c = static_cast<char>(ch);
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      if (!field.empty()) {
        throw InvalidInput("csv: line " + std::to_string(line) + ", column " + std::to_string(fields.size() + 1) +
                           ": quote inside unquoted field");
      }
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      ++line;
      fields.push_back(std::move(field));
      return fields;
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  if (quoted) throw InvalidInput("csv: line " + std::to_string(start_line) + ": unterminated quoted field");
  eof = true;
  if (any) fields.push_back(std::move(field));
  return fields;
}

inline bool needs_quotes(const std::string& s) { return s.find_first_of(",\"\n\r") != std::string::npos; }

}  // namespace detail

inline CsvTable parse_csv(std::istream& in) {
  CsvTable t;
  std::size_t line = 1;
  bool eof = false;
  t.header = detail::split_record(in, line, eof);
  if (t.header.empty()) throw InvalidInput("csv: missing header row");
  while (!eof) {
    const std::size_t record_line = line;
    auto rec = detail::split_record(in, line, eof);
    if (rec.empty() || (rec.size() == 1 && rec[0].empty())) continue;
    if (rec.size() != t.header.size()) {
      throw InvalidInput("csv: line " + std::to_string(record_line) + ": expected " + std::to_string(t.header.size()) +
                         " fields, found " + std::to_string(rec.size()));
    }
    t.rows.push_back(std::move(rec));
  }
  return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("csv: cannot open " + path.string());
  return parse_csv(in);
}

inline std::string csv_escape(const std::string& s) {
  if (!detail::needs_quotes(s)) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

/// %.{digits}g formatting; 12 digits for reported statistics, 17 to round-trip.
inline std::string format_number(double x, int digits = 12) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

inline void write_csv_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << ',';
    out << csv_escape(fields[i]);
  }
  out << '\n';
}

/// Writes through a temporary file renamed into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidInput("cannot write " + tmp.string());
    out << contents;
    if (!out) throw InvalidInput("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Linear-Gaussian model sidecar and dataset CSV
// ---------------------------------------------------------------------------

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const std::string& what) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || rows * cols != static_cast<Eigen::Index>(data.size())) {
    throw InvalidInput(what + ": data length does not match rows x cols");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

/// Row-major matrices with explicit dims, plus the seeds that produced them.
inline nlohmann::json model_to_json(const LinGaussModel& m, std::uint64_t model_seed) {
  const auto d = m.dims();
  return {{"format", "hcv-lingauss-v1"},
          {"dims", {{"latent_v", d.latent_v}, {"latent_u", d.latent_u}, {"noise_rank", d.noise_rank}, {"observed", d.observed}}},
          {"noise_scale", m.noise_scale},
          {"seed", model_seed},
          {"A", matrix_to_json(m.a)},
          {"B", matrix_to_json(m.b)},
          {"C", matrix_to_json(m.c)}};
}

inline LinGaussModel model_from_json(const nlohmann::json& j) {
  try {
    LinGaussModel m;
    m.a = matrix_from_json(j.at("A"), "model A");
    m.b = matrix_from_json(j.at("B"), "model B");
    m.c = matrix_from_json(j.at("C"), "model C");
    m.noise_scale = j.at("noise_scale").get<double>();
    m.validate();
    if (j.contains("dims")) {
      const auto& d = j.at("dims");
      const LinGaussDims declared{d.at("latent_v").get<int>(), d.at("latent_u").get<int>(), d.at("noise_rank").get<int>(),
                                  d.at("observed").get<int>()};
      if (!(declared == m.dims())) throw InvalidInput("model: declared dims do not match matrix shapes");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("model: ") + e.what());
  }
}

inline std::vector<std::string> prefixed(const std::string& prefix, int count) {
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

/// Columns x_0..x_{d-1}, u_0..u_{m-1}, v_0..v_{n-1}; 17 significant digits.
inline std::string dataset_to_csv(const LabeledDataset& data) {
  std::ostringstream out;
  std::vector<std::string> header = prefixed("x_", static_cast<int>(data.x.cols()));
  for (auto& s : prefixed("u_", static_cast<int>(data.u.cols()))) header.push_back(s);
  for (auto& s : prefixed("v_", static_cast<int>(data.v.cols()))) header.push_back(s);
  write_csv_row(out, header);
  for (Eigen::Index r = 0; r < data.x.rows(); ++r) {
    std::vector<std::string> row;
    for (const auto* m : {&data.x, &data.u, &data.v}) {
      for (Eigen::Index c = 0; c < m->cols(); ++c) row.push_back(format_number((*m)(r, c), 17));
    }
    write_csv_row(out, row);
  }
  return out.str();
}

/// Observation matrix x_0..x_{d-1} of a dataset CSV.
inline Eigen::MatrixXd observations_from_csv(const CsvTable& t) {
  int d = 0;
  while (true) {
    const auto name = "x_" + std::to_string(d);
    bool found = false;
    for (const auto& h : t.header) found = found || h == name;
    if (!found) break;
    ++d;
  }
  if (d == 0) throw InvalidInput("dataset: no x_0 column");
  return t.numeric(prefixed("x_", d));
}

}  // namespace hcv::io
