#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

namespace privsample {

inline constexpr const char* kVersion = "0.1.0";

/// File could not be written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Provenance recorded in every output file.
struct RunMetadata {
  std::string command;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash));
    return buf;
  }

  nlohmann::json to_json() const {
    return {{"command", command},
            {"config_hash", hash_hex()},
            {"seed", seed},
            {"versions",
             {{"privsample", kVersion},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)}}}};
  }
};

/// In-memory CSV table: a header row, data rows, and a trailing block of
/// `# key=value` metadata lines.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& row(const std::vector<std::string>& cells) {
    if (cells.size() != header_.size()) throw std::invalid_argument("CsvTable: row width differs from header");
    rows_.push_back(cells);
    return *this;
  }

  /// Doubles are written with 12 significant digits.
  static std::string cell(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
  }
  static std::string cell(long long v) { return std::to_string(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(bool v) { return v ? "1" : "0"; }
  static std::string cell(const std::string& v) { return v; }

  std::size_t size() const { return rows_.size(); }

  std::string render(const RunMetadata& meta) const {
    std::ostringstream os;
    write_line(os, header_);
    for (const auto& r : rows_) write_line(os, r);
    os << "# command=" << meta.command << '\n';
    os << "# config_hash=" << meta.hash_hex() << '\n';
    os << "# seed=" << meta.seed << '\n';
    os << "# privsample=" << kVersion << '\n';
    os << "# eigen=" << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION << '\n';
    return os.str();
  }

 private:
  static void write_line(std::ostream& os, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os << ',';
      os << cells[i];
    }
    os << '\n';
  }

  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  out.close();
  if (!out) throw IoError("write failed: " + path);
}

/// Writes `path` and its `path.json` sidecar (metadata, effective config and
/// an optional command summary).
inline void write_outputs(const std::string& path, const CsvTable& table, const RunMetadata& meta,
                          const nlohmann::json& config, const nlohmann::json& summary = nlohmann::json::object()) {
  nlohmann::json side = meta.to_json();
  side["config"] = config;
  side["summary"] = summary;
  side["rows"] = table.size();
  write_text(path, table.render(meta));
  write_text(path + ".json", side.dump(2) + "\n");
}

}  // namespace privsample
