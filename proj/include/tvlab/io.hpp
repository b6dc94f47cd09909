#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvlab/tensor.hpp"

namespace tvlab {

// Shortest decimal that round-trips, locale independent.
std::string format_double(double v);

// RFC 4180 field quoting when needed.
std::string csv_field(const std::string& s);
std::string csv_row(const std::vector<std::string>& fields);

std::string matrix_csv(const Matrix& m);
Matrix read_matrix_csv(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

// Git blob hash: sha1("blob <size>\0" + contents), lowercase hex.
std::string git_blob_hash(const std::string& contents);

// Collects files under a staging directory and moves it into place when
// complete, recording every file's hash in manifest.json.
class RunDirectory {
 public:
  explicit RunDirectory(std::filesystem::path target);
  ~RunDirectory();
  RunDirectory(const RunDirectory&) = delete;
  RunDirectory& operator=(const RunDirectory&) = delete;

  const std::filesystem::path& staging() const { return staging_; }
  void write(const std::string& relative, const std::string& contents);
  void write_json(const std::string& relative, const nlohmann::json& j);
  // Writes manifest.json and renames staging onto the target.
  void commit(const nlohmann::json& extra = nlohmann::json::object());

 private:
  std::filesystem::path target_;
  std::filesystem::path staging_;
  std::vector<std::string> files_;
  bool committed_ = false;
};

// Checks every manifest entry exists with a matching hash.
bool verify_manifest(const std::filesystem::path& dir, std::string* problem = nullptr);

}  // namespace tvlab
