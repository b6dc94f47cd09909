#include "tvlab/io.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unistd.h>

namespace tvlab {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  return out + "\r\n";
}

std::string matrix_csv(const Matrix& m) {
  std::string out;
  for (Index i = 0; i < m.rows(); ++i) {
    std::vector<std::string> row;
    for (Index j = 0; j < m.cols(); ++j) row.push_back(format_double(m(i, j)));
    out += csv_row(row);
  }
  return out;
}

Matrix read_matrix_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (start <= line.size()) {
      const std::size_t end = std::min(line.find(',', start), line.size());
      double v = 0.0;
      const auto r = std::from_chars(line.data() + start, line.data() + end, v);
      if (r.ec != std::errc()) throw std::runtime_error("bad number in " + path.string());
      row.push_back(v);
      start = end + 1;
    }
    rows.push_back(std::move(row));
  }
  Matrix m(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows[0].size()));
  for (Index i = 0; i < m.rows(); ++i) {
    if (static_cast<Index>(rows[i].size()) != m.cols()) throw std::runtime_error("ragged csv " + path.string());
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << contents;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string git_blob_hash(const std::string& contents) {
  const std::string header = "blob " + std::to_string(contents.size()) + '\0';
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                  EVP_DigestUpdate(ctx, contents.data(), contents.size()) && EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

RunDirectory::RunDirectory(fs::path target) : target_(std::move(target)) {
  staging_ = target_;
  staging_ += ".tmp-" + std::to_string(::getpid());
  fs::remove_all(staging_);
  fs::create_directories(staging_);
}

RunDirectory::~RunDirectory() {
  if (!committed_) {
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }
}

void RunDirectory::write(const std::string& relative, const std::string& contents) {
  write_file(staging_ / relative, contents);
  files_.push_back(relative);
}

void RunDirectory::write_json(const std::string& relative, const nlohmann::json& j) { write(relative, j.dump(2) + "\n"); }

void RunDirectory::commit(const nlohmann::json& extra) {
  nlohmann::json manifest = extra;
  nlohmann::json entries = nlohmann::json::object();
  for (const auto& f : files_) entries[f] = git_blob_hash(read_file(staging_ / f));
  manifest["files"] = entries;
  write_file(staging_ / "manifest.json", manifest.dump(2) + "\n");
  if (fs::exists(target_)) fs::remove_all(target_);
  if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
  fs::rename(staging_, target_);
  committed_ = true;
}

bool verify_manifest(const fs::path& dir, std::string* problem) {
  try {
    const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    for (const auto& [name, hash] : manifest.at("files").items()) {
      if (!fs::exists(dir / name)) {
        if (problem) *problem = "missing " + name;
        return false;
      }
      if (git_blob_hash(read_file(dir / name)) != hash.get<std::string>()) {
        if (problem) *problem = "hash mismatch for " + name;
        return false;
      }
    }
    return true;
  } catch (const std::exception& e) {
    if (problem) *problem = e.what();
    return false;
  }
}

}  // namespace tvlab
