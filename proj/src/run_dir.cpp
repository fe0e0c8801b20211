#include "critgen/run_dir.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>

#include <json.hpp>

namespace critgen {

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

RunDir::RunDir(std::string path) : path_(std::move(path)) {
  std::filesystem::create_directories(path_);
}

std::string RunDir::file(const std::string& name) const {
  return (std::filesystem::path(path_) / name).string();
}

void RunDir::record(const std::string& name, bool deterministic) {
  for (auto& item : items_) {
    if (item.name == name) {
      item.deterministic = deterministic;
      return;
    }
  }
  items_.push_back({name, deterministic});
}

void RunDir::write_text(const std::string& name, const std::string& content, bool deterministic) {
  std::ofstream out(file(name), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file(name));
  out << content;
  if (!out) throw std::runtime_error("write failed: " + file(name));
  record(name, deterministic);
}

void RunDir::write_manifest() const {
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (const auto& item : items_) {
    nlohmann::ordered_json f;
    f["file"] = item.name;
    f["bytes_deterministic"] = item.deterministic;
    if (item.deterministic) {
      f["sha256"] = sha256_file(file(item.name));
      f["bytes"] = std::filesystem::file_size(file(item.name));
    }
    files.push_back(f);
  }
  nlohmann::ordered_json doc;
  doc["format"] = "critgen-manifest";
  doc["files"] = files;
  std::ofstream out(file("manifest.json"), std::ios::binary);
  out << doc.dump(2) << "\n";
}

}  // namespace critgen
