#pragma once

// Run directory: every output of one command lands here, together with a
// copy of the config and a manifest of SHA-256 file hashes.

#include <string>
#include <vector>

namespace critgen {

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

class RunDir {
 public:
  // Creates the directory (and parents) if needed.
  explicit RunDir(std::string path);

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const;

  // Registers a file for the manifest. Files whose bytes depend on wall-clock
  // time are listed without a hash.
  void record(const std::string& name, bool deterministic = true);
  void write_text(const std::string& name, const std::string& content, bool deterministic = true);

  // Writes manifest.json listing the recorded files in the order recorded.
  void write_manifest() const;

 private:
  struct Item {
    std::string name;
    bool deterministic;
  };
  std::string path_;
  std::vector<Item> items_;
};

}  // namespace critgen
