#pragma once

// Strict sectioned key/value config:
//
//   # comment
//   [section]
//   key = value
//
// Every error names the source and line. Unknown sections or keys are
// rejected by check_schema before any computation starts.

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace critgen {

class ConfigSection {
 public:
  ConfigSection(std::string source, std::string name, int line)
      : source_(std::move(source)), name_(std::move(name)), line_(line) {}

  const std::string& name() const { return name_; }
  int line() const { return line_; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::vector<std::string> keys() const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::uint64_t> get_uints(const std::string& key) const;
  std::vector<std::string> get_strings(const std::string& key) const;

  // Throws ConfigError at the first key outside `allowed`.
  void check_keys(const std::set<std::string>& allowed) const;

  void set(const std::string& key, const std::string& value, int line);
  // "<source>:<line>: "
  std::string where(const std::string& key) const;

 private:
  struct Entry {
    std::string value;
    int line;
  };
  const Entry& entry(const std::string& key) const;

  std::string source_;
  std::string name_;
  int line_;
  std::map<std::string, Entry> entries_;
};

class ConfigDocument {
 public:
  static ConfigDocument parse(const std::string& text, const std::string& source = "<config>");
  static ConfigDocument load(const std::string& path);

  const std::string& source() const { return source_; }
  const std::string& text() const { return text_; }
  // Directory of the config file, for resolving relative paths.
  const std::string& base_dir() const { return base_dir_; }

  bool has(const std::string& section) const;
  // Throws ConfigError naming the missing section.
  const ConfigSection& section(const std::string& name) const;
  // Empty section stand-in when absent.
  const ConfigSection& section_or_empty(const std::string& name) const;
  std::vector<std::string> section_names() const;

  // `required` sections must exist; anything outside required + optional is rejected.
  void check_schema(const std::set<std::string>& required,
                    const std::set<std::string>& optional) const;

  std::string resolve_path(const std::string& path) const;

 private:
  std::string source_;
  std::string text_;
  std::string base_dir_ = ".";
  std::vector<ConfigSection> sections_;
  ConfigSection empty_{"", "", 0};
};

}  // namespace critgen
