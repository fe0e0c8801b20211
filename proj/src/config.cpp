#include "critgen/config.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "critgen/errors.hpp"

namespace critgen {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_name(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
  });
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

std::vector<std::string> ConfigSection::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

std::string ConfigSection::where(const std::string& key) const {
  const auto it = entries_.find(key);
  const int line = it != entries_.end() ? it->second.line : line_;
  return source_ + ":" + std::to_string(line) + ": ";
}

const ConfigSection::Entry& ConfigSection::entry(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw ConfigError(source_ + ":" + std::to_string(line_) + ": section [" + name_ +
                      "] is missing required key '" + key + "'");
  }
  return it->second;
}

void ConfigSection::set(const std::string& key, const std::string& value, int line) {
  if (entries_.count(key) != 0) {
    throw ConfigError(source_ + ":" + std::to_string(line) + ": duplicate key '" + key +
                      "' in section [" + name_ + "]");
  }
  entries_[key] = Entry{value, line};
}

std::string ConfigSection::get_string(const std::string& key) const { return entry(key).value; }

std::string ConfigSection::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

double ConfigSection::get_double(const std::string& key) const {
  const auto& e = entry(key);
  const char* begin = e.value.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || errno == ERANGE || !std::isfinite(v)) {
    throw ConfigError(where(key) + "key '" + key + "' expects a finite number, got '" + e.value +
                      "'");
  }
  return v;
}

double ConfigSection::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::uint64_t ConfigSection::get_uint(const std::string& key) const {
  const auto& e = entry(key);
  std::uint64_t v = 0;
  const auto* end = e.value.data() + e.value.size();
  const auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(where(key) + "key '" + key + "' expects a non-negative integer, got '" +
                      e.value + "'");
  }
  return v;
}

std::uint64_t ConfigSection::get_uint(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? get_uint(key) : fallback;
}

bool ConfigSection::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& v = entry(key).value;
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(where(key) + "key '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<double> ConfigSection::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(entry(key).value)) {
    ConfigSection tmp(source_, name_, entry(key).line);
    tmp.set(key, item, entry(key).line);
    out.push_back(tmp.get_double(key));
  }
  return out;
}

std::vector<std::uint64_t> ConfigSection::get_uints(const std::string& key) const {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(entry(key).value)) {
    ConfigSection tmp(source_, name_, entry(key).line);
    tmp.set(key, item, entry(key).line);
    out.push_back(tmp.get_uint(key));
  }
  return out;
}

std::vector<std::string> ConfigSection::get_strings(const std::string& key) const {
  return split_list(entry(key).value);
}

void ConfigSection::check_keys(const std::set<std::string>& allowed) const {
  for (const auto& [k, e] : entries_) {
    if (allowed.count(k) == 0) {
      throw ConfigError(source_ + ":" + std::to_string(e.line) + ": unknown key '" + k +
                        "' in section [" + name_ + "]");
    }
  }
}

ConfigDocument ConfigDocument::parse(const std::string& text, const std::string& source) {
  ConfigDocument doc;
  doc.source_ = source;
  doc.text_ = text;
  std::stringstream in(text);
  std::string raw;
  int line = 0;
  ConfigSection* current = nullptr;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    const std::string at = source + ":" + std::to_string(line) + ": ";
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(at + "unterminated section header");
      const std::string name = trim(s.substr(1, s.size() - 2));
      if (!valid_name(name)) throw ConfigError(at + "invalid section name '" + name + "'");
      if (doc.has(name)) throw ConfigError(at + "duplicate section [" + name + "]");
      doc.sections_.emplace_back(source, name, line);
      current = &doc.sections_.back();
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(at + "expected 'key = value'");
    if (current == nullptr) throw ConfigError(at + "key outside of any [section]");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (!valid_name(key)) throw ConfigError(at + "invalid key '" + key + "'");
    if (value.empty()) throw ConfigError(at + "empty value for key '" + key + "'");
    current->set(key, value, line);
  }
  return doc;
}

ConfigDocument ConfigDocument::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot read config file");
  std::stringstream ss;
  ss << in.rdbuf();
  auto doc = parse(ss.str(), path);
  const auto parent = std::filesystem::path(path).parent_path();
  doc.base_dir_ = parent.empty() ? "." : parent.string();
  return doc;
}

bool ConfigDocument::has(const std::string& section) const {
  return std::any_of(sections_.begin(), sections_.end(),
                     [&](const ConfigSection& s) { return s.name() == section; });
}

const ConfigSection& ConfigDocument::section(const std::string& name) const {
  for (const auto& s : sections_) {
    if (s.name() == name) return s;
  }
  throw ConfigError(source_ + ": missing required section [" + name + "]");
}

const ConfigSection& ConfigDocument::section_or_empty(const std::string& name) const {
  return has(name) ? section(name) : empty_;
}

std::vector<std::string> ConfigDocument::section_names() const {
  std::vector<std::string> out;
  for (const auto& s : sections_) out.push_back(s.name());
  return out;
}

void ConfigDocument::check_schema(const std::set<std::string>& required,
                                  const std::set<std::string>& optional) const {
  for (const auto& name : required) section(name);
  for (const auto& s : sections_) {
    if (required.count(s.name()) == 0 && optional.count(s.name()) == 0) {
      throw ConfigError(source_ + ":" + std::to_string(s.line()) + ": unknown section [" +
                        s.name() + "]");
    }
  }
}

std::string ConfigDocument::resolve_path(const std::string& path) const {
  const std::filesystem::path p(path);
  if (p.is_absolute()) return p.string();
  return (std::filesystem::path(base_dir_) / p).lexically_normal().string();
}

}  // namespace critgen
