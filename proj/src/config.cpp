#include "xbarnas/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "xbarnas/errors.hpp"

namespace xbarnas {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str(), path);
}

KeyValueConfig KeyValueConfig::from_string(const std::string& text, const std::string& name) {
  KeyValueConfig cfg;
  cfg.source_ = name;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(name + ": line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError(name + ": line " + std::to_string(lineno) + ": expected 'key = value'");
    cfg.values_[key] = val;
    cfg.lines_[key] = lineno;
  }
  return cfg;
}

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) > 0; }

double KeyValueConfig::parse_double(const std::string& key, const std::string& raw) const {
  char* end = nullptr;
  double v = std::strtod(raw.c_str(), &end);
  if (end == raw.c_str() || *end != '\0') {
    int ln = lines_.count(key) ? lines_.at(key) : 0;
    throw ConfigError(source_ + ": line " + std::to_string(ln) + ": bad numeric value for '" +
                      key + "': " + raw);
  }
  return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  return parse_double(key, values_.at(key));
}

double KeyValueConfig::require_double(const std::string& key) const {
  if (!has(key)) throw ConfigError(source_ + ": missing required key '" + key + "'");
  return parse_double(key, values_.at(key));
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  if (!has(key)) return fallback;
  double v = parse_double(key, values_.at(key));
  int i = static_cast<int>(v);
  if (static_cast<double>(i) != v) {
    throw ConfigError(source_ + ": line " + std::to_string(lines_.at(key)) +
                      ": expected integer for '" + key + "'");
  }
  return i;
}

int KeyValueConfig::require_int(const std::string& key) const {
  if (!has(key)) throw ConfigError(source_ + ": missing required key '" + key + "'");
  return get_int(key, 0);
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = values_.at(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(source_ + ": line " + std::to_string(lines_.at(key)) +
                    ": expected boolean for '" + key + "'");
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? values_.at(key) : fallback;
}

std::vector<int> KeyValueConfig::get_int_list(const std::string& key,
                                              const std::vector<int>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<int> out;
  std::stringstream ss(values_.at(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    long v = std::strtol(item.c_str(), &end, 10);
    if (end == item.c_str())
      throw ConfigError(source_ + ": line " + std::to_string(lines_.at(key)) +
                        ": bad integer list for '" + key + "'");
    out.push_back(static_cast<int>(v));
  }
  if (out.empty())
    throw ConfigError(source_ + ": line " + std::to_string(lines_.at(key)) +
                      ": empty list for '" + key + "'");
  return out;
}

}  // namespace xbarnas
