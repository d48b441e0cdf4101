#pragma once

#include <map>
#include <string>
#include <vector>

namespace xbarnas {

// Parser for the plain "key = value" config files used for hardware, cost and
// search settings. Unknown keys are kept (callers decide what is legal);
// malformed lines raise ConfigError naming the file and line.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;
  static KeyValueConfig from_file(const std::string& path);
  static KeyValueConfig from_string(const std::string& text, const std::string& name);

  bool has(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  double require_double(const std::string& key) const;
  int get_int(const std::string& key, int fallback) const;
  int require_int(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  // Comma-separated integer list, e.g. "sizes = 32,64".
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  const std::string& source() const { return source_; }

 private:
  double parse_double(const std::string& key, const std::string& raw) const;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  std::string source_;
};

}  // namespace xbarnas
