#pragma once

// Flat "key = value" config files. '#' starts a comment; blank lines are
// ignored; later assignments (and CLI overrides) replace earlier ones.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace gama {

class KvConfig {
 public:
  static KvConfig parse(std::string_view text);  // ConfigError on a malformed line
  static KvConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  // "key=value" override; ConfigError without '='.
  void apply_override(std::string_view assignment);

  bool has(const std::string& key) const { return values_.contains(key); }
  std::optional<std::string> find(const std::string& key) const;

  std::string get_string(const std::string& key) const;  // ConfigError when absent
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated list; empty when absent.
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace gama
