#include "gama/kvconfig.hpp"

#include "gama/errors.hpp"
#include "gama/fileio.hpp"

#include <charconv>
#include <sstream>

namespace gama {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: '" + key + "' is not a number: " + text);
  return v;
}

}  // namespace

KvConfig KvConfig::parse(std::string_view text) {
  KvConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    cfg.values_[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return cfg;
}

KvConfig KvConfig::load(const std::filesystem::path& path) {
  try {
    return parse(read_text_file(path));
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

void KvConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' needs key=value");
  const std::string key = trim(assignment.substr(0, eq));
  if (key.empty()) throw ConfigError("override '" + std::string(assignment) + "' has an empty key");
  values_[key] = trim(assignment.substr(eq + 1));
}

std::optional<std::string> KvConfig::find(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KvConfig::get_string(const std::string& key) const {
  auto v = find(key);
  if (!v) throw ConfigError("config: missing required key '" + key + "'");
  return *v;
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
  return find(key).value_or(fallback);
}

long long KvConfig::get_int(const std::string& key, long long fallback) const {
  const auto v = find(key);
  return v ? parse_number<long long>(key, *v) : fallback;
}

double KvConfig::get_real(const std::string& key, double fallback) const {
  const auto v = find(key);
  return v ? parse_number<double>(key, *v) : fallback;
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  const auto v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("config: '" + key + "' is not a boolean: " + *v);
}

std::vector<std::string> KvConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  const auto v = find(key);
  if (!v) return out;
  std::string_view rest = *v;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string item = trim(rest.substr(0, comma));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace gama
