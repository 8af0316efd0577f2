#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

namespace watt {

// Configuration problem at a dotted key path, e.g. "adapt.mtwa.L".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, std::string detail)
      : std::invalid_argument("config key '" + path + "': " + detail), path_(std::move(path)), detail_(std::move(detail)) {}

  const std::string& path() const { return path_; }
  const std::string& detail() const { return detail_; }

 private:
  std::string path_;
  std::string detail_;
};

// Inside with_key the path is filled in by the caller.
[[noreturn]] inline void unknown_key() { throw ConfigError("", "unknown key"); }

// Runs `parse`, prefixing any configuration error with `key`.
template <typename F>
void with_key(const std::string& key, F&& parse) {
  try {
    parse();
  } catch (const ConfigError& e) {
    throw ConfigError(e.path().empty() ? key : key + "." + e.path(), e.detail());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key, e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

inline void require_object(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be a JSON object");
}

}  // namespace watt
