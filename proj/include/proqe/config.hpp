#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace proqe {

// Flat `key = value` text. '#' starts a comment; blank lines are ignored.
// Later assignments override earlier ones, which is how command-line
// overrides are layered on top of a config file.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);

  // Applies every entry of `other` on top of this one.
  void merge(const KeyValueConfig& other);

  void set(std::string key, std::string value);
  bool has(std::string_view key) const;
  std::optional<std::string> get(std::string_view key) const;

  std::string get_string(std::string_view key, std::string fallback) const;
  double get_double(std::string_view key, double fallback) const;
  long long get_int(std::string_view key, long long fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  // Throws InvalidArgument naming the first key not in `known`.
  void require_known(std::initializer_list<std::string_view> known) const;

  const std::map<std::string, std::string, std::less<>>& entries() const { return entries_; }
  std::string text() const;

 private:
  std::map<std::string, std::string, std::less<>> entries_;
};

}  // namespace proqe
