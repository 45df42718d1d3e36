#pragma once

// Flat "key = value" text files. '#' starts a comment; blank lines are
// ignored. Used for run manifests and task manifests.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flownav/errors.hpp"

namespace flownav {

struct ManifestError : ConfigError {
  ManifestError(const std::string& source, std::size_t line, const std::string& what)
      : ConfigError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class KeyValueFile {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };

  static KeyValueFile parse(std::string_view text, std::string source = "<manifest>");
  static KeyValueFile load(const std::filesystem::path& path);

  const std::string& source() const noexcept { return source_; }
  const std::string& text() const noexcept { return text_; }
  const std::map<std::string, Entry>& entries() const noexcept { return entries_; }

  bool has(const std::string& key) const { return entries_.contains(key); }
  std::optional<std::string> get(const std::string& key) const;
  // Typed getters throw ManifestError with the key's line on malformed values.
  std::optional<std::int64_t> get_int(const std::string& key) const;
  std::optional<std::size_t> get_size(const std::string& key) const;
  std::optional<double> get_double(const std::string& key) const;
  std::optional<bool> get_bool(const std::string& key) const;
  std::optional<std::vector<std::string>> get_list(const std::string& key) const;  // comma separated

  void set(const std::string& key, std::string value);  // flag overrides (line 0)
  [[noreturn]] void fail(const std::string& key, const std::string& what) const;
  // Keys present in the file but not in `known`; reported as errors by callers.
  std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;

 private:
  std::string source_;
  std::string text_;
  std::map<std::string, Entry> entries_;
};

}  // namespace flownav
