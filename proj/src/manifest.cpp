#include "flownav/manifest.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace flownav {

namespace {

std::string strip(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

KeyValueFile KeyValueFile::parse(std::string_view text, std::string source) {
  KeyValueFile kv;
  kv.source_ = std::move(source);
  kv.text_ = std::string(text);
  std::size_t line_no = 0;
  std::istringstream in(kv.text_);
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = strip(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ManifestError(kv.source_, line_no, "expected 'key = value', got '" + body + "'");
    auto key = strip(std::string_view(body).substr(0, eq));
    auto value = strip(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ManifestError(kv.source_, line_no, "empty key");
    if (kv.entries_.contains(key)) {
      throw ManifestError(kv.source_, line_no,
                          "duplicate key '" + key + "' (first set on line " + std::to_string(kv.entries_[key].line) + ")");
    }
    kv.entries_[key] = {std::move(value), line_no};
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::optional<std::string> KeyValueFile::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second.value;
}

void KeyValueFile::fail(const std::string& key, const std::string& what) const {
  const auto it = entries_.find(key);
  const std::size_t line = it == entries_.end() ? 0 : it->second.line;
  if (line == 0) throw ConfigError("--" + key + ": " + what);
  throw ManifestError(source_, line, key + ": " + what);
}

std::optional<std::int64_t> KeyValueFile::get_int(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  std::int64_t out = 0;
  const auto* end = v->data() + v->size();
  const auto [ptr, ec] = std::from_chars(v->data(), end, out);
  if (ec != std::errc() || ptr != end) fail(key, "expected an integer, got '" + *v + "'");
  return out;
}

std::optional<std::size_t> KeyValueFile::get_size(const std::string& key) const {
  const auto v = get_int(key);
  if (!v) return std::nullopt;
  if (*v < 0) fail(key, "must be non-negative");
  return static_cast<std::size_t>(*v);
}

std::optional<double> KeyValueFile::get_double(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  try {
    std::size_t used = 0;
    const double out = std::stod(*v, &used);
    if (used != v->size()) fail(key, "expected a number, got '" + *v + "'");
    return out;
  } catch (const std::logic_error&) {
    fail(key, "expected a number, got '" + *v + "'");
  }
}

std::optional<bool> KeyValueFile::get_bool(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  fail(key, "expected true|false, got '" + *v + "'");
}

std::optional<std::vector<std::string>> KeyValueFile::get_list(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(*v);
  while (std::getline(in, item, ',')) {
    auto s = strip(item);
    if (s.empty()) fail(key, "empty list item");
    out.push_back(std::move(s));
  }
  return out;
}

void KeyValueFile::set(const std::string& key, std::string value) { entries_[key] = {std::move(value), 0}; }

std::vector<std::string> KeyValueFile::unknown_keys(const std::vector<std::string>& known) const {
  std::vector<std::string> out;
  for (const auto& [k, e] : entries_)
    if (std::find(known.begin(), known.end(), k) == known.end()) out.push_back(k);
  return out;
}

}  // namespace flownav
