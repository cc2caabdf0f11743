#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fxmm/error.hpp"

namespace fxmm {

// Flat `key = value` configuration text. `#` starts a comment anywhere on a
// line, blank lines are skipped, whitespace around keys and values is
// trimmed. Typed getters mark keys as consumed; finish() turns any leftover
// key into an error, so misspellings never pass silently.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str(), path);
  }

  static KeyValueConfig parse_text(const std::string& text, std::string origin = "<config>") {
    KeyValueConfig kv;
    kv.origin_ = std::move(origin);
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string_view trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string_view::npos)
        throw parse_error(kv.origin_ + ":" + std::to_string(lineno) +
                          ": expected `key = value`, got '" + std::string(trimmed) + "'");
      std::string key(trim(trimmed.substr(0, eq)));
      std::string value(trim(trimmed.substr(eq + 1)));
      if (key.empty())
        throw parse_error(kv.origin_ + ":" + std::to_string(lineno) + ": empty key");
      auto [it, inserted] = kv.entries_.emplace(std::move(key), Entry{std::move(value), lineno});
      if (!inserted)
        throw parse_error(kv.origin_ + ":" + std::to_string(lineno) + ": duplicate key '" +
                          it->first + "' (first set at line " + std::to_string(it->second.line) +
                          ")");
    }
    return kv;
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const Entry* e = find(key);
    return e != nullptr ? e->value : fallback;
  }

  std::string require_string(const std::string& key) const {
    const Entry* e = find(key);
    if (e == nullptr) throw config_error(origin_ + ": missing required key '" + key + "'");
    return e->value;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const Entry* e = find(key);
    if (e == nullptr) return fallback;
    std::int64_t v = 0;
    const char* begin = e->value.data();
    const char* end = begin + e->value.size();
    auto res = std::from_chars(begin, end, v);
    if (res.ec != std::errc{} || res.ptr != end) throw bad_value(key, *e, "an integer");
    return v;
  }

  double get_double(const std::string& key, double fallback) const {
    const Entry* e = find(key);
    if (e == nullptr) return fallback;
    char* end = nullptr;
    const double v = std::strtod(e->value.c_str(), &end);
    if (end != e->value.c_str() + e->value.size() || e->value.empty())
      throw bad_value(key, *e, "a number");
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const Entry* e = find(key);
    if (e == nullptr) return fallback;
    if (e->value == "true" || e->value == "1") return true;
    if (e->value == "false" || e->value == "0") return false;
    throw bad_value(key, *e, "true/false/1/0");
  }

  // Every key must have been consumed by a getter by now.
  void finish() const {
    for (const auto& [key, e] : entries_)
      if (!e.used)
        throw config_error(origin_ + ":" + std::to_string(e.line) + ": unknown key '" + key +
                           "'");
  }

  // Splits "a, b, c" into trimmed tokens; empty input gives an empty list.
  static std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= value.size()) {
      std::size_t comma = value.find(',', start);
      if (comma == std::string::npos) comma = value.size();
      std::string token(trim(std::string_view(value).substr(start, comma - start)));
      if (!token.empty()) out.push_back(std::move(token));
      start = comma + 1;
    }
    return out;
  }

 private:
  struct Entry {
    std::string value;
    int line;
    mutable bool used = false;
  };

  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
      s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
      s.remove_suffix(1);
    return s;
  }

  const Entry* find(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    it->second.used = true;
    return &it->second;
  }

  Error bad_value(const std::string& key, const Entry& e, const char* expected) const {
    return config_error(origin_ + ":" + std::to_string(e.line) + ": key '" + key + "' expects " +
                        expected + ", got '" + e.value + "'");
  }

  std::map<std::string, Entry> entries_;
  std::string origin_;
};

}  // namespace fxmm
