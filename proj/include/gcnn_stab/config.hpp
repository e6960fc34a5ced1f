#pragma once

// Block-structured text configs:
//
//   # comment
//   graph { kind = sbm, n = 40, communities = 4 }
//   filter {
//     coeffs = [0.5, 0.25, 0.125]
//   }
//
// Entries are separated by commas or newlines. Values are bare tokens,
// double-quoted strings or bracketed arrays of either.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"

namespace gstab {

struct ConfigValue {
  std::vector<std::string> items;
  bool is_array = false;
  std::size_t line = 0;
};

class ConfigBlock {
 public:
  ConfigBlock() = default;
  explicit ConfigBlock(std::string name) : name_(std::move(name)) {}

  const std::string& name() const noexcept { return name_; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, ConfigValue>& values() const noexcept { return values_; }

  void set(const std::string& key, ConfigValue v) {
    if (!values_.emplace(key, std::move(v)).second) throw ConfigError(where(key) + "duplicate key");
  }

  // Rejects keys outside `allowed`, so a typo cannot silently fall back to a default.
  void allow_only(std::initializer_list<const char*> allowed) const {
    for (const auto& [key, v] : values_) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) throw ConfigError(where(key) + "unknown key");
    }
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? scalar(key) : fallback;
  }
  std::string get_string(const std::string& key) const {
    require(key);
    return scalar(key);
  }

  double get_double(const std::string& key, double fallback) const { return has(key) ? to_double(key, scalar(key)) : fallback; }
  double get_double(const std::string& key) const {
    require(key);
    return to_double(key, scalar(key));
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? to_u64(key, scalar(key)) : fallback;
  }
  std::uint64_t get_u64(const std::string& key) const {
    require(key);
    return to_u64(key, scalar(key));
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    return static_cast<std::size_t>(get_u64(key, fallback));
  }
  std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto s = scalar(key);
    if (s == "true" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "no" || s == "0") return false;
    throw ConfigError(where(key) + "expected a boolean, got '" + s + "'");
  }

  std::vector<double> get_doubles(const std::string& key) const {
    require(key);
    std::vector<double> out;
    for (const auto& s : values_.at(key).items) out.push_back(to_double(key, s));
    return out;
  }
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    return has(key) ? get_doubles(key) : fallback;
  }

 private:
  std::string where(const std::string& key) const {
    const auto it = values_.find(key);
    std::string s = "config: " + name_ + "." + key;
    if (it != values_.end()) s += " (line " + std::to_string(it->second.line) + ")";
    return s + ": ";
  }

  void require(const std::string& key) const {
    if (!has(key)) throw ConfigError("config: " + name_ + "." + key + " is required");
  }

  std::string scalar(const std::string& key) const {
    const auto& v = values_.at(key);
    if (v.is_array || v.items.size() != 1) throw ConfigError(where(key) + "expected a single value");
    return v.items.front();
  }

  double to_double(const std::string& key, const std::string& s) const {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
      throw ConfigError(where(key) + "expected a number, got '" + s + "'");
    return v;
  }

  std::uint64_t to_u64(const std::string& key, const std::string& s) const {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw ConfigError(where(key) + "expected a nonnegative integer, got '" + s + "'");
    return v;
  }

  std::string name_;
  std::map<std::string, ConfigValue> values_;
};

class Config {
 public:
  bool has(const std::string& block) const { return blocks_.count(block) != 0; }

  // An absent block reads as empty, so every key takes its default.
  const ConfigBlock& block(const std::string& name) const {
    static const ConfigBlock empty;
    const auto it = blocks_.find(name);
    return it == blocks_.end() ? empty : it->second;
  }

  const std::map<std::string, ConfigBlock>& blocks() const noexcept { return blocks_; }

  void allow_blocks(std::initializer_list<const char*> allowed) const {
    for (const auto& [name, b] : blocks_) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || name == a;
      if (!ok) throw ConfigError("config: unknown block '" + name + "'");
    }
  }

  void add(ConfigBlock b) {
    const auto name = b.name();
    if (!blocks_.emplace(name, std::move(b)).second) throw ConfigError("config: duplicate block '" + name + "'");
  }

 private:
  std::map<std::string, ConfigBlock> blocks_;
};

namespace detail {

class ConfigLexer {
 public:
  explicit ConfigLexer(const std::string& text) : text_(text) {}

  std::size_t line() const noexcept { return line_; }

  // Skips blanks and comments; newlines too unless `stop_at_newline`.
  void skip(bool stop_at_newline = false) {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '#') {
        while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
      } else if (c == '\n') {
        if (stop_at_newline) return;
        ++line_;
        ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  bool done() {
    skip();
    return pos_ >= text_.size();
  }

  char peek() const noexcept { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void expect(char c) {
    skip();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string identifier() {
    skip();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) ++pos_;
    if (start == pos_) fail("expected a name");
    return text_.substr(start, pos_ - start);
  }

  std::string token() {
    skip();
    if (peek() == '"') {
      ++pos_;
      std::string s;
      while (pos_ < text_.size() && text_[pos_] != '"') {
        if (text_[pos_] == '\n') fail("unterminated string");
        s += text_[pos_++];
      }
      if (pos_ >= text_.size()) fail("unterminated string");
      ++pos_;
      return s;
    }
    const std::size_t start = pos_;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isspace(static_cast<unsigned char>(c)) || c == ',' || c == ']' || c == '}' || c == '[' || c == '{' ||
          c == '#' || c == '=')
        break;
      ++pos_;
    }
    if (start == pos_) fail("expected a value");
    return text_.substr(start, pos_ - start);
  }

  void advance() noexcept { ++pos_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + msg);
  }

 private:
  const std::string& text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

}  // namespace detail

inline Config parse_config(const std::string& text) {
  Config cfg;
  detail::ConfigLexer lx(text);
  while (!lx.done()) {
    ConfigBlock block(lx.identifier());
    lx.expect('{');
    while (true) {
      lx.skip();
      if (lx.peek() == '}') {
        lx.advance();
        break;
      }
      if (lx.peek() == '\0') lx.fail("unterminated block '" + block.name() + "'");
      const std::string key = lx.identifier();
      lx.expect('=');
      lx.skip();
      ConfigValue v;
      v.line = lx.line();
      if (lx.peek() == '[') {
        lx.advance();
        v.is_array = true;
        while (true) {
          lx.skip();
          if (lx.peek() == ']') {
            lx.advance();
            break;
          }
          if (lx.peek() == ',') {
            lx.advance();
            continue;
          }
          if (lx.peek() == '\0') lx.fail("unterminated array");
          v.items.push_back(lx.token());
        }
      } else {
        v.items.push_back(lx.token());
      }
      block.set(key, std::move(v));
      lx.skip(true);
      if (lx.peek() == ',') lx.advance();
    }
    cfg.add(std::move(block));
  }
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace gstab
