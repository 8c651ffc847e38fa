#pragma once

#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vprop/errors.hpp"

namespace vprop {

/// `key = value` text with `#` comments. Keys keep insertion order on output.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<text>") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    if (!has(key)) order_.push_back(key);
    values_[key] = value;
  }
  void set(const std::string& key, double v) { set(key, format(v)); }
  void set(const std::string& key, long long v) { set(key, std::to_string(v)); }
  void set(const std::string& key, std::initializer_list<double> vs) {
    std::string s;
    for (double v : vs) s += (s.empty() ? "" : " ") + format(v);
    set(key, s);
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
  }
  std::string str(const std::string& key, const std::string& fallback) const { return has(key) ? str(key) : fallback; }

  double num(const std::string& key) const { return to_double(key, str(key)); }
  double num(const std::string& key, double fallback) const { return has(key) ? num(key) : fallback; }

  long long integer(const std::string& key) const {
    const std::string& s = str(key);
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("key '" + key + "': not an integer: " + s);
    return v;
  }
  long long integer(const std::string& key, long long fallback) const { return has(key) ? integer(key) : fallback; }

  std::vector<double> nums(const std::string& key) const {
    std::istringstream in(str(key));
    std::vector<double> out;
    std::string tok;
    while (in >> tok) out.push_back(to_double(key, tok));
    return out;
  }

  const std::vector<std::string>& keys() const { return order_; }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& k : order_) os << k << " = " << values_.at(k) << '\n';
    return os.str();
  }

  /// Shortest decimal text that round-trips the double exactly.
  static std::string format(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  static double to_double(const std::string& key, const std::string& s) {
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("key '" + key + "': not a number: " + s);
    return v;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

}  // namespace vprop
