#pragma once

// Run configuration files are plain text:
//
//   # comment
//   seed = 3
//   [train]
//   epochs = 15
//   mode = alternating
//   [dataset]
//   categories = alpha, beta
//
// A "[section]" header prefixes the keys below it ("train.epochs"). Keys may also be
// written fully dotted without a section. Later assignments win, and command-line
// overrides are applied last. Every key must be consumed, so typos are errors.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adaptkit/errors.hpp"

namespace adaptkit {

class KeyValueConfig {
public:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static KeyValueConfig parse(const std::string& text, const std::string& origin = "<config>") {
        KeyValueConfig c;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            line = trim(line);
            if (line.empty() || line[0] == '#' || line[0] == ';') continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            c.set(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
        }
        return c;
    }

    static KeyValueConfig load(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path.string());
    }

    /// Applies "key=value" overrides.
    void apply_override(const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || trim(kv.substr(0, eq)).empty()) throw ConfigError("override '" + kv + "' is not key=value");
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    void set(const std::string& key, std::string value) {
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        values_[key] = std::move(value);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        used_.insert(key);
        return it->second;
    }

    template <class T>
    T get_number(const std::string& key, T fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        used_.insert(key);
        T v{};
        const std::string& s = it->second;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("config key '" + key + "': '" + s + "' is not a valid number");
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        used_.insert(key);
        if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
        if (it->second == "false" || it->second == "0" || it->second == "no") return false;
        throw ConfigError("config key '" + key + "': '" + it->second + "' is not a boolean");
    }

    /// Comma-separated list; empty entries are dropped.
    std::vector<std::string> get_list(const std::string& key, std::vector<std::string> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        used_.insert(key);
        std::vector<std::string> out;
        std::stringstream ss(it->second);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!trim(item).empty()) out.push_back(trim(item));
        return out;
    }

    template <class T>
    std::vector<T> get_number_list(const std::string& key, std::vector<T> fallback) const {
        if (!has(key)) return fallback;
        std::vector<T> out;
        for (const auto& s : get_list(key, {})) {
            KeyValueConfig one;
            one.set(key, s);
            out.push_back(one.get_number<T>(key, T{}));
        }
        return out;
    }

    /// Keys under `prefix.` (prefix stripped), marking them used.
    std::map<std::string, std::string> section(const std::string& prefix) const {
        std::map<std::string, std::string> out;
        const std::string p = prefix + ".";
        for (const auto& [k, v] : values_)
            if (k.rfind(p, 0) == 0) {
                out[k.substr(p.size())] = v;
                used_.insert(k);
            }
        return out;
    }

    std::vector<std::string> unused_keys() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

    void reject_unused() const {
        const auto u = unused_keys();
        if (!u.empty()) throw ConfigError("unknown config key '" + u.front() + "'");
    }

    /// Canonical text form (sorted, one dotted key per line).
    std::string dump() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

}  // namespace adaptkit
