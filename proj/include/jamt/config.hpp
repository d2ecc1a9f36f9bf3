#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "jamt/error.hpp"

namespace jamt {

// Flat key=value configuration. Lines are `key=value`; blank lines and lines
// starting with '#' are skipped. Later assignments override earlier ones.
class Config {
public:
    Config() = default;

    static Config from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot read config file: " + path);
        Config c;
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            std::string trimmed = trim(line);
            if (trimmed.empty() || trimmed[0] == '#') continue;
            auto eq = trimmed.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ConfigError("bad config line " + std::to_string(lineno) + " in " + path + ": " + trimmed);
            c.values_[trim(trimmed.substr(0, eq))] = trim(trimmed.substr(eq + 1));
        }
        return c;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            int v = std::stoi(it->second, &pos);
            if (pos != it->second.size()) throw ConfigError("not an integer");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
        }
    }

    long long get_i64(const std::string& key, long long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw ConfigError("not an integer");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw ConfigError("not a number");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not a number: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key '" + key + "' is not a boolean: " + it->second);
    }

    // Throws when a key outside `allowed` is present.
    void require_known(const std::set<std::string>& allowed) const {
        for (const auto& [k, _] : values_)
            if (allowed.count(k) == 0) throw ConfigError("unknown config key: " + k);
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    std::string to_text() const {
        std::ostringstream out;
        for (const auto& [k, v] : values_) out << k << "=" << v << "\n";
        return out.str();
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace jamt
