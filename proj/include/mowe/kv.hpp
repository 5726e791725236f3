#pragma once

// Structured-text `key = value` files used for configs, shape specs and bucket plans.

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mowe/common.hpp"

namespace mowe {

class KeyValues {
public:
    /// Lines are `key = value`; blank lines and lines starting with '#' are ignored.
    static KeyValues parse(std::string_view text, const std::string& origin = "input") {
        KeyValues kv;
        int lineno = 0;
        for (const auto& raw : split(text, '\n')) {
            ++lineno;
            const auto line = trim(raw);
            if (line.empty() || line[0] == '#') {
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            }
            auto key = trim(line.substr(0, eq));
            if (key.empty()) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            if (kv.values_.count(key) != 0) {
                throw ConfigError(origin + ": duplicate key '" + key + "'");
            }
            kv.values_[key] = trim(line.substr(eq + 1));
        }
        return kv;
    }

    static KeyValues load(const std::string& path) { return parse(read_file(path), path); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    const std::map<std::string, std::string>& entries() const { return values_; }

    const std::string& str(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) {
            throw ConfigError("missing key '" + key + "'");
        }
        return it->second;
    }
    std::string str(const std::string& key, const std::string& fallback) const { return has(key) ? str(key) : fallback; }

    long long integer(const std::string& key) const {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(str(key), &used);
            if (used != str(key).size()) {
                throw std::invalid_argument(key);
            }
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError("key '" + key + "': expected an integer, got '" + str(key) + "'");
        }
    }
    long long integer(const std::string& key, long long fallback) const { return has(key) ? integer(key) : fallback; }

    double real(const std::string& key) const {
        try {
            std::size_t used = 0;
            const double v = std::stod(str(key), &used);
            if (used != str(key).size()) {
                throw std::invalid_argument(key);
            }
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError("key '" + key + "': expected a number, got '" + str(key) + "'");
        }
    }
    double real(const std::string& key, double fallback) const { return has(key) ? real(key) : fallback; }

    bool boolean(const std::string& key, bool fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const auto& v = str(key);
        if (v == "true" || v == "1" || v == "yes") {
            return true;
        }
        if (v == "false" || v == "0" || v == "no") {
            return false;
        }
        throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
    }

    std::vector<long long> int_list(const std::string& key) const {
        std::vector<long long> out;
        const auto& v = str(key);
        if (trim(v).empty()) {
            return out;
        }
        for (const auto& f : split(v, ',')) {
            try {
                out.push_back(std::stoll(trim(f)));
            } catch (const std::logic_error&) {
                throw ConfigError("key '" + key + "': bad integer list '" + v + "'");
            }
        }
        return out;
    }

    std::vector<double> real_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& f : split(str(key), ',')) {
            try {
                out.push_back(std::stod(trim(f)));
            } catch (const std::logic_error&) {
                throw ConfigError("key '" + key + "': bad number list '" + str(key) + "'");
            }
        }
        return out;
    }

    /// Throws naming the first key outside `allowed`.
    void reject_unknown(const std::set<std::string>& allowed) const {
        for (const auto& [k, v] : values_) {
            if (allowed.count(k) == 0) {
                throw ConfigError("unknown key '" + k + "'");
            }
        }
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) {
            out += k + " = " + v + "\n";
        }
        return out;
    }

private:
    std::map<std::string, std::string> values_;
};

template <typename T>
std::string join(const std::vector<T>& v, const char* sep = ",") {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) {
            out += sep;
        }
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace mowe
