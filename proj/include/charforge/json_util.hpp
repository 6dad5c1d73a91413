#pragma once

// Path-tracking JSON accessors: every failure is reported as a SchemaError
// naming the offending field (e.g. "core_images[3].pose").

#include "charforge/errors.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace charforge {

inline nlohmann::json read_json_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) {
        throw IoError("cannot open '" + file.string() + "'");
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("malformed JSON in '" + file.string() + "': " + e.what());
    }
}

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& file, int indent = 1) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + file.string() + "' for writing");
    }
    out << j.dump(indent) << "\n";
    if (!out) {
        throw IoError("write failed for '" + file.string() + "'");
    }
}

class JsonReader {
public:
    explicit JsonReader(const nlohmann::json& j, std::string path = "") : j_(&j), path_(std::move(path)) {
        if (path_.empty() && !j.is_object()) {
            throw SchemaError("<root>", "expected a JSON object");
        }
    }

    const std::string& path() const { return path_; }
    const nlohmann::json& value() const { return *j_; }

    bool has(const std::string& key) const { return j_->is_object() && j_->contains(key); }

    const nlohmann::json& raw(const std::string& key) const {
        if (!j_->is_object() || !j_->contains(key)) {
            throw SchemaError(child(key), "missing field");
        }
        return (*j_)[key];
    }

    std::string str(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_string()) {
            throw SchemaError(child(key), "expected a string");
        }
        return v.get<std::string>();
    }

    double number(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_number()) {
            throw SchemaError(child(key), "expected a number");
        }
        return v.get<double>();
    }

    int64_t integer(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_number_integer()) {
            throw SchemaError(child(key), "expected an integer");
        }
        return v.get<int64_t>();
    }

    uint64_t unsigned_integer(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0)) {
            throw SchemaError(child(key), "expected a non-negative integer");
        }
        return v.get<uint64_t>();
    }

    bool boolean(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_boolean()) {
            throw SchemaError(child(key), "expected a boolean");
        }
        return v.get<bool>();
    }

    template <class F>
    auto enumerated(const std::string& key, F parse) const {
        const std::string s = str(key);
        try {
            return parse(s);
        } catch (const Error& e) {
            throw SchemaError(child(key), e.what());
        }
    }

    JsonReader object(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_object()) {
            throw SchemaError(child(key), "expected an object");
        }
        return JsonReader(v, child(key));
    }

    std::vector<JsonReader> array(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_array()) {
            throw SchemaError(child(key), "expected an array");
        }
        std::vector<JsonReader> out;
        out.reserve(v.size());
        for (size_t i = 0; i < v.size(); ++i) {
            out.emplace_back(v[i], child(key) + "[" + std::to_string(i) + "]");
        }
        return out;
    }

    // Optional-with-default variants used by the config loader.
    double number_or(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }
    int64_t integer_or(const std::string& key, int64_t fallback) const { return has(key) ? integer(key) : fallback; }
    uint64_t unsigned_or(const std::string& key, uint64_t fallback) const {
        return has(key) ? unsigned_integer(key) : fallback;
    }
    bool boolean_or(const std::string& key, bool fallback) const { return has(key) ? boolean(key) : fallback; }
    std::string str_or(const std::string& key, const std::string& fallback) const {
        return has(key) ? str(key) : fallback;
    }
    std::optional<JsonReader> object_if(const std::string& key) const {
        if (!has(key) || raw(key).is_null()) {
            return std::nullopt;
        }
        return object(key);
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const nlohmann::json* j_;
    std::string path_;
};

}  // namespace charforge
