#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace diagnet {

// 17 significant digits: enough for a double to survive a text round-trip
// bit-exactly.
inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s) {
    if (s.empty()) throw std::invalid_argument("parse_double: empty string");
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) {
        throw std::invalid_argument("parse_double: bad number '" + s + "'");
    }
    return v;
}

inline long long parse_int(const std::string& s) {
    if (s.empty()) throw std::invalid_argument("parse_int: empty string");
    char* end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size()) {
        throw std::invalid_argument("parse_int: bad integer '" + s + "'");
    }
    return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
    if (s.empty()) throw std::invalid_argument("parse_u64: empty string");
    // strtoull silently wraps negative input; a minus sign is never valid here.
    if (s.find('-') != std::string::npos) {
        throw std::invalid_argument("parse_u64: bad integer '" + s + "'");
    }
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size()) {
        throw std::invalid_argument("parse_u64: bad integer '" + s + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw std::invalid_argument("parse_bool: expected true/false, got '" + s + "'");
}

// Order-preserving key=value store used for config files, run manifests and
// the checkpoint config block.
class KvMap {
public:
    void set(const std::string& key, const std::string& value) {
        for (auto& kv : items_) {
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        }
        items_.emplace_back(key, value);
    }

    // Without this overload a string literal would convert to bool (the
    // built-in pointer conversion outranks constructing a std::string).
    void set(const std::string& key, const char* value) { set(key, std::string(value)); }
    void set(const std::string& key, double value) { set(key, format_g17(value)); }
    void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }
    void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

    bool has(const std::string& key) const {
        for (const auto& kv : items_)
            if (kv.first == key) return true;
        return false;
    }

    const std::string& get(const std::string& key) const {
        for (const auto& kv : items_)
            if (kv.first == key) return kv.second;
        throw std::invalid_argument("config: missing key '" + key + "'");
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        for (const auto& kv : items_)
            if (kv.first == key) return kv.second;
        return fallback;
    }

    const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

private:
    std::vector<std::pair<std::string, std::string>> items_;
};

// Text form: one key=value per line; blank lines and #-comments are ignored
// on parse. Keys may not contain '=' or whitespace.
inline KvMap parse_kv_text(const std::string& text) {
    KvMap map;
    std::istringstream iss(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(iss, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos || line[start] == '#') continue;
        const std::size_t eq = line.find('=', start);
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key=value, got '" + line + "'");
        }
        std::string key = line.substr(start, eq - start);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string value = line.substr(eq + 1);
        std::size_t vstart = value.find_first_not_of(" \t");
        value = vstart == std::string::npos ? "" : value.substr(vstart);
        while (!value.empty() && (value.back() == ' ' || value.back() == '\t')) value.pop_back();
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": empty key");
        }
        map.set(key, value);
    }
    return map;
}

inline std::string kv_to_text(const KvMap& map) {
    std::string out;
    for (const auto& kv : map.items()) {
        out += kv.first;
        out += '=';
        out += kv.second;
        out += '\n';
    }
    return out;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file for reading: " + path);
    std::ostringstream oss;
    oss << in.rdbuf();
    if (in.bad()) throw std::runtime_error("read failed: " + path);
    return oss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open file for writing: " + path);
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + path);
}

// --- little-endian binary primitives -----------------------------------------

inline void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& buf, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

// Cursor-based reader with explicit truncation errors.
class BinReader {
public:
    BinReader(const std::string& data, std::string what)
        : data_(data), what_(std::move(what)) {}

    std::uint16_t u16() { return static_cast<std::uint16_t>(byte() | (byte() << 8)); }

    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return v;
    }

    double f64() {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(byte()) << (8 * i);
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string bytes(std::size_t n) {
        if (pos_ + n > data_.size()) fail();
        std::string out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    bool at_end() const { return pos_ == data_.size(); }
    std::size_t position() const { return pos_; }

private:
    std::uint32_t byte() {
        if (pos_ >= data_.size()) fail();
        return static_cast<unsigned char>(data_[pos_++]);
    }

    [[noreturn]] void fail() const {
        throw std::runtime_error(what_ + ": truncated at byte " + std::to_string(pos_));
    }

    const std::string& data_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace diagnet
