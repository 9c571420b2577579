#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace trace {

using json = nlohmann::ordered_json;

class TraceError : public std::runtime_error {
public:
    explicit TraceError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// String helpers
// ---------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

/// Canonical form used for all fuzzy string comparisons: lowercase, trimmed,
/// internal whitespace runs collapsed to a single space.
inline std::string normalize(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool in_space = true;  // leading spaces dropped
    for (char ch : s) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            in_space = true;
        } else {
            if (in_space && !out.empty()) out.push_back(' ');
            out.push_back(static_cast<char>(std::tolower(c)));
            in_space = false;
        }
    }
    return out;
}

inline bool icontains(std::string_view haystack, std::string_view needle) {
    if (needle.empty()) return true;
    std::string h = to_lower(haystack), n = to_lower(needle);
    return h.find(n) != std::string::npos;
}

inline std::vector<std::string> split(std::string_view s, char delim) {
    std::vector<std::string> out;
    size_t start = 0;
    for (size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == delim) {
            out.emplace_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

/// Shortest stable decimal rendering ("4.8", "180", "0.35").
inline std::string fmt_decimal(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline std::optional<double> parse_decimal(std::string_view s) {
    std::string t = trim(s);
    if (t.empty()) return std::nullopt;
    char* end = nullptr;
    double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size()) return std::nullopt;
    return v;
}

// ---------------------------------------------------------------------------
// Token counting (prompt budgets)
// ---------------------------------------------------------------------------

/// Budgets are expressed in abstract "token units". The default counter uses
/// whitespace-delimited words so budgets are enforceable without any model
/// tokenizer; swap in a model-specific counter through the same signature.
using TokenCounter = std::function<int(std::string_view)>;

inline int count_words(std::string_view s) {
    int n = 0;
    bool in_word = false;
    for (char ch : s) {
        bool space = std::isspace(static_cast<unsigned char>(ch)) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

inline TokenCounter default_token_counter() {
    return [](std::string_view s) { return count_words(s); };
}

/// Keep at most max_tokens words, dropping from the front (oldest text first).
inline std::string truncate_words_front(std::string_view s, int max_tokens) {
    if (max_tokens <= 0) return "";
    std::vector<std::pair<size_t, size_t>> words;
    size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        size_t b = i;
        while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        if (i > b) words.emplace_back(b, i);
    }
    if (static_cast<int>(words.size()) <= max_tokens) return std::string(s);
    size_t keep_from = words[words.size() - static_cast<size_t>(max_tokens)].first;
    return std::string(s.substr(keep_from));
}

// ---------------------------------------------------------------------------
// Time (UTC, second resolution)
// ---------------------------------------------------------------------------

namespace detail {

// Days from civil date, Howard Hinnant's algorithm.
inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = static_cast<int>(yy + (m <= 2));
}

}  // namespace detail

inline std::int64_t utc_seconds(int y, unsigned mo, unsigned d, unsigned h = 0, unsigned mi = 0,
                                unsigned s = 0) {
    return detail::days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + s;
}

/// "YYYY-MM-DD HH:MM:SS" in UTC.
inline std::string format_timestamp(std::int64_t t) {
    std::int64_t days = t / 86400;
    std::int64_t rem = t % 86400;
    if (rem < 0) {
        rem += 86400;
        days -= 1;
    }
    int y;
    unsigned mo, d;
    detail::civil_from_days(days, y, mo, d);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u %02lld:%02lld:%02lld", y, mo, d,
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

/// Accepts ISO-8601 ("2023-01-02T03:04:05Z", space separator, optional
/// fractional seconds and ±hh:mm offset, date-only) or integer epoch seconds.
/// Sub-second precision is truncated.
inline std::optional<std::int64_t> parse_timestamp(std::string_view raw) {
    std::string s = trim(raw);
    if (s.empty()) return std::nullopt;

    // Epoch seconds: optional sign, all digits.
    {
        size_t i = (s[0] == '-' || s[0] == '+') ? 1 : 0;
        bool all_digits = i < s.size();
        for (size_t k = i; k < s.size(); ++k)
            if (!std::isdigit(static_cast<unsigned char>(s[k]))) { all_digits = false; break; }
        if (all_digits) {
            std::int64_t v = 0;
            auto [p, ec] = std::from_chars(s.data() + (s[0] == '+' ? 1 : 0), s.data() + s.size(), v);
            if (ec == std::errc()) return v;
            return std::nullopt;
        }
    }

    int y = 0;
    unsigned mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    size_t pos = 0;
    auto read_uint = [&](unsigned digits, unsigned& out) -> bool {
        if (pos + digits > s.size()) return false;
        unsigned v = 0;
        for (unsigned k = 0; k < digits; ++k) {
            char c = s[pos + k];
            if (!std::isdigit(static_cast<unsigned char>(c))) return false;
            v = v * 10 + static_cast<unsigned>(c - '0');
        }
        out = v;
        pos += digits;
        return true;
    };
    auto expect = [&](char c) -> bool {
        if (pos < s.size() && s[pos] == c) { ++pos; return true; }
        return false;
    };

    unsigned uy = 0;
    if (!read_uint(4, uy) || !expect('-') || !read_uint(2, mo) || !expect('-') || !read_uint(2, d))
        return std::nullopt;
    y = static_cast<int>(uy);
    if (mo < 1 || mo > 12 || d < 1 || d > 31) return std::nullopt;

    std::int64_t offset = 0;
    if (pos < s.size()) {
        if (s[pos] != 'T' && s[pos] != 't' && s[pos] != ' ') return std::nullopt;
        ++pos;
        if (!read_uint(2, h) || !expect(':') || !read_uint(2, mi)) return std::nullopt;
        if (pos < s.size() && s[pos] == ':') {
            ++pos;
            if (!read_uint(2, sec)) return std::nullopt;
        }
        if (pos < s.size() && s[pos] == '.') {
            ++pos;
            while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
        }
        if (pos < s.size()) {
            char c = s[pos];
            if (c == 'Z' || c == 'z') {
                ++pos;
            } else if (c == '+' || c == '-') {
                int sign = (c == '-') ? -1 : 1;
                ++pos;
                unsigned oh = 0, om = 0;
                if (!read_uint(2, oh)) return std::nullopt;
                if (pos < s.size() && s[pos] == ':') ++pos;
                if (pos < s.size()) {
                    if (!read_uint(2, om)) return std::nullopt;
                }
                offset = sign * (static_cast<std::int64_t>(oh) * 3600 + om * 60);
            }
        }
        if (h > 23 || mi > 59 || sec > 60) return std::nullopt;
    }
    if (pos != s.size()) return std::nullopt;
    return utc_seconds(y, mo, d, h, mi, sec) - offset;
}

// ---------------------------------------------------------------------------
// Content digest (FNV-1a 64)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string digest_hex(std::string_view data) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(data)));
    return buf;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TraceError("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Write via temp file + rename so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw TraceError("cannot write file: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw TraceError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw TraceError("cannot open file: " + path.string());
    std::vector<json> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty()) continue;
        try {
            out.push_back(json::parse(t));
        } catch (const std::exception& e) {
            throw TraceError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON: " +
                             e.what());
        }
    }
    return out;
}

inline std::string to_jsonl(const std::vector<json>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.dump();
        out += '\n';
    }
    return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records) {
    write_file_atomic(path, to_jsonl(records));
}

// ---------------------------------------------------------------------------
// Deterministic RNG helpers (synthetic data only; inference uses no RNG)
// ---------------------------------------------------------------------------

/// SplitMix64. Used instead of <random> distributions so generated corpora are
/// byte-identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, n).
    std::uint64_t below(std::uint64_t n) { return n ? next() % n : 0; }

    /// Uniform in [lo, hi] inclusive.
    std::int64_t range(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    double unit() { return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0); }

    bool chance(double p) { return unit() < p; }

private:
    std::uint64_t state_;
};

}  // namespace trace
