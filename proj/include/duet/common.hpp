#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace duet {

// ─── Error categories ────────────────────────────────────────────────────────
// Every throwing path in the library uses one of these; the CLI maps them to
// distinct exit codes.

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad configuration (shape mismatches, invalid hyperparameters, bad keys).
struct config_error : error {
    using error::error;
};

// Bad runtime input (malformed manifests, out-of-range ids, empty batches).
struct input_error : error {
    using error::error;
};

// Non-finite activations or losses; carries the offending layer when known.
struct numeric_error : error {
    explicit numeric_error(const std::string& what, int layer = -1)
        : error(what), layer_index(layer) {}
    int layer_index;
};

// Remote augmenter unreachable with a cold cache.
struct augmentation_unavailable : error {
    using error::error;
};

struct io_error : error {
    using error::error;
};

// ─── Deterministic hashing ───────────────────────────────────────────────────
// FNV-1a, used for content-addressed cache keys and derived seeds. Stable
// across runs and platforms by construction.

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t seed = 0xcbf29ce484222325ull) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = char((v >> (8 * i)) & 0xff);
    return fnv1a(std::string_view(buf, 8), seed);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[size_t(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// Derive an independent RNG stream from a base seed and stream tags.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag_a, std::uint64_t tag_b = 0) {
    return fnv1a_u64(tag_b, fnv1a_u64(tag_a, fnv1a_u64(base)));
}

using Rng = std::mt19937_64;

// ─── Small string helpers ────────────────────────────────────────────────────

inline std::string to_lower(std::string s) {
    for (auto& c : s)
        if (c >= 'A' && c <= 'Z') c = char(c - 'A' + 'a');
    return s;
}

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
    return std::string(s.substr(b, e - b));
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

// Edit distance for "did you mean" config diagnostics.
inline size_t edit_distance(std::string_view a, std::string_view b) {
    std::vector<size_t> row(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (size_t i = 1; i <= a.size(); ++i) {
        size_t prev = row[0];
        row[0] = i;
        for (size_t j = 1; j <= b.size(); ++j) {
            size_t cur = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, prev + (a[i - 1] == b[j - 1] ? 0 : 1)});
            prev = cur;
        }
    }
    return row[b.size()];
}

enum class Modality { image, text };

inline const char* modality_name(Modality m) { return m == Modality::image ? "image" : "text"; }

// Replaceable warning sink (tests swap it out to assert on warnings).
inline std::function<void(const std::string&)>& warning_sink() {
    static std::function<void(const std::string&)> sink = [](const std::string& msg) {
        std::fprintf(stderr, "[warn] %s\n", msg.c_str());
    };
    return sink;
}

inline void warn(const std::string& msg) { warning_sink()(msg); }

constexpr const char* kClassPlaceholder = "<CLASS>";

inline std::string fill_template(const std::string& templ, const std::string& class_name) {
    auto pos = templ.find(kClassPlaceholder);
    if (pos == std::string::npos)
        throw input_error("prompt template lacks the " + std::string(kClassPlaceholder) +
                          " placeholder: " + templ);
    std::string out = templ;
    out.replace(pos, std::string(kClassPlaceholder).size(), class_name);
    return out;
}

}  // namespace duet
