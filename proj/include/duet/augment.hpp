#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <unistd.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "duet/config.hpp"
#include "duet/image_io.hpp"

namespace duet {

// ─── Augmenter specification and records ─────────────────────────────────────

enum class AugmentKind { llm_remote, diffusion_remote, eda_local, standard_local };

struct AugmenterSpec {
    Modality modality = Modality::text;
    AugmentKind kind = AugmentKind::eda_local;
    std::string endpoint;  // empty = offline (cache only for remote kinds)
    std::uint64_t seed = 0;
    std::string cache_dir;
    int timeout_seconds = 30;
    int image_size = 32;  // remote images are resized to this
};

enum class Provenance { remote, cache, local };

struct AugmentationRecord {
    std::string key;   // stable content hash of (input, kind, seed, template)
    std::string text;  // payload for text augmenters
    Tensor image;      // payload for image augmenters
    Provenance provenance = Provenance::local;
};

// ─── Content-addressed cache ─────────────────────────────────────────────────
// Layout: cache_dir/<modality>/<hex key>. Writes go through a temp file and
// an atomic rename, so concurrent readers never see partial payloads.

class AugmentationCache {
  public:
    explicit AugmentationCache(std::string dir) : dir_(std::move(dir)) {}

    bool enabled() const { return !dir_.empty(); }

    std::filesystem::path entry_path(Modality m, const std::string& key) const {
        return std::filesystem::path(dir_) / modality_name(m) / key;
    }

    std::optional<std::string> get(Modality m, const std::string& key) const {
        if (!enabled()) return std::nullopt;
        std::ifstream is(entry_path(m, key), std::ios::binary);
        if (!is) return std::nullopt;
        std::ostringstream buf;
        buf << is.rdbuf();
        return buf.str();
    }

    void put(Modality m, const std::string& key, const std::string& payload) const {
        if (!enabled()) return;
        if (payload.empty()) throw input_error("refusing to cache an empty augmentation payload");
        auto path = entry_path(m, key);
        std::filesystem::create_directories(path.parent_path());
        auto tmp = path;
        tmp += ".tmp" + std::to_string(::getpid());
        {
            std::ofstream os(tmp, std::ios::binary);
            if (!os) throw io_error("cannot write cache entry: " + tmp.string());
            os.write(payload.data(), std::streamsize(payload.size()));
        }
        std::filesystem::rename(tmp, path);
    }

  private:
    std::string dir_;
};

inline std::string content_key(Modality modality, AugmentKind kind, std::uint64_t seed,
                               const std::string& templ, const std::string& input) {
    std::string canon = std::string(modality_name(modality)) + "|" + std::to_string(int(kind)) + "|" +
                        std::to_string(seed) + "|" + templ + "|" + input;
    return hex64(fnv1a(canon));
}

// ─── Remote wire protocol ────────────────────────────────────────────────────
// One POST /augment per request with body {"modality", "class", "template",
// "seed"}; the response body is the sentence (text) or a base64 raster
// (image). This is the only network surface in the system.

namespace b64 {

inline const char* alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string encode(const std::string& in) {
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    const char* tbl = alphabet();
    size_t i = 0;
    while (i + 3 <= in.size()) {
        std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8) | std::uint8_t(in[i + 2]);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back(tbl[v & 63]);
        i += 3;
    }
    size_t rem = in.size() - i;
    if (rem == 1) {
        std::uint32_t v = std::uint8_t(in[i]) << 16;
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out += "==";
    } else if (rem == 2) {
        std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out += "=";
    }
    return out;
}

inline std::string decode(const std::string& in) {
    std::array<int, 256> rev;
    rev.fill(-1);
    for (int i = 0; i < 64; ++i) rev[size_t(std::uint8_t(alphabet()[i]))] = i;
    std::string out;
    std::uint32_t acc = 0;
    int bits = 0;
    for (char c : in) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int v = rev[size_t(std::uint8_t(c))];
        if (v < 0) throw io_error("invalid base64 payload");
        acc = (acc << 6) | std::uint32_t(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(char((acc >> bits) & 0xff));
        }
    }
    return out;
}

}  // namespace b64

inline std::string remote_fetch(const AugmenterSpec& spec, const std::string& class_name,
                                const std::string& templ) {
    httplib::Client client(spec.endpoint);
    client.set_connection_timeout(spec.timeout_seconds, 0);
    client.set_read_timeout(spec.timeout_seconds, 0);
    nlohmann::json body{{"modality", modality_name(spec.modality)},
                        {"class", class_name},
                        {"template", templ},
                        {"seed", spec.seed}};
    auto res = client.Post("/augment", body.dump(), "application/json");
    if (!res || res->status != 200)
        throw augmentation_unavailable(
            "augmentation endpoint '" + spec.endpoint + "' unreachable and cache missed for class '" +
            class_name + "'; warm the cache with `duet augment-cache` or fix the endpoint");
    return res->body;
}

// ─── Generative augmenters (remote with cache) ───────────────────────────────

inline std::string first_sentence(const std::string& text, bool* trimmed) {
    auto pos = text.find_first_of(".!?");
    if (pos == std::string::npos || trim(text.substr(pos + 1)).empty()) {
        if (trimmed) *trimmed = false;
        return trim(text);
    }
    if (trimmed) *trimmed = true;
    return trim(text.substr(0, pos + 1));
}

// One descriptive sentence about the class, fetched from the endpoint or the
// content-addressed cache.
inline AugmentationRecord augment_text_llm(const std::string& class_name, const std::string& templ,
                                           const AugmenterSpec& spec) {
    if (spec.kind != AugmentKind::llm_remote)
        throw config_error("augment_text_llm requires kind = llm_remote");
    if (class_name.empty()) throw input_error("augment_text_llm: empty class name");
    if (templ.find(kClassPlaceholder) == std::string::npos)
        throw input_error("augment_text_llm: template lacks the class placeholder");

    AugmentationRecord rec;
    rec.key = content_key(Modality::text, spec.kind, spec.seed, templ, class_name);
    AugmentationCache cache(spec.cache_dir);
    if (auto hit = cache.get(Modality::text, rec.key)) {
        rec.text = *hit;
        rec.provenance = Provenance::cache;
        return rec;
    }
    if (spec.endpoint.empty())
        throw augmentation_unavailable("no augmentation endpoint configured and cache missed for class '" +
                                       class_name + "'; warm the cache with `duet augment-cache`");
    std::string body = remote_fetch(spec, class_name, templ);
    bool trimmed = false;
    rec.text = first_sentence(body, &trimmed);
    if (trimmed)
        warn("LLM returned multiple sentences for class '" + class_name + "'; kept the first");
    if (rec.text.empty()) throw augmentation_unavailable("LLM returned an empty sentence");
    cache.put(Modality::text, rec.key, rec.text);
    rec.provenance = Provenance::remote;
    return rec;
}

// A generated exemplar image of the class, resized to spec.image_size and
// snapped to the 8-bit raster grid so cache hits are bit-identical.
inline AugmentationRecord augment_image_diffusion(const std::string& class_name,
                                                  const AugmenterSpec& spec) {
    if (spec.kind != AugmentKind::diffusion_remote)
        throw config_error("augment_image_diffusion requires kind = diffusion_remote");
    if (class_name.empty()) throw input_error("augment_image_diffusion: empty class name");

    AugmentationRecord rec;
    std::string size_tag = std::to_string(spec.image_size);
    rec.key = content_key(Modality::image, spec.kind, spec.seed, size_tag, class_name);
    AugmentationCache cache(spec.cache_dir);
    if (auto hit = cache.get(Modality::image, rec.key)) {
        rec.image = decode_ppm(*hit);
        rec.provenance = Provenance::cache;
        return rec;
    }
    if (spec.endpoint.empty())
        throw augmentation_unavailable("no augmentation endpoint configured and cache missed for class '" +
                                       class_name + "'; warm the cache with `duet augment-cache`");
    std::string body = remote_fetch(spec, class_name, "");
    Tensor img = decode_ppm(b64::decode(body));
    if (img.shape[1] != spec.image_size || img.shape[2] != spec.image_size)
        img = quantize_image(bilinear_resize(img, spec.image_size, spec.image_size));
    cache.put(Modality::image, rec.key, encode_ppm(img));
    rec.image = std::move(img);
    rec.provenance = Provenance::remote;
    return rec;
}

// ─── EDA text augmentation ───────────────────────────────────────────────────

// Small bundled thesaurus; out-of-table words are never substituted.
inline const std::unordered_map<std::string, std::vector<std::string>>& eda_thesaurus() {
    static const std::unordered_map<std::string, std::vector<std::string>> table = {
        {"photo", {"picture", "image", "snapshot"}},
        {"picture", {"photo", "image"}},
        {"image", {"picture", "photo"}},
        {"drawing", {"sketch", "illustration"}},
        {"small", {"little", "tiny"}},
        {"large", {"big", "huge"}},
        {"bright", {"vivid", "luminous"}},
        {"dark", {"dim", "shadowy"}},
        {"red", {"crimson", "scarlet"}},
        {"green", {"emerald", "verdant"}},
        {"blue", {"azure", "cobalt"}},
        {"yellow", {"golden", "amber"}},
        {"shape", {"figure", "form"}},
        {"object", {"item", "thing"}},
        {"round", {"circular", "curved"}},
    };
    return table;
}

// One seeded EDA operation (synonym swap, random swap, random insertion,
// random deletion). Words of class_word are never substituted, deleted or
// used as insertion sources, so the class token survives every operation.
inline std::string augment_text_eda(const std::string& sentence, std::uint64_t seed,
                                    const std::string& class_word = "") {
    if (trim(sentence).empty()) throw input_error("augment_text_eda: empty sentence");

    std::vector<std::string> words;
    for (const auto& w : split(sentence, ' '))
        if (!w.empty()) words.push_back(w);
    if (words.empty()) return sentence;

    std::unordered_set<std::string> protected_words;
    for (const auto& w : split(to_lower(class_word), ' '))
        if (!w.empty()) protected_words.insert(w);
    auto is_protected = [&](const std::string& w) { return protected_words.count(to_lower(w)) != 0; };

    const auto& synonyms = eda_thesaurus();
    auto join = [](const std::vector<std::string>& ws) {
        std::string out;
        for (size_t i = 0; i < ws.size(); ++i) out += (i ? " " : "") + ws[i];
        return out;
    };

    Rng rng(derive_seed(seed, 0x656461ull));  // "eda"
    std::uniform_int_distribution<int> op_dist(0, 3);
    int first_op = op_dist(rng);

    for (int attempt = 0; attempt < 4; ++attempt) {
        int op = (first_op + attempt) % 4;
        switch (op) {
            case 0: {  // synonym replacement
                std::vector<size_t> eligible;
                for (size_t i = 0; i < words.size(); ++i)
                    if (!is_protected(words[i]) && synonyms.count(to_lower(words[i])))
                        eligible.push_back(i);
                if (eligible.empty()) break;
                size_t at = eligible[std::uniform_int_distribution<size_t>(0, eligible.size() - 1)(rng)];
                const auto& options = synonyms.at(to_lower(words[at]));
                auto out = words;
                out[at] = options[std::uniform_int_distribution<size_t>(0, options.size() - 1)(rng)];
                return join(out);
            }
            case 1: {  // random swap
                if (words.size() < 2) break;
                size_t i = std::uniform_int_distribution<size_t>(0, words.size() - 1)(rng);
                size_t j = std::uniform_int_distribution<size_t>(0, words.size() - 1)(rng);
                if (i == j) j = (j + 1) % words.size();
                auto out = words;
                std::swap(out[i], out[j]);
                return join(out);
            }
            case 2: {  // random insertion of a synonym of an in-sentence word
                std::vector<size_t> sources;
                for (size_t i = 0; i < words.size(); ++i)
                    if (!is_protected(words[i]) && synonyms.count(to_lower(words[i])))
                        sources.push_back(i);
                if (sources.empty()) break;
                size_t src = sources[std::uniform_int_distribution<size_t>(0, sources.size() - 1)(rng)];
                const auto& options = synonyms.at(to_lower(words[src]));
                std::string inserted =
                    options[std::uniform_int_distribution<size_t>(0, options.size() - 1)(rng)];
                size_t at = std::uniform_int_distribution<size_t>(0, words.size())(rng);
                auto out = words;
                out.insert(out.begin() + std::ptrdiff_t(at), inserted);
                return join(out);
            }
            default: {  // random deletion
                std::vector<size_t> deletable;
                for (size_t i = 0; i < words.size(); ++i)
                    if (!is_protected(words[i])) deletable.push_back(i);
                if (deletable.empty() || words.size() < 2) break;
                size_t at = deletable[std::uniform_int_distribution<size_t>(0, deletable.size() - 1)(rng)];
                auto out = words;
                out.erase(out.begin() + std::ptrdiff_t(at));
                if (out.empty()) return sentence;
                return join(out);
            }
        }
    }
    return sentence;  // no legal operation
}

// ─── Standard image augmentation ─────────────────────────────────────────────

inline Tensor hflip(const Tensor& img) {
    Tensor out = img;
    std::int64_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) out.at(c, y, x) = img.at(c, y, W - 1 - x);
    return out;
}

inline Tensor solarize(const Tensor& img, double threshold = 0.5) {
    Tensor out = img;
    for (auto& v : out.data)
        if (v > threshold) v = 1.0 - v;
    return out;
}

inline Tensor invert_colors(const Tensor& img) {
    Tensor out = img;
    for (auto& v : out.data) v = 1.0 - v;
    return out;
}

inline Tensor crop_and_resize(const Tensor& img, Rng& rng, double min_scale = 0.7) {
    std::int64_t H = img.shape[1], W = img.shape[2];
    double scale = std::uniform_real_distribution<double>(min_scale, 1.0)(rng);
    std::int64_t ch = std::max<std::int64_t>(2, std::int64_t(double(H) * scale));
    std::int64_t cw = std::max<std::int64_t>(2, std::int64_t(double(W) * scale));
    std::int64_t oy = std::uniform_int_distribution<std::int64_t>(0, H - ch)(rng);
    std::int64_t ox = std::uniform_int_distribution<std::int64_t>(0, W - cw)(rng);
    Tensor crop({img.shape[0], ch, cw});
    for (std::int64_t c = 0; c < img.shape[0]; ++c)
        for (std::int64_t y = 0; y < ch; ++y)
            for (std::int64_t x = 0; x < cw; ++x) crop.at(c, y, x) = img.at(c, oy + y, ox + x);
    return bilinear_resize(crop, H, W);
}

// Seeded random composition of crop-and-resize, horizontal flip, solarization
// and color inversion; output dimensions always equal input dimensions.
inline Tensor augment_image_standard(const Tensor& img, std::uint64_t seed) {
    if (img.ndim() != 3) throw input_error("augment_image_standard: expected [C, H, W]");
    Rng rng(derive_seed(seed, 0x737464ull));  // "std"
    std::bernoulli_distribution coin(0.5);
    Tensor out = img;
    if (coin(rng)) out = crop_and_resize(out, rng);
    if (coin(rng)) out = hflip(out);
    if (coin(rng)) out = solarize(out);
    if (coin(rng)) out = invert_colors(out);
    return out;
}

// ─── Training-facing facade ──────────────────────────────────────────────────
// One augmented exemplar per class per epoch: remote kinds cycle a seed pool
// of size pool_size, local kinds derive a fresh seed from (class, epoch).

class Augmenter {
  public:
    Augmenter(const AugmentConfig& cfg, int image_size, std::uint64_t base_seed)
        : cfg_(cfg), image_size_(image_size), base_seed_(base_seed) {}

    std::string augmented_text(const std::string& class_name, const std::string& templ,
                               int class_index, int epoch) const {
        if (cfg_.text_kind == TextAugKind::llm_remote) {
            AugmenterSpec spec = remote_spec(Modality::text, AugmentKind::llm_remote, class_index, epoch);
            return augment_text_llm(class_name, templ, spec).text;
        }
        std::uint64_t seed = derive_seed(base_seed_, std::uint64_t(class_index) + 1, std::uint64_t(epoch));
        return augment_text_eda(fill_template(templ, class_name), seed, class_name);
    }

    Tensor augmented_image(const Tensor& original, const std::string& class_name, int class_index,
                           int epoch) const {
        if (cfg_.image_kind == ImageAugKind::diffusion_remote) {
            AugmenterSpec spec =
                remote_spec(Modality::image, AugmentKind::diffusion_remote, class_index, epoch);
            return augment_image_diffusion(class_name, spec).image;
        }
        std::uint64_t seed = derive_seed(base_seed_, std::uint64_t(class_index) + 1, std::uint64_t(epoch));
        return augment_image_standard(original, seed);
    }

    // Pre-fetches every remote payload a training run will need.
    int warm_cache(const std::vector<std::string>& class_names, const std::string& templ) const {
        int fetched = 0;
        for (int c = 0; c < int(class_names.size()); ++c) {
            for (int slot = 0; slot < cfg_.pool_size; ++slot) {
                if (cfg_.text_kind == TextAugKind::llm_remote) {
                    augment_text_llm(class_names[size_t(c)], templ,
                                     remote_spec(Modality::text, AugmentKind::llm_remote, c, slot));
                    ++fetched;
                }
                if (cfg_.image_kind == ImageAugKind::diffusion_remote) {
                    augment_image_diffusion(
                        class_names[size_t(c)],
                        remote_spec(Modality::image, AugmentKind::diffusion_remote, c, slot));
                    ++fetched;
                }
            }
        }
        return fetched;
    }

  private:
    AugmenterSpec remote_spec(Modality m, AugmentKind kind, int class_index, int epoch) const {
        AugmenterSpec spec;
        spec.modality = m;
        spec.kind = kind;
        spec.endpoint = cfg_.endpoint;
        spec.cache_dir = cfg_.cache_dir;
        spec.timeout_seconds = cfg_.timeout_seconds;
        spec.image_size = image_size_;
        int slot = cfg_.pool_size > 0 ? epoch % cfg_.pool_size : 0;
        spec.seed = derive_seed(base_seed_, std::uint64_t(class_index) + 1, std::uint64_t(slot));
        return spec;
    }

    AugmentConfig cfg_;
    int image_size_;
    std::uint64_t base_seed_;
};

}  // namespace duet
