#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "duet/image_io.hpp"
#include "duet/model.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

// ─── Cross-attention heatmaps ────────────────────────────────────────────────
// Selects the object token's cross-attention over image patch keys, averages
// heads (and adapter layers unless one is pinned), reshapes to the patch grid
// and min-max normalizes. All-equal maps normalize to 0.5 everywhere.

namespace viz_detail {

// Maps an index into the raw token id sequence (words + eot) to the position
// in an encoder stream that also carries prompt/pad roles.
inline std::int64_t stream_position(const std::vector<Role>& roles, std::int64_t token_index) {
    std::int64_t seen = 0;
    for (std::int64_t s = 0; s < std::int64_t(roles.size()); ++s) {
        Role r = roles[size_t(s)];
        if (r == Role::word || r == Role::eot) {
            if (seen == token_index) return s;
            ++seen;
        }
    }
    throw input_error("object token index " + std::to_string(token_index) +
                      " out of range for the text stream");
}

inline std::vector<std::int64_t> patch_positions(const std::vector<Role>& roles) {
    std::vector<std::int64_t> out;
    for (std::int64_t s = 0; s < std::int64_t(roles.size()); ++s)
        if (roles[size_t(s)] == Role::patch) out.push_back(s);
    return out;
}

}  // namespace viz_detail

// records: attention recorded by the adapter; object_token_index indexes the
// tokenized prompt (word positions). direction selects text-query->image-key
// (default) or the transposed reading. layer = -1 averages all layers.
inline Tensor extract_object_attention(const std::vector<AttentionRecord>& records,
                                       std::int64_t object_token_index,
                                       AttentionDirection direction = AttentionDirection::text_to_image,
                                       std::int64_t batch_index = 0, int layer = -1) {
    bool want_text_query = direction == AttentionDirection::text_to_image;
    std::vector<const AttentionRecord*> selected;
    for (const auto& rec : records) {
        bool is_cross = rec.query_modality != rec.key_modality;
        if (!is_cross) continue;
        bool matches = want_text_query
                           ? (rec.query_modality == Modality::text && rec.key_modality == Modality::image)
                           : (rec.query_modality == Modality::image && rec.key_modality == Modality::text);
        if (matches && (layer < 0 || rec.layer_index == layer)) selected.push_back(&rec);
    }
    if (selected.empty())
        throw input_error("no cross-attention recorded (adapter mode self_only or none, or no layers)");

    Tensor accum;
    std::int64_t grid = 0;
    for (const AttentionRecord* rec : selected) {
        const auto& image_roles = want_text_query ? rec->key_roles : rec->query_roles;
        const auto& text_roles = want_text_query ? rec->query_roles : rec->key_roles;
        std::int64_t b = batch_index;
        if (b < 0 || b >= rec->weights.shape[0]) throw input_error("batch index out of range");
        std::int64_t text_pos = viz_detail::stream_position(text_roles[size_t(b)], object_token_index);
        std::vector<std::int64_t> patches = viz_detail::patch_positions(image_roles[size_t(b)]);
        std::int64_t m = std::int64_t(patches.size());
        std::int64_t g = std::int64_t(std::llround(std::sqrt(double(m))));
        if (g * g != m) throw input_error("patch count is not a square grid");
        if (accum.numel() == 0) {
            grid = g;
            accum = Tensor({g, g});
        } else if (g != grid) {
            throw input_error("inconsistent patch grids across attention records");
        }
        std::int64_t H = rec->weights.shape[1];
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t p = 0; p < m; ++p) {
                double w = want_text_query ? rec->weights.at(b, h, text_pos, patches[size_t(p)])
                                           : rec->weights.at(b, h, patches[size_t(p)], text_pos);
                accum[p] += w / double(H * std::int64_t(selected.size()));
            }
    }

    double lo = accum[0], hi = accum[0];
    for (double v : accum.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) {
        for (auto& v : accum.data) v = 0.5;  // degenerate range
    } else {
        for (auto& v : accum.data) v = (v - lo) / (hi - lo);
    }
    return accum;
}

// First token position of the class word in the tokenized prompt.
inline std::int64_t object_token_index_for_word(const Tokenizer& tokenizer, const std::string& prompt,
                                                const std::string& word) {
    auto words = Tokenizer::split_words(prompt);
    std::string target = to_lower(word);
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == target) return std::int64_t(i);
    throw input_error("class word '" + word + "' does not appear in the prompt '" + prompt + "'");
}

// Fixed warm colormap for overlays.
inline void heat_color(double v, double& r, double& g, double& b) {
    r = std::min(1.0, std::max(0.0, 1.5 - std::abs(4.0 * v - 3.0)));
    g = std::min(1.0, std::max(0.0, 1.5 - std::abs(4.0 * v - 2.0)));
    b = std::min(1.0, std::max(0.0, 1.5 - std::abs(4.0 * v - 1.0)));
}

// Bilinear upsample of a [grid_h, grid_w] map to the image dimensions.
inline Tensor upsample_map(const Tensor& map, std::int64_t out_h, std::int64_t out_w) {
    if (map.ndim() != 2) throw input_error("upsample_map: expected [grid_h, grid_w]");
    Tensor as_image({1, map.shape[0], map.shape[1]});
    as_image.data = map.data;
    Tensor up = bilinear_resize(as_image, out_h, out_w);
    Tensor out({out_h, out_w});
    out.data = std::move(up.data);
    return out;
}

// Blends the upsampled heatmap over the image with a fixed colormap and
// factor, then writes a raster file with the image's dimensions.
inline void render_overlay(const Tensor& map, const Tensor& image, const std::string& out_path,
                           double blend = 0.5) {
    if (image.ndim() != 3 || image.shape[0] != 3)
        throw input_error("render_overlay: expected image [3, H, W]");
    for (double v : map.data)
        if (v < -1e-9 || v > 1.0 + 1e-9)
            throw input_error("render_overlay: map must be normalized to [0, 1]");
    std::int64_t H = image.shape[1], W = image.shape[2];
    Tensor up = upsample_map(map, H, W);
    Tensor out({3, H, W});
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            double r, g, b;
            heat_color(up.at(y, x), r, g, b);
            out.at(0, y, x) = (1.0 - blend) * image.at(0, y, x) + blend * r;
            out.at(1, y, x) = (1.0 - blend) * image.at(1, y, x) + blend * g;
            out.at(2, y, x) = (1.0 - blend) * image.at(2, y, x) + blend * b;
        }
    write_ppm(out_path, out);
}

}  // namespace duet
