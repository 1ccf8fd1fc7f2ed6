#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "duet/config.hpp"
#include "duet/nn.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

enum class Role : std::uint8_t { cls, patch, word, prompt, pad, eot };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::cls: return "class";
        case Role::patch: return "patch";
        case Role::word: return "word";
        case Role::prompt: return "prompt";
        case Role::pad: return "pad";
        default: return "eot";
    }
}

// A batch of embedded tokens of one modality with per-position role tags.
struct TokenSequence {
    ag::Var tokens;  // [B, S, D]
    std::vector<std::vector<Role>> roles;  // [B][S]
    Modality modality = Modality::image;

    std::int64_t batch() const { return tokens.shape()[0]; }
    std::int64_t seq_len() const { return tokens.shape()[1]; }

    // 1 = usable as attention key, 0 = padding.
    Tensor key_mask() const {
        Tensor m({batch(), seq_len()});
        for (std::int64_t b = 0; b < batch(); ++b)
            for (std::int64_t s = 0; s < seq_len(); ++s)
                m.at(b, s) = roles[size_t(b)][size_t(s)] == Role::pad ? 0.0 : 1.0;
        return m;
    }

    // Per-row pooled position: the class token (image) or end-of-text (text).
    std::vector<std::int64_t> pool_indices() const {
        Role want = modality == Modality::image ? Role::cls : Role::eot;
        std::vector<std::int64_t> out(size_t(batch()), -1);
        for (std::int64_t b = 0; b < batch(); ++b) {
            for (std::int64_t s = 0; s < seq_len(); ++s)
                if (roles[size_t(b)][size_t(s)] == want) {
                    out[size_t(b)] = s;
                    break;
                }
            if (out[size_t(b)] < 0) throw input_error("token sequence lacks a pooling position");
        }
        return out;
    }
};

// Per-layer learnable prompt rows for both encoders.
struct PromptStack {
    ag::Var image_prompts;  // [depth, P, d_v]
    ag::Var text_prompts;   // [depth, P, d_t]
    bool trainable = true;

    int depth() const { return image_prompts.defined() ? int(image_prompts.shape()[0]) : 0; }
    int length() const { return image_prompts.defined() ? int(image_prompts.shape()[1]) : 0; }
};

struct AttentionRecord {
    int layer_index = 0;
    Tensor weights;  // [B, H, Sq, Sk]; rows sum to 1
    Modality query_modality = Modality::image;
    Modality key_modality = Modality::image;
    std::vector<std::vector<Role>> query_roles, key_roles;
};

struct EncodeResult {
    ag::Var embedding;     // [B, d_vl], unit rows
    TokenSequence stream;  // post-final-norm token stream handed to adapters
    std::vector<AttentionRecord> records;
};

// ─── Dual encoder ────────────────────────────────────────────────────────────
// Minimal transformer dual encoder: patch embedding + class token on the
// image side, word + positional embeddings on the text side, deep prompt
// replacement in both, projection heads into the shared space.

class DualEncoder {
  public:
    DualEncoder(const ModelConfig& cfg, Tokenizer tokenizer, std::uint64_t init_seed = 0)
        : cfg_(cfg), tokenizer_(std::move(tokenizer)) {
        cfg_.validate();
        if (cfg_.vocab_size == 0) cfg_.vocab_size = int(tokenizer_.vocab_size());
        if (cfg_.vocab_size < int(tokenizer_.vocab_size()))
            throw config_error("model.vocab_size smaller than tokenizer vocabulary");

        Rng rng(derive_seed(init_seed, 0x6d6f64656cull));  // "model"
        const int dv = cfg_.embed_dim_image, dt = cfg_.embed_dim_text;
        const int M = cfg_.num_patches();
        const int flat = cfg_.num_channels * cfg_.patch_size * cfg_.patch_size;

        patch_embed_ = nn::Linear(store_, "image.patch_embed", flat, dv, rng);
        class_token_ = store_.create("image.class_token", Tensor::randn({dv}, rng, 0.02));
        pos_image_ = store_.create("image.pos_embed", Tensor::randn({M + 1, dv}, rng, 0.02));
        for (int i = 0; i < cfg_.num_layers; ++i)
            image_blocks_.emplace_back(store_, "image.blocks." + std::to_string(i), dv,
                                       cfg_.num_heads, rng);
        image_ln_final_ = nn::LayerNorm(store_, "image.ln_final", dv);
        image_proj_ = store_.create("image.proj",
                                    Tensor::randn({dv, cfg_.shared_dim}, rng, 1.0 / std::sqrt(double(dv))));

        token_embed_ = store_.create("text.token_embed",
                                     Tensor::randn({cfg_.vocab_size, dt}, rng, 0.02));
        pos_text_ = store_.create("text.pos_embed", Tensor::randn({cfg_.max_text_len, dt}, rng, 0.02));
        for (int i = 0; i < cfg_.num_layers; ++i)
            text_blocks_.emplace_back(store_, "text.blocks." + std::to_string(i), dt, cfg_.num_heads,
                                      rng);
        text_ln_final_ = nn::LayerNorm(store_, "text.ln_final", dt);
        text_proj_ = store_.create("text.proj",
                                   Tensor::randn({dt, cfg_.shared_dim}, rng, 1.0 / std::sqrt(double(dt))));

        if (cfg_.prompt_depth > 0 && cfg_.prompt_length > 0) {
            prompts_.image_prompts = store_.create(
                "prompts.image", Tensor::randn({cfg_.prompt_depth, cfg_.prompt_length, dv}, rng, 0.02));
            prompts_.text_prompts = store_.create(
                "prompts.text", Tensor::randn({cfg_.prompt_depth, cfg_.prompt_length, dt}, rng, 0.02));
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    PromptStack& prompts() { return prompts_; }
    const ag::Var& image_projection() const { return image_proj_; }
    const ag::Var& text_projection() const { return text_proj_; }

    // Splits the image into patches and applies the learned linear map plus
    // positional offsets; prepends the class token.
    TokenSequence patch_embed(const Tensor& images) const {
        if (images.ndim() != 4)
            throw config_error("patch_embed: expected [batch, channels, height, width]");
        std::int64_t B = images.shape[0], C = images.shape[1], H = images.shape[2], W = images.shape[3];
        if (C != cfg_.num_channels)
            throw config_error("patch_embed: channel count " + std::to_string(C) + " != configured " +
                               std::to_string(cfg_.num_channels));
        if (H != cfg_.image_size)
            throw config_error("patch_embed: height " + std::to_string(H) + " != configured image_size " +
                               std::to_string(cfg_.image_size));
        if (W != cfg_.image_size)
            throw config_error("patch_embed: width " + std::to_string(W) + " != configured image_size " +
                               std::to_string(cfg_.image_size));

        const std::int64_t p = cfg_.patch_size;
        const std::int64_t grid = cfg_.image_size / p;
        const std::int64_t M = grid * grid;
        const std::int64_t flat = C * p * p;
        Tensor patches({B, M, flat});
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t gy = 0; gy < grid; ++gy)
                for (std::int64_t gx = 0; gx < grid; ++gx) {
                    std::int64_t m = gy * grid + gx;
                    std::int64_t o = 0;
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t y = 0; y < p; ++y)
                            for (std::int64_t x = 0; x < p; ++x)
                                patches.at(b, m, o++) = images.at(b, c, gy * p + y, gx * p + x);
                }

        ag::Var patch_tokens = patch_embed_(ag::constant(std::move(patches)));  // [B,M,dv]
        ag::Var cls = ag::expand_batch(ag::reshape(class_token_, {1, cfg_.embed_dim_image}), B);
        ag::Var seq = ag::add(ag::concat({cls, patch_tokens}, 1), pos_image_);

        TokenSequence out;
        out.tokens = seq;
        out.modality = Modality::image;
        std::vector<Role> roles(size_t(M) + 1, Role::patch);
        roles[0] = Role::cls;
        out.roles.assign(size_t(B), roles);
        return out;
    }

    EncodeResult encode_image(const TokenSequence& seq) const {
        if (seq.modality != Modality::image) throw input_error("encode_image: not an image sequence");
        return encode_stream(seq, image_blocks_, image_ln_final_, image_proj_,
                             prompts_.image_prompts, /*prompt_at=*/1, nullptr);
    }

    // token_ids[b] must contain an end-of-text id; everything after the first
    // one is treated as padding. Over-length input is an error (no silent
    // truncation).
    EncodeResult encode_text(const std::vector<std::vector<std::int64_t>>& token_ids) const {
        std::int64_t B = std::int64_t(token_ids.size());
        if (B == 0) throw input_error("encode_text: empty batch");
        std::int64_t L = std::int64_t(token_ids[0].size());
        for (const auto& row : token_ids)
            if (std::int64_t(row.size()) != L) throw input_error("encode_text: ragged batch");
        if (L > cfg_.max_text_len)
            throw input_error("encode_text: sequence length " + std::to_string(L) +
                              " exceeds max_text_len " + std::to_string(cfg_.max_text_len) +
                              " (truncation is forbidden)");

        std::vector<std::vector<std::int64_t>> ids(token_ids.begin(), token_ids.end());
        std::vector<std::vector<Role>> roles(size_t(B), std::vector<Role>(size_t(L), Role::word));
        for (std::int64_t b = 0; b < B; ++b) {
            std::int64_t eot = -1;
            for (std::int64_t j = 0; j < L; ++j) {
                std::int64_t id = ids[size_t(b)][size_t(j)];
                if (id == Tokenizer::kEotId) {
                    eot = j;
                    roles[size_t(b)][size_t(j)] = Role::eot;
                    break;
                }
                if (id < 0 || id >= cfg_.vocab_size)
                    throw input_error("encode_text: id " + std::to_string(id) + " at row " +
                                      std::to_string(b) + " position " + std::to_string(j) +
                                      " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
            }
            if (eot < 0) throw input_error("encode_text: row " + std::to_string(b) +
                                           " lacks an end-of-text token");
            for (std::int64_t j = eot + 1; j < L; ++j) {
                ids[size_t(b)][size_t(j)] = Tokenizer::kPadId;
                roles[size_t(b)][size_t(j)] = Role::pad;
            }
        }

        ag::Var emb = ag::embedding(token_embed_, ids);  // [B,L,dt]
        ag::Var pos = ag::slice(pos_text_, 0, 0, L);
        TokenSequence seq;
        seq.tokens = ag::add(emb, pos);
        seq.roles = std::move(roles);
        seq.modality = Modality::text;

        Tensor mask = seq.key_mask();
        return encode_stream(seq, text_blocks_, text_ln_final_, text_proj_, prompts_.text_prompts,
                             /*prompt_at=*/0, &mask);
    }

    // Tokenize, right-pad to a common length and encode.
    EncodeResult encode_text_strings(const std::vector<std::string>& texts) const {
        std::vector<std::vector<std::int64_t>> ids;
        size_t longest = 0;
        for (const auto& t : texts) {
            ids.push_back(tokenizer_.encode(t));
            longest = std::max(longest, ids.back().size());
        }
        for (auto& row : ids) row.resize(longest, Tokenizer::kPadId);
        return encode_text(ids);
    }

    // Pool + project + normalize a (possibly adapter-transformed) stream with
    // this encoder's projection head.
    ag::Var project_stream(const TokenSequence& stream) const {
        const ag::Var& proj = stream.modality == Modality::image ? image_proj_ : text_proj_;
        ag::Var pooled = ag::gather_dim1(stream.tokens, stream.pool_indices());
        return ag::l2_normalize(ag::matmul(pooled, proj));
    }

    // ─── Checkpoint I/O ──────────────────────────────────────────────────────

    std::map<std::string, Tensor> export_tensors() const {
        std::map<std::string, Tensor> out;
        for (const auto& name : store_.names()) out.emplace(name, store_.get(name).val());
        return out;
    }

    void import_tensors(const std::map<std::string, Tensor>& tensors) {
        for (const auto& name : store_.names()) {
            auto it = tensors.find(name);
            if (it == tensors.end()) throw io_error("checkpoint missing parameter: " + name);
            if (it->second.shape != store_.get(name).val().shape)
                throw io_error("checkpoint shape mismatch for parameter: " + name);
            store_.get(name).mutable_val() = it->second;
        }
    }

  private:
    EncodeResult encode_stream(const TokenSequence& input,
                               const std::vector<nn::TransformerBlock>& blocks,
                               const nn::LayerNorm& ln_final, const ag::Var& proj,
                               const ag::Var& prompt_rows, std::int64_t prompt_at,
                               const Tensor* base_mask) const {
        std::int64_t B = input.batch();
        const int P = prompts_.length();
        const int depth = prompts_.depth();
        bool prompting = depth > 0 && P > 0;

        ag::Var x = input.tokens;
        std::vector<std::vector<Role>> roles = input.roles;
        Tensor mask;
        bool have_mask = base_mask != nullptr;
        if (have_mask) mask = *base_mask;

        auto prompt_layer = [&](int layer) {
            ag::Var rows = ag::slice(prompt_rows, 0, layer, 1);  // [1,P,d]
            std::int64_t d = rows.shape()[2];
            ag::Var batch_rows = ag::expand_batch(ag::reshape(rows, {std::int64_t(P), d}), B);
            std::vector<ag::Var> parts;
            std::int64_t S = x.shape()[1];
            bool inserted = std::int64_t(roles[0].size()) > input.roles[0].size() ? true : false;
            std::int64_t tail_start = inserted ? prompt_at + P : prompt_at;
            if (prompt_at > 0) parts.push_back(ag::slice(x, 1, 0, prompt_at));
            parts.push_back(batch_rows);
            parts.push_back(ag::slice(x, 1, tail_start, S - tail_start));
            x = ag::concat(parts, 1);
            if (!inserted) {
                for (auto& r : roles)
                    r.insert(r.begin() + prompt_at, size_t(P), Role::prompt);
                if (have_mask) {
                    Tensor m2({B, std::int64_t(roles[0].size())});
                    for (std::int64_t b = 0; b < B; ++b) {
                        for (std::int64_t s = 0; s < prompt_at; ++s) m2.at(b, s) = mask.at(b, s);
                        for (std::int64_t s = 0; s < P; ++s) m2.at(b, prompt_at + s) = 1.0;
                        for (std::int64_t s = prompt_at; s < S; ++s) m2.at(b, s + P) = mask.at(b, s);
                    }
                    mask = std::move(m2);
                }
            }
        };

        std::vector<AttentionRecord> records;
        for (int layer = 0; layer < int(blocks.size()); ++layer) {
            if (prompting && layer < depth) prompt_layer(layer);
            if (!x.val().all_finite())
                throw numeric_error("non-finite activations entering encoder layer " +
                                    std::to_string(layer), layer);
            nn::AttentionOutput out = blocks[size_t(layer)](x, have_mask ? &mask : nullptr);
            x = out.tokens;
            if (!x.val().all_finite())
                throw numeric_error("non-finite activations in encoder layer " + std::to_string(layer),
                                    layer);
            AttentionRecord rec;
            rec.layer_index = layer;
            rec.weights = std::move(out.weights);
            rec.query_modality = rec.key_modality = input.modality;
            rec.query_roles = rec.key_roles = roles;
            records.push_back(std::move(rec));
        }

        TokenSequence stream;
        stream.tokens = ln_final(x);
        stream.roles = std::move(roles);
        stream.modality = input.modality;

        ag::Var pooled = ag::gather_dim1(stream.tokens, stream.pool_indices());
        ag::Var embedding = ag::l2_normalize(ag::matmul(pooled, proj));
        return {embedding, std::move(stream), std::move(records)};
    }

    ModelConfig cfg_;
    Tokenizer tokenizer_;
    nn::ParamStore store_;

    nn::Linear patch_embed_;
    ag::Var class_token_, pos_image_;
    std::vector<nn::TransformerBlock> image_blocks_;
    nn::LayerNorm image_ln_final_;
    ag::Var image_proj_;

    ag::Var token_embed_, pos_text_;
    std::vector<nn::TransformerBlock> text_blocks_;
    nn::LayerNorm text_ln_final_;
    ag::Var text_proj_;

    PromptStack prompts_;
};

// ─── Checkpoint container ────────────────────────────────────────────────────
// Single binary archive: config text + named tensors. Round-trips bit-exactly.

struct Checkpoint {
    std::string config_text;
    std::map<std::string, Tensor> tensors;

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw io_error("cannot open checkpoint for writing: " + path);
        const char magic[8] = {'D', 'U', 'E', 'T', 'C', 'K', 'P', '1'};
        os.write(magic, 8);
        std::int64_t cfg_len = std::int64_t(config_text.size());
        os.write(reinterpret_cast<const char*>(&cfg_len), sizeof(cfg_len));
        os.write(config_text.data(), cfg_len);
        std::int64_t count = std::int64_t(tensors.size());
        os.write(reinterpret_cast<const char*>(&count), sizeof(count));
        for (const auto& [name, tensor] : tensors) {
            std::int64_t name_len = std::int64_t(name.size());
            os.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
            os.write(name.data(), name_len);
            tensor.write(os);
        }
        if (!os) throw io_error("failed writing checkpoint: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw io_error("cannot open checkpoint: " + path);
        char magic[8];
        is.read(magic, 8);
        if (!is || std::string(magic, 8) != "DUETCKP1")
            throw io_error("not a checkpoint file: " + path);
        Checkpoint ckpt;
        std::int64_t cfg_len = 0;
        is.read(reinterpret_cast<char*>(&cfg_len), sizeof(cfg_len));
        if (!is || cfg_len < 0) throw io_error("corrupt checkpoint header: " + path);
        ckpt.config_text.resize(size_t(cfg_len));
        is.read(ckpt.config_text.data(), cfg_len);
        std::int64_t count = 0;
        is.read(reinterpret_cast<char*>(&count), sizeof(count));
        for (std::int64_t i = 0; i < count; ++i) {
            std::int64_t name_len = 0;
            is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
            if (!is || name_len < 0 || name_len > 4096) throw io_error("corrupt checkpoint entry");
            std::string name(size_t(name_len), '\0');
            is.read(name.data(), name_len);
            ckpt.tensors.emplace(std::move(name), Tensor::read(is));
        }
        return ckpt;
    }
};

}  // namespace duet
