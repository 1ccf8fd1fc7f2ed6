#pragma once

#include <utility>
#include <vector>

#include "duet/model.hpp"

namespace duet {

struct AdaptResult {
    ag::Var u_adapted;  // [B, d_vl], unit rows
    ag::Var v_adapted;  // [B, d_vl], unit rows
    std::vector<AttentionRecord> records;
};

// ─── Multi-modal Cross-attention Adapter ─────────────────────────────────────
// Trainable blocks on top of the encoder token streams. Per layer and
// modality: self-attention, cross-attention against the other modality's
// post-self-attention state, and a bottleneck feed-forward, all residual.
// The mode lattice (none / self_only / self_plus_cross) gates which
// sub-blocks execute; parameters exist for all of them.

class McaAdapter {
  public:
    McaAdapter(DualEncoder& model, AdapterConfig cfg, std::uint64_t init_seed = 0)
        : model_(&model), cfg_(std::move(cfg)) {
        cfg_.depth = model.config().adapter_depth;
        cfg_.validate();
        Rng rng(derive_seed(init_seed, 0x61646170ull));  // "adap"
        const int dv = model.config().embed_dim_image;
        const int dt = model.config().embed_dim_text;
        nn::ParamStore& ps = model.params();
        for (int i = 0; i < cfg_.depth; ++i) {
            layers_.push_back(Layer{
                Side(ps, "adapter.image." + std::to_string(i), dv, dt, cfg_, rng),
                Side(ps, "adapter.text." + std::to_string(i), dt, dv, cfg_, rng),
            });
        }
    }

    const AdapterConfig& config() const { return cfg_; }
    int depth() const { return cfg_.depth; }

    // condition_image=false skips the image-side cross-attention sub-block, so
    // the image embedding is independent of the paired text (the
    // "unconditioned u" evaluation variant).
    AdaptResult adapt(const TokenSequence& image_tokens, const TokenSequence& text_tokens,
                      bool condition_image = true) const {
        if (image_tokens.batch() != text_tokens.batch())
            throw input_error("adapt: image batch " + std::to_string(image_tokens.batch()) +
                              " != text batch " + std::to_string(text_tokens.batch()));

        TokenSequence img = image_tokens;
        TokenSequence txt = text_tokens;
        std::vector<AttentionRecord> records;
        Tensor txt_mask = txt.key_mask();

        for (int li = 0; li < cfg_.depth; ++li) {
            const Layer& layer = layers_[size_t(li)];
            ag::Var img_s = img.tokens;
            ag::Var txt_s = txt.tokens;

            if (cfg_.mode != AdapterMode::none) {
                nn::AttentionOutput ia = layer.image.self_attn(layer.image.ln_self(img.tokens),
                                                               layer.image.ln_self(img.tokens));
                img_s = ag::add(img.tokens, ia.tokens);
                nn::AttentionOutput ta = layer.text.self_attn(layer.text.ln_self(txt.tokens),
                                                              layer.text.ln_self(txt.tokens), &txt_mask);
                txt_s = ag::add(txt.tokens, ta.tokens);
                records.push_back(make_record(li, std::move(ia.weights), Modality::image,
                                              Modality::image, img.roles, img.roles));
                records.push_back(make_record(li, std::move(ta.weights), Modality::text,
                                              Modality::text, txt.roles, txt.roles));
            }

            ag::Var img_c = img_s;
            ag::Var txt_c = txt_s;
            if (cfg_.mode == AdapterMode::self_plus_cross) {
                if (condition_image) {
                    nn::AttentionOutput ic =
                        layer.image.cross_attn(layer.image.ln_cross(img_s), txt_s, &txt_mask);
                    img_c = ag::add(img_s, ic.tokens);
                    records.push_back(make_record(li, std::move(ic.weights), Modality::image,
                                                  Modality::text, img.roles, txt.roles));
                }
                nn::AttentionOutput tc = layer.text.cross_attn(layer.text.ln_cross(txt_s), img_s);
                txt_c = ag::add(txt_s, tc.tokens);
                records.push_back(make_record(li, std::move(tc.weights), Modality::text,
                                              Modality::image, txt.roles, img.roles));
            }

            img.tokens = ag::add(img_c, layer.image.ffn(layer.image.ln_ffn(img_c)));
            txt.tokens = ag::add(txt_c, layer.text.ffn(layer.text.ln_ffn(txt_c)));
        }

        AdaptResult out;
        out.u_adapted = model_->project_stream(img);
        out.v_adapted = model_->project_stream(txt);
        out.records = std::move(records);
        return out;
    }

    // Evaluation-time pairing: one image batch against C candidate class
    // texts; runs adapt once per class.
    std::vector<std::pair<ag::Var, ag::Var>> adapt_pairwise_for_eval(
        const TokenSequence& image_tokens, const std::vector<TokenSequence>& class_text_tokens,
        bool condition_image = true) const {
        if (class_text_tokens.empty())
            throw input_error("adapt_pairwise_for_eval: no candidate classes");
        std::vector<std::pair<ag::Var, ag::Var>> out;
        out.reserve(class_text_tokens.size());
        for (const TokenSequence& cls : class_text_tokens) {
            TokenSequence broadcast = broadcast_to_batch(cls, image_tokens.batch());
            AdaptResult r = adapt(image_tokens, broadcast, condition_image);
            out.emplace_back(r.u_adapted, r.v_adapted);
        }
        return out;
    }

    static TokenSequence broadcast_to_batch(const TokenSequence& seq, std::int64_t batch) {
        if (seq.batch() == batch) return seq;
        if (seq.batch() != 1) throw input_error("cannot broadcast a multi-row sequence");
        TokenSequence out;
        std::int64_t S = seq.seq_len(), D = seq.tokens.shape()[2];
        out.tokens = ag::expand_batch(ag::reshape(seq.tokens, {S, D}), batch);
        out.roles.assign(size_t(batch), seq.roles[0]);
        out.modality = seq.modality;
        return out;
    }

  private:
    struct Side {
        nn::LayerNorm ln_self, ln_cross, ln_ffn;
        nn::MultiHeadAttention self_attn, cross_attn;
        nn::Linear down, up;

        Side(nn::ParamStore& ps, const std::string& prefix, int dim, int other_dim,
             const AdapterConfig& cfg, Rng& rng) {
            int bottleneck = cfg.bottleneck_dim > 0 ? cfg.bottleneck_dim : dim / 2;
            ln_self = nn::LayerNorm(ps, prefix + ".ln_self", dim);
            self_attn = nn::MultiHeadAttention(ps, prefix + ".self", dim, dim, cfg.num_heads, rng);
            ln_cross = nn::LayerNorm(ps, prefix + ".ln_cross", dim);
            cross_attn = nn::MultiHeadAttention(ps, prefix + ".cross", dim, other_dim, cfg.num_heads, rng);
            ln_ffn = nn::LayerNorm(ps, prefix + ".ln_ffn", dim);
            down = nn::Linear(ps, prefix + ".ffn.down", dim, bottleneck, rng);
            up = nn::Linear(ps, prefix + ".ffn.up", bottleneck, dim, rng);
        }

        ag::Var ffn(const ag::Var& x) const { return up(ag::gelu(down(x))); }
    };

    struct Layer {
        Side image;
        Side text;
    };

    static AttentionRecord make_record(int layer, Tensor weights, Modality qm, Modality km,
                                       const std::vector<std::vector<Role>>& qr,
                                       const std::vector<std::vector<Role>>& kr) {
        AttentionRecord rec;
        rec.layer_index = layer;
        rec.weights = std::move(weights);
        rec.query_modality = qm;
        rec.key_modality = km;
        rec.query_roles = qr;
        rec.key_roles = kr;
        return rec;
    }

    DualEncoder* model_;
    AdapterConfig cfg_;
    std::vector<Layer> layers_;
};

}  // namespace duet
