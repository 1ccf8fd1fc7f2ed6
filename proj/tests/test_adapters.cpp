#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "duet/adapter.hpp"

using namespace duet;

namespace {

ModelConfig adapter_test_config(int adapter_depth = 1) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.patch_size = 16;
    cfg.image_size = 32;
    cfg.embed_dim_image = 32;
    cfg.embed_dim_text = 32;
    cfg.shared_dim = 16;
    cfg.prompt_depth = 1;
    cfg.prompt_length = 2;
    cfg.num_heads = 4;
    cfg.max_text_len = 12;
    cfg.adapter_depth = adapter_depth;
    return cfg;
}

struct Fixture {
    DualEncoder model;
    McaAdapter adapter;
    Fixture(int depth, AdapterMode mode, std::uint64_t seed = 7)
        : model(adapter_test_config(depth), Tokenizer{}, seed),
          adapter(model, make_adapter_cfg(mode), seed) {}

    static AdapterConfig make_adapter_cfg(AdapterMode mode) {
        AdapterConfig a;
        a.mode = mode;
        a.num_heads = 4;
        return a;
    }

    TokenSequence image_stream(std::uint64_t seed, std::int64_t batch = 2) {
        Rng rng(seed);
        Tensor imgs = Tensor::uniform({batch, 3, 32, 32}, rng);
        return model.encode_image(model.patch_embed(imgs)).stream;
    }

    TokenSequence text_stream(const std::vector<std::string>& texts) {
        return model.encode_text_strings(texts).stream;
    }
};

double max_abs_row_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("depth zero is the identity on pooled projections", "[adapters]") {
    Fixture fx(0, AdapterMode::self_plus_cross);
    TokenSequence img = fx.image_stream(11);
    TokenSequence txt = fx.text_stream({"a photo of a circle", "a photo of a square"});
    AdaptResult r = fx.adapter.adapt(img, txt);
    CHECK(r.records.empty());
    CHECK(bit_equal(r.u_adapted.val(), fx.model.project_stream(img).val()));
    CHECK(bit_equal(r.v_adapted.val(), fx.model.project_stream(txt).val()));
}

TEST_CASE("mode lattice gates which sub-blocks execute", "[adapters]") {
    TokenSequence img, txt;
    Tensor u_none, u_self, u_cross;
    {
        Fixture fx(2, AdapterMode::none);
        img = fx.image_stream(13);
        txt = fx.text_stream({"a photo of a circle", "a photo of a square"});
        AdaptResult r = fx.adapter.adapt(img, txt);
        CHECK(r.records.empty());  // no attention at all, FFN only
        u_none = r.u_adapted.val();
    }
    {
        Fixture fx(2, AdapterMode::self_only);
        AdaptResult r = fx.adapter.adapt(fx.image_stream(13),
                                         fx.text_stream({"a photo of a circle", "a photo of a square"}));
        for (const auto& rec : r.records) CHECK(rec.query_modality == rec.key_modality);
        CHECK(r.records.size() == 4);  // self attention per modality per layer
        u_self = r.u_adapted.val();
    }
    {
        Fixture fx(2, AdapterMode::self_plus_cross);
        AdaptResult r = fx.adapter.adapt(fx.image_stream(13),
                                         fx.text_stream({"a photo of a circle", "a photo of a square"}));
        int cross = 0;
        for (const auto& rec : r.records) cross += (rec.query_modality != rec.key_modality);
        CHECK(cross == 4);  // both directions per layer
        CHECK(r.records.size() == 8);
        u_cross = r.u_adapted.val();

        // attention rows are stochastic
        for (const auto& rec : r.records)
            for (std::int64_t b = 0; b < rec.weights.shape[0]; ++b)
                for (std::int64_t h = 0; h < rec.weights.shape[1]; ++h)
                    for (std::int64_t q = 0; q < rec.weights.shape[2]; ++q) {
                        double s = 0.0;
                        for (std::int64_t k = 0; k < rec.weights.shape[3]; ++k)
                            s += rec.weights.at(b, h, q, k);
                        CHECK(std::abs(s - 1.0) < 1e-5);
                    }
    }
    // the three modes genuinely produce different embeddings
    CHECK(!bit_equal(u_none, u_self));
    CHECK(!bit_equal(u_self, u_cross));
}

TEST_CASE("identical text keys give uniform cross-attention rows", "[adapters]") {
    Fixture fx(1, AdapterMode::self_plus_cross);
    TokenSequence img = fx.image_stream(17);

    // hand-built text stream whose positions all carry the same vector
    std::int64_t S = 5, D = 32;
    Tensor flat({S, D});
    Rng rng(19);
    Tensor one_row = Tensor::randn({D}, rng);
    for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t d = 0; d < D; ++d) flat.at(s, d) = one_row[d];
    TokenSequence txt;
    txt.tokens = ag::expand_batch(ag::constant(flat), 2);
    txt.modality = Modality::text;
    std::vector<Role> roles(size_t(S), Role::word);
    roles.back() = Role::eot;
    txt.roles.assign(2, roles);

    AdaptResult r = fx.adapter.adapt(img, txt);
    bool saw_cross = false;
    for (const auto& rec : r.records) {
        if (rec.query_modality != Modality::image || rec.key_modality != Modality::text) continue;
        saw_cross = true;
        for (std::int64_t b = 0; b < rec.weights.shape[0]; ++b)
            for (std::int64_t h = 0; h < rec.weights.shape[1]; ++h)
                for (std::int64_t q = 0; q < rec.weights.shape[2]; ++q)
                    for (std::int64_t k = 0; k < S; ++k)
                        CHECK(rec.weights.at(b, h, q, k) ==
                              Catch::Approx(1.0 / double(S)).margin(1e-12));
    }
    CHECK(saw_cross);
}

TEST_CASE("permuting text keys permutes attention columns and preserves outputs", "[adapters]") {
    Fixture fx(1, AdapterMode::self_plus_cross);
    TokenSequence img = fx.image_stream(23, 1);
    TokenSequence txt = fx.text_stream({"a photo of a circle"});

    std::int64_t S = txt.seq_len(), D = txt.tokens.shape()[2];
    std::vector<std::int64_t> perm(static_cast<size_t>(S));
    for (std::int64_t i = 0; i < S; ++i) perm[size_t(i)] = (i + 3) % S;

    Tensor permuted({1, S, D});
    std::vector<Role> proles(static_cast<size_t>(S));
    for (std::int64_t s = 0; s < S; ++s) {
        for (std::int64_t d = 0; d < D; ++d)
            permuted.at(0, s, d) = txt.tokens.val().at(0, perm[size_t(s)], d);
        proles[size_t(s)] = txt.roles[0][size_t(perm[size_t(s)])];
    }
    TokenSequence txt_perm;
    txt_perm.tokens = ag::constant(permuted);
    txt_perm.roles.assign(1, proles);
    txt_perm.modality = Modality::text;

    TokenSequence txt_plain;
    txt_plain.tokens = ag::constant(txt.tokens.val());
    txt_plain.roles = txt.roles;
    txt_plain.modality = Modality::text;

    AdaptResult base = fx.adapter.adapt(img, txt_plain);
    AdaptResult perm_r = fx.adapter.adapt(img, txt_perm);

    CHECK(max_abs_row_diff(base.u_adapted.val(), perm_r.u_adapted.val()) < 1e-9);
    CHECK(max_abs_row_diff(base.v_adapted.val(), perm_r.v_adapted.val()) < 1e-9);

    // image-query cross-attention columns follow the permutation
    const AttentionRecord* rec_base = nullptr;
    const AttentionRecord* rec_perm = nullptr;
    for (const auto& rec : base.records)
        if (rec.query_modality == Modality::image && rec.key_modality == Modality::text)
            rec_base = &rec;
    for (const auto& rec : perm_r.records)
        if (rec.query_modality == Modality::image && rec.key_modality == Modality::text)
            rec_perm = &rec;
    REQUIRE(rec_base);
    REQUIRE(rec_perm);
    for (std::int64_t h = 0; h < rec_base->weights.shape[1]; ++h)
        for (std::int64_t q = 0; q < rec_base->weights.shape[2]; ++q)
            for (std::int64_t s = 0; s < S; ++s)
                CHECK(rec_perm->weights.at(0, h, q, s) ==
                      Catch::Approx(rec_base->weights.at(0, h, q, perm[size_t(s)])).margin(1e-9));
}

TEST_CASE("pairwise evaluation wiring", "[adapters]") {
    Fixture fx(1, AdapterMode::self_plus_cross);
    TokenSequence img = fx.image_stream(29);
    TokenSequence circle = fx.text_stream({"a photo of a circle"});
    TokenSequence square = fx.text_stream({"a photo of a square"});

    CHECK_THROWS_AS(fx.adapter.adapt_pairwise_for_eval(img, {}), input_error);

    // C = 1 equals a single adapt call on the broadcast text
    auto single = fx.adapter.adapt_pairwise_for_eval(img, {circle});
    AdaptResult direct = fx.adapter.adapt(img, McaAdapter::broadcast_to_batch(circle, img.batch()));
    CHECK(bit_equal(single[0].first.val(), direct.u_adapted.val()));
    CHECK(bit_equal(single[0].second.val(), direct.v_adapted.val()));

    // duplicated class text gives identical pairs
    auto dup = fx.adapter.adapt_pairwise_for_eval(img, {circle, square, circle});
    CHECK(bit_equal(dup[0].first.val(), dup[2].first.val()));
    CHECK(bit_equal(dup[0].second.val(), dup[2].second.val()));
    CHECK(!bit_equal(dup[0].second.val(), dup[1].second.val()));

    // unconditioned image path: u no longer depends on the class text
    auto uncond = fx.adapter.adapt_pairwise_for_eval(img, {circle, square}, false);
    CHECK(bit_equal(uncond[0].first.val(), uncond[1].first.val()));
}

TEST_CASE("depth zero pairwise gives class-independent image embeddings", "[adapters]") {
    Fixture fx(0, AdapterMode::self_plus_cross);
    TokenSequence img = fx.image_stream(31);
    auto pairs = fx.adapter.adapt_pairwise_for_eval(
        img, {fx.text_stream({"a photo of a circle"}), fx.text_stream({"a photo of a square"})});
    CHECK(bit_equal(pairs[0].first.val(), pairs[1].first.val()));
}

TEST_CASE("batch mismatch is rejected", "[adapters]") {
    Fixture fx(1, AdapterMode::self_plus_cross);
    TokenSequence img = fx.image_stream(37, 2);
    TokenSequence txt = fx.text_stream({"a photo of a circle", "a photo of a square",
                                        "a photo of a triangle"});
    CHECK_THROWS_AS(fx.adapter.adapt(img, txt), input_error);
}

TEST_CASE("gradients reach adapter parameters", "[adapters]") {
    Fixture fx(1, AdapterMode::self_plus_cross);
    AdaptResult r = fx.adapter.adapt(fx.image_stream(41),
                                     fx.text_stream({"a photo of a circle", "a photo of a square"}));
    ag::backward(ag::sum_all(ag::add(r.u_adapted, r.v_adapted)));
    const Tensor& g = fx.model.params().get("adapter.image.0.cross.wq.weight").grad();
    REQUIRE(g.numel() > 0);
    CHECK(g.max_abs() > 0.0);
}
