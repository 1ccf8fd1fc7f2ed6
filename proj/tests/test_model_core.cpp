#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <thread>

#include "duet/model.hpp"

using namespace duet;

namespace {

ModelConfig desk_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.patch_size = 16;
    cfg.image_size = 32;
    cfg.embed_dim_image = 32;
    cfg.embed_dim_text = 32;
    cfg.shared_dim = 16;
    cfg.prompt_depth = 2;
    cfg.prompt_length = 2;
    cfg.num_heads = 4;
    cfg.max_text_len = 12;
    return cfg;
}

Tensor random_images(std::int64_t b, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::uniform({b, cfg.num_channels, cfg.image_size, cfg.image_size}, rng);
}

double row_norm(const Tensor& t, std::int64_t r) {
    double s = 0.0;
    for (std::int64_t i = 0; i < t.shape[1]; ++i) s += t.at(r, i) * t.at(r, i);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("patch grid arithmetic", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 1);
    TokenSequence seq = model.patch_embed(random_images(2, cfg, 3));
    CHECK(seq.seq_len() == 5);  // 32/16 -> 2x2 patches + class token
    CHECK(seq.roles[0][0] == Role::cls);
    CHECK(seq.roles[0][4] == Role::patch);

    // ViT-B/16 geometry stays expressible
    ModelConfig vit = desk_config();
    vit.image_size = 224;
    vit.patch_size = 16;
    CHECK(vit.num_patches() == 196);
    DualEncoder big(vit, Tokenizer{}, 1);
    TokenSequence bseq = big.patch_embed(random_images(1, vit, 4));
    CHECK(bseq.seq_len() == 197);
}

TEST_CASE("zero image embeds to positional offsets plus bias", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 7);
    Tensor zero({1, cfg.num_channels, cfg.image_size, cfg.image_size});
    TokenSequence seq = model.patch_embed(zero);
    const Tensor& pos = model.params().get("image.pos_embed").val();
    const Tensor& bias = model.params().get("image.patch_embed.bias").val();
    for (std::int64_t m = 1; m < seq.seq_len(); ++m)
        for (std::int64_t d = 0; d < cfg.embed_dim_image; ++d)
            CHECK(seq.tokens.val().at(0, m, d) ==
                  Catch::Approx(pos.at(m, d) + bias[d]).margin(1e-15));
}

TEST_CASE("patch_embed dimension errors name the offending dimension", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 1);
    Rng rng(5);
    CHECK_THROWS_WITH(model.patch_embed(Tensor::uniform({1, 3, 16, 32}, rng)),
                      Catch::Matchers::ContainsSubstring("height"));
    CHECK_THROWS_WITH(model.patch_embed(Tensor::uniform({1, 3, 32, 16}, rng)),
                      Catch::Matchers::ContainsSubstring("width"));
    CHECK_THROWS_WITH(model.patch_embed(Tensor::uniform({1, 1, 32, 32}, rng)),
                      Catch::Matchers::ContainsSubstring("channel"));
}

TEST_CASE("encode_image outputs unit rows, identical rows for identical images", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 11);
    Tensor imgs = random_images(3, cfg, 13);
    // duplicate row 0 into row 2
    for (std::int64_t c = 0; c < cfg.num_channels; ++c)
        for (std::int64_t y = 0; y < cfg.image_size; ++y)
            for (std::int64_t x = 0; x < cfg.image_size; ++x)
                imgs.at(2, c, y, x) = imgs.at(0, c, y, x);

    EncodeResult res = model.encode_image(model.patch_embed(imgs));
    for (std::int64_t r = 0; r < 3; ++r)
        CHECK(std::abs(row_norm(res.embedding.val(), r) - 1.0) < 1e-6);
    for (std::int64_t d = 0; d < cfg.shared_dim; ++d)
        CHECK(res.embedding.val().at(0, d) == res.embedding.val().at(2, d));

    // per-layer self-attention records with row-stochastic weights
    CHECK(res.records.size() == size_t(cfg.num_layers));
    const Tensor& w = res.records[0].weights;
    for (std::int64_t b = 0; b < w.shape[0]; ++b)
        for (std::int64_t h = 0; h < w.shape[1]; ++h)
            for (std::int64_t q = 0; q < w.shape[2]; ++q) {
                double s = 0.0;
                for (std::int64_t k = 0; k < w.shape[3]; ++k) s += w.at(b, h, q, k);
                CHECK(std::abs(s - 1.0) < 1e-5);
            }
}

TEST_CASE("deep prompting replaces rather than accumulates", "[model]") {
    ModelConfig cfg = desk_config();
    cfg.num_layers = 3;
    cfg.prompt_depth = 2;  // prompted layers 0,1; layer 2 runs on the same length
    DualEncoder model(cfg, Tokenizer{}, 17);
    EncodeResult res = model.encode_image(model.patch_embed(random_images(2, cfg, 19)));

    std::int64_t expected = 1 + cfg.prompt_length + cfg.num_patches();
    CHECK(res.stream.seq_len() == expected);
    int prompt_count = 0;
    for (Role r : res.stream.roles[0]) prompt_count += (r == Role::prompt);
    CHECK(prompt_count == cfg.prompt_length);
    // attention key length is constant across all layers once prompts are in
    for (const auto& rec : res.records) CHECK(rec.weights.shape[3] == expected);
}

TEST_CASE("prompt-free model matches prompt_depth zero model", "[model]") {
    // prompts are created last, so equal seeds give identical backbones
    ModelConfig with = desk_config();
    ModelConfig none = desk_config();
    none.prompt_depth = 0;
    ModelConfig plength0 = desk_config();
    plength0.prompt_length = 0;

    DualEncoder m_with(with, Tokenizer{}, 23);
    DualEncoder m_none(none, Tokenizer{}, 23);
    DualEncoder m_p0(plength0, Tokenizer{}, 23);

    Tensor imgs = random_images(2, with, 29);
    Tensor u_with = m_with.encode_image(m_with.patch_embed(imgs)).embedding.val();
    Tensor u_none = m_none.encode_image(m_none.patch_embed(imgs)).embedding.val();
    Tensor u_p0 = m_p0.encode_image(m_p0.patch_embed(imgs)).embedding.val();

    CHECK(bit_equal(u_none, u_p0));   // zero-length prompts insert nothing
    CHECK(!bit_equal(u_with, u_none));  // prompting actually does something

    std::vector<std::string> texts{"a photo of a circle", "a photo of a square"};
    Tensor v_none = m_none.encode_text_strings(texts).embedding.val();
    Tensor v_p0 = m_p0.encode_text_strings(texts).embedding.val();
    CHECK(bit_equal(v_none, v_p0));
}

TEST_CASE("gradients flow into prompts", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 31);
    EncodeResult res = model.encode_image(model.patch_embed(random_images(2, cfg, 37)));
    ag::backward(ag::sum_all(res.embedding));
    const Tensor& g = model.prompts().image_prompts.grad();
    REQUIRE(g.numel() > 0);
    CHECK(g.max_abs() > 0.0);
}

TEST_CASE("tokenizer is deterministic with hashed fallback", "[model]") {
    Tokenizer tok;
    auto ids = tok.encode("a photo of a cat");
    auto again = tok.encode("A Photo, of a CAT!");
    REQUIRE(ids.size() == 6);  // five words + eot
    CHECK(ids == again);       // case and punctuation insensitive
    CHECK(ids.back() == Tokenizer::kEotId);
    CHECK(ids[0] == ids[3]);   // both "a"
    // "cat" is out of vocabulary: lands in a stable hash bucket
    CHECK(ids[4] >= 2 + std::int64_t(Tokenizer::default_vocab().size()));
    CHECK(ids[4] < tok.vocab_size());
}

TEST_CASE("encode_text contract", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 41);

    std::vector<std::string> texts{"a photo of a circle", "a photo of a square"};
    EncodeResult res = model.encode_text_strings(texts);
    for (std::int64_t r = 0; r < 2; ++r)
        CHECK(std::abs(row_norm(res.embedding.val(), r) - 1.0) < 1e-6);

    // rows that differ only after the end-of-text position encode identically
    Tokenizer tok = model.tokenizer();
    auto base = tok.encode("a photo of a circle");
    std::vector<std::int64_t> padded_a = base, padded_b = base;
    padded_a.resize(base.size() + 3, Tokenizer::kPadId);
    padded_b.resize(base.size() + 3, 5);  // garbage beyond eot
    Tensor va = model.encode_text({padded_a}).embedding.val();
    Tensor vb = model.encode_text({padded_b}).embedding.val();
    CHECK(bit_equal(va, vb));

    // out-of-vocabulary id reports the position
    std::vector<std::int64_t> bad = base;
    bad[1] = model.config().vocab_size + 10;
    CHECK_THROWS_WITH(model.encode_text({bad}), Catch::Matchers::ContainsSubstring("position 1"));

    // over-length input is rejected, not truncated
    std::vector<std::int64_t> longrow(size_t(cfg.max_text_len) + 1, 2);
    longrow.back() = Tokenizer::kEotId;
    CHECK_THROWS_WITH(model.encode_text({longrow}),
                      Catch::Matchers::ContainsSubstring("truncation is forbidden"));

    // missing end-of-text
    std::vector<std::int64_t> noeot(4, 2);
    CHECK_THROWS_WITH(model.encode_text({noeot}),
                      Catch::Matchers::ContainsSubstring("end-of-text"));
}

TEST_CASE("checkpoint round-trips bit-exactly", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 43);
    Checkpoint ckpt;
    ckpt.config_text = "[model]\nnum_layers = 2\n";
    ckpt.tensors = model.export_tensors();

    auto path = std::filesystem::temp_directory_path() / "duet_test_ckpt.bin";
    ckpt.save(path.string());
    Checkpoint loaded = Checkpoint::load(path.string());
    CHECK(loaded.config_text == ckpt.config_text);
    REQUIRE(loaded.tensors.size() == ckpt.tensors.size());
    for (const auto& [name, tensor] : ckpt.tensors) {
        REQUIRE(loaded.tensors.count(name) == 1);
        CHECK(bit_equal(loaded.tensors.at(name), tensor));
    }

    // load into a freshly built model: encodings match bit-for-bit
    DualEncoder other(cfg, Tokenizer{}, 999);
    other.import_tensors(loaded.tensors);
    Tensor imgs = random_images(2, cfg, 47);
    Tensor u1 = model.encode_image(model.patch_embed(imgs)).embedding.val();
    Tensor u2 = other.encode_image(other.patch_embed(imgs)).embedding.val();
    CHECK(bit_equal(u1, u2));
    std::filesystem::remove(path);
}

TEST_CASE("concurrent forward passes match serial results", "[model]") {
    ModelConfig cfg = desk_config();
    DualEncoder model(cfg, Tokenizer{}, 53);
    Tensor a = random_images(2, cfg, 59), b = random_images(2, cfg, 61);
    Tensor ua = model.encode_image(model.patch_embed(a)).embedding.val();
    Tensor ub = model.encode_image(model.patch_embed(b)).embedding.val();

    Tensor ca, cb;
    std::thread t1([&] { ca = model.encode_image(model.patch_embed(a)).embedding.val(); });
    std::thread t2([&] { cb = model.encode_image(model.patch_embed(b)).embedding.val(); });
    t1.join();
    t2.join();
    CHECK(bit_equal(ua, ca));
    CHECK(bit_equal(ub, cb));
}
