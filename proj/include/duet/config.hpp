#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "duet/common.hpp"

namespace duet {

// ─── Model / adapter / run configuration ─────────────────────────────────────
// Desk-scale defaults; paper-scale values (12 layers, ViT-B/16 geometry)
// remain expressible through the same fields.

struct ModelConfig {
    int num_layers = 4;       // transformer depth K, shared by both encoders
    int patch_size = 8;
    int image_size = 32;
    int num_channels = 3;
    int embed_dim_image = 64;  // d_v
    int embed_dim_text = 64;
    int shared_dim = 64;       // d_vl, the joint latent space
    int prompt_depth = 4;      // layers receiving fresh prompt rows
    int prompt_length = 2;     // P
    int num_heads = 4;
    int vocab_size = 0;        // 0 = derived from the tokenizer
    int max_text_len = 16;
    double temperature = 0.1;              // tau
    double consistency_temperature = 0.1;  // tau_con. Stand-in default; pin explicitly in runs.
    double alpha = 2.0;
    double beta = 1.0;  // stand-in default; pin explicitly in runs
    int adapter_depth = 2;

    int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v <= 0) throw config_error(std::string("model.") + name + " must be positive");
        };
        positive(num_layers, "num_layers");
        positive(patch_size, "patch_size");
        positive(image_size, "image_size");
        positive(num_channels, "num_channels");
        positive(embed_dim_image, "embed_dim_image");
        positive(embed_dim_text, "embed_dim_text");
        positive(shared_dim, "shared_dim");
        positive(num_heads, "num_heads");
        positive(max_text_len, "max_text_len");
        if (image_size % patch_size != 0)
            throw config_error("model.image_size (" + std::to_string(image_size) +
                               ") not divisible by model.patch_size (" + std::to_string(patch_size) + ")");
        if (prompt_depth < 0 || prompt_depth > num_layers)
            throw config_error("model.prompt_depth must lie in [0, num_layers]");
        if (prompt_length < 0) throw config_error("model.prompt_length must be nonnegative");
        if (embed_dim_image % num_heads != 0 || embed_dim_text % num_heads != 0)
            throw config_error("embedding dims must be divisible by model.num_heads");
        if (temperature <= 0.0) throw config_error("model.temperature must be positive");
        if (consistency_temperature <= 0.0)
            throw config_error("model.consistency_temperature must be positive");
        if (alpha < 0.0) throw config_error("model.alpha must be nonnegative");
        if (beta < 0.0) throw config_error("model.beta must be nonnegative");
        if (adapter_depth < 0) throw config_error("model.adapter_depth must be nonnegative");
    }
};

enum class AdapterMode { none, self_only, self_plus_cross };
enum class BranchId { original, augmented };

struct AdapterConfig {
    int depth = 2;  // wired from ModelConfig.adapter_depth
    int num_heads = 4;
    int bottleneck_dim = 0;  // 0 = embed_dim / 2
    AdapterMode mode = AdapterMode::self_plus_cross;
    BranchId attach_image_branch = BranchId::original;
    BranchId attach_text_branch = BranchId::original;
    bool all_branches = false;  // four-branch variant: adapt original and augmented pairs

    void validate() const {
        if (depth < 0) throw config_error("adapter depth must be nonnegative");
        if (num_heads <= 0) throw config_error("adapter.num_heads must be positive");
        if (bottleneck_dim < 0) throw config_error("adapter.bottleneck_dim must be nonnegative");
    }
};

struct TrainConfig {
    int epochs = 10;
    double learning_rate = 0.004;
    std::string optimizer = "sgd";
    double momentum = 0.9;
    int batch_size = 8;
    std::uint64_t seed = 0;
    bool freeze_backbone = true;
    bool single_alpha = false;
    int max_steps = 0;  // 0 = run all epochs
    int checkpoint_every = 1;

    void validate() const {
        if (epochs < 1) throw config_error("train.epochs must be >= 1");
        if (learning_rate < 0.0) throw config_error("train.learning_rate must be nonnegative");
        if (optimizer != "sgd") throw config_error("train.optimizer: only 'sgd' is supported");
        if (batch_size < 2) throw config_error("train.batch_size must be >= 2");
        if (max_steps < 0) throw config_error("train.max_steps must be nonnegative");
        if (checkpoint_every < 1) throw config_error("train.checkpoint_every must be >= 1");
    }
};

enum class TextAugKind { llm_remote, eda_local };
enum class ImageAugKind { diffusion_remote, standard_local };

struct AugmentConfig {
    TextAugKind text_kind = TextAugKind::eda_local;
    ImageAugKind image_kind = ImageAugKind::standard_local;
    std::string endpoint;  // empty = offline (cache or local only)
    std::string cache_dir;
    int pool_size = 1;  // distinct remote samples per class per epoch cycle
    int timeout_seconds = 30;

    void validate() const {
        if (pool_size < 1) throw config_error("augment.pool_size must be >= 1");
        if (timeout_seconds < 1) throw config_error("augment.timeout_seconds must be >= 1");
    }
};

enum class SplitRole { base_to_novel, cross_dataset, domain_shift };

struct DataConfig {
    std::string manifest;
    int shots = 16;
    std::uint64_t split_seed = 0;
    SplitRole split_role = SplitRole::base_to_novel;
    std::vector<std::string> targets;  // transfer-eval target manifests
    std::string vocab_file;

    void validate() const {
        if (shots < 1) throw config_error("data.shots must be >= 1");
    }
};

enum class AttentionDirection { text_to_image, image_to_text };

struct EvalConfig {
    bool conditioned = true;   // pairwise class-conditioned image embeddings
    bool joint_space = false;  // novel eval against the joint label space
    std::string baseline;      // optional baseline results file for delta rows
    AttentionDirection attention_direction = AttentionDirection::text_to_image;
    bool per_layer_maps = false;
};

struct RunConfig {
    ModelConfig model;
    AdapterConfig adapter;
    TrainConfig train;
    AugmentConfig augment;
    DataConfig data;
    EvalConfig eval;
    std::set<std::string> explicit_keys;  // "section.key" entries that were set

    void validate() const {
        model.validate();
        AdapterConfig wired = adapter;
        wired.depth = model.adapter_depth;
        wired.validate();
        train.validate();
        augment.validate();
        data.validate();
    }

    // The spec-mandated fields every experiment must pin explicitly.
    void validate_mandatory() const {
        for (const char* key : {"model.beta", "model.consistency_temperature", "train.batch_size"})
            if (!explicit_keys.count(key))
                throw config_error(std::string("missing mandatory config field '") + key + "'");
    }
};

// ─── key=value config files with [section] headers ──────────────────────────

namespace config_detail {

inline const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "model.num_layers", "model.patch_size", "model.image_size", "model.num_channels",
        "model.embed_dim_image", "model.embed_dim_text", "model.shared_dim", "model.prompt_depth",
        "model.prompt_length", "model.num_heads", "model.vocab_size", "model.max_text_len",
        "model.temperature", "model.consistency_temperature", "model.alpha", "model.beta",
        "model.adapter_depth",
        "adapter.num_heads", "adapter.bottleneck_dim", "adapter.mode",
        "adapter.attach_image_branch", "adapter.attach_text_branch", "adapter.all_branches",
        "train.epochs", "train.learning_rate", "train.optimizer", "train.momentum",
        "train.batch_size", "train.seed", "train.freeze_backbone", "train.single_alpha",
        "train.max_steps", "train.checkpoint_every",
        "augment.text_kind", "augment.image_kind", "augment.endpoint", "augment.cache_dir",
        "augment.pool_size", "augment.timeout_seconds",
        "data.manifest", "data.shots", "data.split_seed", "data.split_role", "data.targets",
        "data.vocab_file",
        "eval.conditioned", "eval.joint_space", "eval.baseline", "eval.attention_direction",
        "eval.per_layer_maps",
    };
    return keys;
}

inline std::string nearest_key(const std::string& key) {
    size_t best = size_t(-1);
    std::string best_key;
    for (const auto& k : known_keys()) {
        size_t d = edit_distance(key, k);
        if (d < best) {
            best = d;
            best_key = k;
        }
    }
    return best_key;
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw config_error("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return std::uint64_t(r);
    } catch (...) {
        throw config_error("config key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw config_error("config key '" + key + "': expected number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    std::string s = to_lower(v);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw config_error("config key '" + key + "': expected boolean, got '" + v + "'");
}

inline AdapterMode parse_mode(const std::string& key, const std::string& v) {
    if (v == "none") return AdapterMode::none;
    if (v == "self_only") return AdapterMode::self_only;
    if (v == "self_plus_cross") return AdapterMode::self_plus_cross;
    throw config_error("config key '" + key + "': expected none|self_only|self_plus_cross, got '" + v + "'");
}

inline BranchId parse_branch(const std::string& key, const std::string& v) {
    if (v == "original") return BranchId::original;
    if (v == "augmented") return BranchId::augmented;
    throw config_error("config key '" + key + "': expected original|augmented, got '" + v + "'");
}

inline SplitRole parse_role(const std::string& key, const std::string& v) {
    if (v == "base_to_novel") return SplitRole::base_to_novel;
    if (v == "cross_dataset") return SplitRole::cross_dataset;
    if (v == "domain_shift") return SplitRole::domain_shift;
    throw config_error("config key '" + key +
                       "': expected base_to_novel|cross_dataset|domain_shift, got '" + v + "'");
}

inline const char* mode_name(AdapterMode m) {
    switch (m) {
        case AdapterMode::none: return "none";
        case AdapterMode::self_only: return "self_only";
        default: return "self_plus_cross";
    }
}

inline const char* branch_name(BranchId b) { return b == BranchId::original ? "original" : "augmented"; }

inline const char* role_name(SplitRole r) {
    switch (r) {
        case SplitRole::base_to_novel: return "base_to_novel";
        case SplitRole::cross_dataset: return "cross_dataset";
        default: return "domain_shift";
    }
}

}  // namespace config_detail

// Applies one "section.key = value" assignment. Unknown keys report the
// nearest valid key.
inline void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace config_detail;
    auto& c = cfg;
    bool handled = true;
    if (key == "model.num_layers") c.model.num_layers = parse_int(key, value);
    else if (key == "model.patch_size") c.model.patch_size = parse_int(key, value);
    else if (key == "model.image_size") c.model.image_size = parse_int(key, value);
    else if (key == "model.num_channels") c.model.num_channels = parse_int(key, value);
    else if (key == "model.embed_dim_image") c.model.embed_dim_image = parse_int(key, value);
    else if (key == "model.embed_dim_text") c.model.embed_dim_text = parse_int(key, value);
    else if (key == "model.shared_dim") c.model.shared_dim = parse_int(key, value);
    else if (key == "model.prompt_depth") c.model.prompt_depth = parse_int(key, value);
    else if (key == "model.prompt_length") c.model.prompt_length = parse_int(key, value);
    else if (key == "model.num_heads") c.model.num_heads = parse_int(key, value);
    else if (key == "model.vocab_size") c.model.vocab_size = parse_int(key, value);
    else if (key == "model.max_text_len") c.model.max_text_len = parse_int(key, value);
    else if (key == "model.temperature") c.model.temperature = parse_double(key, value);
    else if (key == "model.consistency_temperature") c.model.consistency_temperature = parse_double(key, value);
    else if (key == "model.alpha") c.model.alpha = parse_double(key, value);
    else if (key == "model.beta") c.model.beta = parse_double(key, value);
    else if (key == "model.adapter_depth") c.model.adapter_depth = parse_int(key, value);
    else if (key == "adapter.num_heads") c.adapter.num_heads = parse_int(key, value);
    else if (key == "adapter.bottleneck_dim") c.adapter.bottleneck_dim = parse_int(key, value);
    else if (key == "adapter.mode") c.adapter.mode = parse_mode(key, value);
    else if (key == "adapter.attach_image_branch") c.adapter.attach_image_branch = parse_branch(key, value);
    else if (key == "adapter.attach_text_branch") c.adapter.attach_text_branch = parse_branch(key, value);
    else if (key == "adapter.all_branches") c.adapter.all_branches = parse_bool(key, value);
    else if (key == "train.epochs") c.train.epochs = parse_int(key, value);
    else if (key == "train.learning_rate") c.train.learning_rate = parse_double(key, value);
    else if (key == "train.optimizer") c.train.optimizer = value;
    else if (key == "train.momentum") c.train.momentum = parse_double(key, value);
    else if (key == "train.batch_size") c.train.batch_size = parse_int(key, value);
    else if (key == "train.seed") c.train.seed = parse_u64(key, value);
    else if (key == "train.freeze_backbone") c.train.freeze_backbone = parse_bool(key, value);
    else if (key == "train.single_alpha") c.train.single_alpha = parse_bool(key, value);
    else if (key == "train.max_steps") c.train.max_steps = parse_int(key, value);
    else if (key == "train.checkpoint_every") c.train.checkpoint_every = parse_int(key, value);
    else if (key == "augment.text_kind") {
        if (value == "llm_remote") c.augment.text_kind = TextAugKind::llm_remote;
        else if (value == "eda_local") c.augment.text_kind = TextAugKind::eda_local;
        else throw config_error("config key '" + key + "': expected llm_remote|eda_local, got '" + value + "'");
    } else if (key == "augment.image_kind") {
        if (value == "diffusion_remote") c.augment.image_kind = ImageAugKind::diffusion_remote;
        else if (value == "standard_local") c.augment.image_kind = ImageAugKind::standard_local;
        else throw config_error("config key '" + key + "': expected diffusion_remote|standard_local, got '" + value + "'");
    } else if (key == "augment.endpoint") c.augment.endpoint = value;
    else if (key == "augment.cache_dir") c.augment.cache_dir = value;
    else if (key == "augment.pool_size") c.augment.pool_size = parse_int(key, value);
    else if (key == "augment.timeout_seconds") c.augment.timeout_seconds = parse_int(key, value);
    else if (key == "data.manifest") c.data.manifest = value;
    else if (key == "data.shots") c.data.shots = parse_int(key, value);
    else if (key == "data.split_seed") c.data.split_seed = parse_u64(key, value);
    else if (key == "data.split_role") c.data.split_role = parse_role(key, value);
    else if (key == "data.targets") {
        c.data.targets.clear();
        for (auto& t : split(value, ';'))
            if (!trim(t).empty()) c.data.targets.push_back(trim(t));
    } else if (key == "data.vocab_file") c.data.vocab_file = value;
    else if (key == "eval.conditioned") c.eval.conditioned = parse_bool(key, value);
    else if (key == "eval.joint_space") c.eval.joint_space = parse_bool(key, value);
    else if (key == "eval.baseline") c.eval.baseline = value;
    else if (key == "eval.attention_direction") {
        if (value == "text_to_image") c.eval.attention_direction = AttentionDirection::text_to_image;
        else if (value == "image_to_text") c.eval.attention_direction = AttentionDirection::image_to_text;
        else throw config_error("config key '" + key + "': expected text_to_image|image_to_text, got '" + value + "'");
    } else if (key == "eval.per_layer_maps") c.eval.per_layer_maps = parse_bool(key, value);
    else handled = false;

    if (!handled)
        throw config_error("unknown config key '" + key + "'; nearest valid key is '" +
                           config_detail::nearest_key(key) + "'");
    cfg.explicit_keys.insert(key);
}

// Parses config text: [section] headers, key = value lines, # or ; comments.
inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
    RunConfig cfg = std::move(base);
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']')
                throw config_error("config line " + std::to_string(lineno) + ": unterminated section header");
            section = trim(s.substr(1, s.size() - 2));
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (section.empty())
            throw config_error("config line " + std::to_string(lineno) + ": key outside any [section]");
        apply_config_value(cfg, section + "." + key, value);
    }
    return cfg;
}

// Environment overrides: DUET_<SECTION>_<KEY>=value (key underscores kept).
inline void apply_env_overrides(RunConfig& cfg, char** envp) {
    if (!envp) return;
    for (char** e = envp; *e; ++e) {
        std::string entry(*e);
        if (entry.rfind("DUET_", 0) != 0) continue;
        auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string name = entry.substr(5, eq - 5);
        std::string value = entry.substr(eq + 1);
        auto us = name.find('_');
        if (us == std::string::npos) continue;
        std::string key = to_lower(name.substr(0, us)) + "." + to_lower(name.substr(us + 1));
        apply_config_value(cfg, key, value);
    }
}

// Emits a config file that parses back to the same configuration.
inline std::string serialize_config(const RunConfig& c) {
    using namespace config_detail;
    std::ostringstream os;
    os.precision(17);
    os << "[model]\n";
    os << "num_layers = " << c.model.num_layers << "\n";
    os << "patch_size = " << c.model.patch_size << "\n";
    os << "image_size = " << c.model.image_size << "\n";
    os << "num_channels = " << c.model.num_channels << "\n";
    os << "embed_dim_image = " << c.model.embed_dim_image << "\n";
    os << "embed_dim_text = " << c.model.embed_dim_text << "\n";
    os << "shared_dim = " << c.model.shared_dim << "\n";
    os << "prompt_depth = " << c.model.prompt_depth << "\n";
    os << "prompt_length = " << c.model.prompt_length << "\n";
    os << "num_heads = " << c.model.num_heads << "\n";
    os << "vocab_size = " << c.model.vocab_size << "\n";
    os << "max_text_len = " << c.model.max_text_len << "\n";
    os << "temperature = " << c.model.temperature << "\n";
    os << "consistency_temperature = " << c.model.consistency_temperature << "\n";
    os << "alpha = " << c.model.alpha << "\n";
    os << "beta = " << c.model.beta << "\n";
    os << "adapter_depth = " << c.model.adapter_depth << "\n";
    os << "\n[adapter]\n";
    os << "num_heads = " << c.adapter.num_heads << "\n";
    os << "bottleneck_dim = " << c.adapter.bottleneck_dim << "\n";
    os << "mode = " << mode_name(c.adapter.mode) << "\n";
    os << "attach_image_branch = " << branch_name(c.adapter.attach_image_branch) << "\n";
    os << "attach_text_branch = " << branch_name(c.adapter.attach_text_branch) << "\n";
    os << "all_branches = " << (c.adapter.all_branches ? "true" : "false") << "\n";
    os << "\n[train]\n";
    os << "epochs = " << c.train.epochs << "\n";
    os << "learning_rate = " << c.train.learning_rate << "\n";
    os << "optimizer = " << c.train.optimizer << "\n";
    os << "momentum = " << c.train.momentum << "\n";
    os << "batch_size = " << c.train.batch_size << "\n";
    os << "seed = " << c.train.seed << "\n";
    os << "freeze_backbone = " << (c.train.freeze_backbone ? "true" : "false") << "\n";
    os << "single_alpha = " << (c.train.single_alpha ? "true" : "false") << "\n";
    os << "max_steps = " << c.train.max_steps << "\n";
    os << "checkpoint_every = " << c.train.checkpoint_every << "\n";
    os << "\n[augment]\n";
    os << "text_kind = " << (c.augment.text_kind == TextAugKind::llm_remote ? "llm_remote" : "eda_local") << "\n";
    os << "image_kind = "
       << (c.augment.image_kind == ImageAugKind::diffusion_remote ? "diffusion_remote" : "standard_local")
       << "\n";
    os << "endpoint = " << c.augment.endpoint << "\n";
    os << "cache_dir = " << c.augment.cache_dir << "\n";
    os << "pool_size = " << c.augment.pool_size << "\n";
    os << "timeout_seconds = " << c.augment.timeout_seconds << "\n";
    os << "\n[data]\n";
    os << "manifest = " << c.data.manifest << "\n";
    os << "shots = " << c.data.shots << "\n";
    os << "split_seed = " << c.data.split_seed << "\n";
    os << "split_role = " << role_name(c.data.split_role) << "\n";
    std::string targets;
    for (size_t i = 0; i < c.data.targets.size(); ++i)
        targets += (i ? ";" : "") + c.data.targets[i];
    os << "targets = " << targets << "\n";
    os << "vocab_file = " << c.data.vocab_file << "\n";
    os << "\n[eval]\n";
    os << "conditioned = " << (c.eval.conditioned ? "true" : "false") << "\n";
    os << "joint_space = " << (c.eval.joint_space ? "true" : "false") << "\n";
    os << "baseline = " << c.eval.baseline << "\n";
    os << "attention_direction = "
       << (c.eval.attention_direction == AttentionDirection::text_to_image ? "text_to_image"
                                                                           : "image_to_text")
       << "\n";
    os << "per_layer_maps = " << (c.eval.per_layer_maps ? "true" : "false") << "\n";
    return os.str();
}

}  // namespace duet
