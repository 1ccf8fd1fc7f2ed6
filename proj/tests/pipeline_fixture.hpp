// Shared fixture: a generated shapes dataset plus a desk-scale model,
// adapter, augmenter and trainer wired from one RunConfig.

#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include "duet/eval.hpp"
#include "duet/train.hpp"
#include "duet/visualize.hpp"

namespace duet::testing {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("duet_fix_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

inline RunConfig desk_run_config() {
    RunConfig cfg;
    cfg.model.num_layers = 2;
    cfg.model.patch_size = 8;
    cfg.model.image_size = 32;
    cfg.model.embed_dim_image = 32;
    cfg.model.embed_dim_text = 32;
    cfg.model.shared_dim = 32;
    cfg.model.prompt_depth = 2;
    cfg.model.prompt_length = 2;
    cfg.model.num_heads = 4;
    cfg.model.max_text_len = 8;
    cfg.model.temperature = 0.1;
    cfg.model.consistency_temperature = 0.1;
    cfg.model.alpha = 2.0;
    cfg.model.beta = 1.0;
    cfg.model.adapter_depth = 1;
    cfg.adapter.num_heads = 4;
    cfg.train.epochs = 2;
    cfg.train.learning_rate = 0.05;
    cfg.train.momentum = 0.9;
    cfg.train.batch_size = 8;
    cfg.train.seed = 1;
    cfg.augment.text_kind = TextAugKind::eda_local;
    cfg.augment.image_kind = ImageAugKind::standard_local;
    cfg.data.shots = 4;
    return cfg;
}

struct Pipeline {
    TempDir dir;
    RunConfig cfg;
    DatasetManifest manifest;
    EvalSplit split;
    std::vector<ManifestSample> shots;
    DualEncoder model;
    McaAdapter adapter;
    Augmenter augmenter;
    Trainer trainer;

    explicit Pipeline(RunConfig run_cfg = desk_run_config(), int num_classes = 4,
                      int train_per_class = 8, int test_per_class = 8)
        : cfg(std::move(run_cfg)),
          manifest(make_manifest(dir.path.string(), cfg, num_classes, train_per_class, test_per_class)),
          split(split_base_novel(manifest, cfg.data.split_seed)),
          shots(sample_few_shot(manifest, split, cfg.data.shots, cfg.train.seed)),
          model(cfg.model, Tokenizer{}, cfg.train.seed),
          adapter(model, cfg.adapter, cfg.train.seed),
          augmenter(cfg.augment, cfg.model.image_size, cfg.train.seed),
          trainer(model, adapter, cfg, augmenter) {}

    static DatasetManifest make_manifest(const std::string& dir, const RunConfig& cfg,
                                         int num_classes, int train_per_class, int test_per_class) {
        ShapesDatasetOptions opt;
        opt.num_classes = num_classes;
        opt.train_per_class = train_per_class;
        opt.test_per_class = test_per_class;
        opt.image_size = cfg.model.image_size;
        opt.seed = cfg.train.seed;
        return DatasetManifest::load(generate_shapes_dataset(dir, opt));
    }

    std::string run_dir() const { return (dir.path / "run").string(); }
};

}  // namespace duet::testing
