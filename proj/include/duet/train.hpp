#pragma once

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "duet/adapter.hpp"
#include "duet/augment.hpp"
#include "duet/data.hpp"
#include "duet/losses.hpp"

namespace duet {

// ─── Freeze partition ────────────────────────────────────────────────────────
// With the backbone frozen, exactly the prompts, adapter blocks and the two
// projection heads train.

inline bool is_tunable_under_freeze(const std::string& name) {
    return name.rfind("prompts.", 0) == 0 || name.rfind("adapter.", 0) == 0 ||
           name == "image.proj" || name == "text.proj";
}

inline std::vector<std::string> trainable_parameter_names(const nn::ParamStore& store,
                                                          bool freeze_backbone) {
    std::vector<std::string> out;
    for (const auto& name : store.names())
        if (!freeze_backbone || is_tunable_under_freeze(name)) out.push_back(name);
    return out;
}

// Stable digest of names, shapes and parameter bytes; distinguishes both
// differing parameter sets and differing training trajectories.
inline std::string parameter_signature(const nn::ParamStore& store) {
    std::uint64_t h = fnv1a("duet-params");
    std::vector<std::string> names = store.names();
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
        h = fnv1a(name, h);
        const Tensor& t = store.get(name).val();
        for (auto d : t.shape) h = fnv1a_u64(std::uint64_t(d), h);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data.data()),
                                   t.data.size() * sizeof(double)),
                  h);
    }
    return hex64(h);
}

// ─── SGD with momentum over a named subset ───────────────────────────────────

class SgdOptimizer {
  public:
    SgdOptimizer(nn::ParamStore& store, std::vector<std::string> trainable, double lr,
                 double momentum)
        : store_(&store), trainable_(std::move(trainable)), lr_(lr), momentum_(momentum) {
        for (const auto& name : trainable_)
            velocity_.emplace(name, Tensor::zeros(store.get(name).val().shape));
    }

    const std::vector<std::string>& trainable() const { return trainable_; }

    void zero_grad() {
        for (const auto& name : trainable_) store_->get(name).zero_grad();
    }

    void step() {
        for (const auto& name : trainable_) {
            ag::Var& p = store_->get(name);
            const Tensor& g = p.grad();
            if (g.numel() == 0) continue;  // parameter unused by this graph
            Tensor& v = velocity_.at(name);
            Tensor& w = p.mutable_val();
            for (std::int64_t i = 0; i < w.numel(); ++i) {
                v[i] = momentum_ * v[i] + g[i];
                w[i] -= lr_ * v[i];
            }
        }
    }

    std::map<std::string, Tensor> export_state() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, v] : velocity_) out.emplace("optim.momentum." + name, v);
        return out;
    }

    void import_state(const std::map<std::string, Tensor>& state) {
        for (auto& [name, v] : velocity_) {
            auto it = state.find("optim.momentum." + name);
            if (it != state.end()) v = it->second;
        }
    }

  private:
    nn::ParamStore* store_;
    std::vector<std::string> trainable_;
    double lr_, momentum_;
    std::map<std::string, Tensor> velocity_;
};

// ─── Batches ─────────────────────────────────────────────────────────────────

struct TrainBatch {
    Tensor images;      // [B, C, H, W] originals
    Tensor images_aug;  // [B, C, H, W] augmented branch
    std::vector<std::string> texts;      // class-templated originals
    std::vector<std::string> texts_aug;  // augmented branch
    std::vector<int> class_indices;
};

// ─── Trainer ─────────────────────────────────────────────────────────────────

struct TrainOutcome {
    std::string final_checkpoint;
    std::vector<std::string> epoch_checkpoints;
    std::string log_path;
    std::vector<LossReport> reports;
    int steps_run = 0;
};

class Trainer {
  public:
    Trainer(DualEncoder& model, McaAdapter& adapter, const RunConfig& cfg, Augmenter& augmenter)
        : model_(&model),
          adapter_(&adapter),
          cfg_(cfg),
          augmenter_(&augmenter),
          optimizer_(model.params(),
                     trainable_parameter_names(model.params(), cfg.train.freeze_backbone),
                     cfg.train.learning_rate, cfg.train.momentum) {
        cfg_.train.validate();
    }

    SgdOptimizer& optimizer() { return optimizer_; }

    TrainBatch make_batch(const DatasetManifest& manifest, const std::vector<ManifestSample>& samples,
                          int epoch) const {
        std::int64_t b = std::int64_t(samples.size());
        const ModelConfig& mc = model_->config();
        TrainBatch batch;
        batch.images = Tensor({b, mc.num_channels, mc.image_size, mc.image_size});
        batch.images_aug = Tensor(batch.images.shape);
        for (std::int64_t i = 0; i < b; ++i) {
            const ManifestSample& s = samples[size_t(i)];
            Tensor img = load_sample_image(manifest, s);
            if (img.shape[1] != mc.image_size || img.shape[2] != mc.image_size)
                throw config_error("sample image size " + std::to_string(img.shape[1]) +
                                   " does not match model.image_size " + std::to_string(mc.image_size));
            const std::string& cls = manifest.classes[size_t(s.class_index)];
            Tensor aug = augmenter_->augmented_image(img, cls, s.class_index, epoch);
            std::copy(img.data.begin(), img.data.end(),
                      batch.images.data.begin() + i * img.numel());
            std::copy(aug.data.begin(), aug.data.end(),
                      batch.images_aug.data.begin() + i * aug.numel());
            batch.texts.push_back(fill_template(manifest.template_str, cls));
            batch.texts_aug.push_back(
                augmenter_->augmented_text(cls, manifest.template_str, s.class_index, epoch));
            batch.class_indices.push_back(s.class_index);
        }
        return batch;
    }

    // One optimization step: four forward passes, adapters on the configured
    // branches, total loss, one SGD update of the trainable set.
    LossReport train_step(const TrainBatch& batch) {
        if (std::int64_t(batch.texts.size()) < 2)
            throw input_error("train_step: batch must contain at least 2 pairs");

        EncodeResult img_orig = model_->encode_image(model_->patch_embed(batch.images));
        EncodeResult img_aug = model_->encode_image(model_->patch_embed(batch.images_aug));
        EncodeResult txt_orig = model_->encode_text_strings(batch.texts);
        EncodeResult txt_aug = model_->encode_text_strings(batch.texts_aug);

        BranchVars branches{img_aug.embedding, img_orig.embedding, txt_orig.embedding,
                            txt_aug.embedding};
        const AdapterConfig& ac = adapter_->config();
        if (adapter_->depth() > 0) {
            if (ac.all_branches) {
                AdaptResult orig = adapter_->adapt(img_orig.stream, txt_orig.stream);
                AdaptResult aug = adapter_->adapt(img_aug.stream, txt_aug.stream);
                branches.z_img_orig = orig.u_adapted;
                branches.z_txt_orig = orig.v_adapted;
                branches.z_img_aug = aug.u_adapted;
                branches.z_txt_aug = aug.v_adapted;
            } else {
                const TokenSequence& img_stream = ac.attach_image_branch == BranchId::original
                                                      ? img_orig.stream
                                                      : img_aug.stream;
                const TokenSequence& txt_stream = ac.attach_text_branch == BranchId::original
                                                      ? txt_orig.stream
                                                      : txt_aug.stream;
                AdaptResult adapted = adapter_->adapt(img_stream, txt_stream);
                if (ac.attach_image_branch == BranchId::original) branches.z_img_orig = adapted.u_adapted;
                else branches.z_img_aug = adapted.u_adapted;
                if (ac.attach_text_branch == BranchId::original) branches.z_txt_orig = adapted.v_adapted;
                else branches.z_txt_aug = adapted.v_adapted;
            }
        }

        LossReport report;
        ag::Var total = total_loss_graph(branches, model_->config(), cfg_.train.single_alpha, &report);
        if (!std::isfinite(report.l_total))
            throw numeric_error("non-finite training loss");

        optimizer_.zero_grad();
        ag::backward(total);
        optimizer_.step();
        return report;
    }

    // Full few-shot fine-tuning loop with per-epoch checkpoints and a
    // tab-separated step log (fixed column order, deterministic formatting).
    TrainOutcome train(const DatasetManifest& manifest, const std::vector<ManifestSample>& samples,
                       const std::string& run_dir, const std::string& resume_from = "") {
        if (samples.empty()) throw input_error("train: empty few-shot sample set");
        namespace fs = std::filesystem;
        fs::create_directories(fs::path(run_dir) / "checkpoints");

        int start_epoch = 0;
        int global_step = 0;
        if (!resume_from.empty()) {
            Checkpoint ckpt = Checkpoint::load(resume_from);
            model_->import_tensors(ckpt.tensors);
            optimizer_.import_state(ckpt.tensors);
            start_epoch = int(meta_value(ckpt, "meta.epoch"));
            global_step = int(meta_value(ckpt, "meta.step"));
        }

        TrainOutcome outcome;
        outcome.log_path = (fs::path(run_dir) / "train.log").string();
        std::ofstream log(outcome.log_path, resume_from.empty() ? std::ios::trunc : std::ios::app);
        if (!log) throw io_error("cannot open training log: " + outcome.log_path);
        if (resume_from.empty()) {
            log << "# step";
            for (const char* f : LossReport::field_names()) log << "\t" << f;
            log << "\n";
        }

        const int max_steps = cfg_.train.max_steps;
        std::string last_good;
        bool done = false;
        for (int epoch = start_epoch; epoch < cfg_.train.epochs && !done; ++epoch) {
            std::vector<ManifestSample> order = samples;
            Rng shuffle_rng(derive_seed(cfg_.train.seed, 0x53485546ull, std::uint64_t(epoch)));
            std::shuffle(order.begin(), order.end(), shuffle_rng);

            for (size_t ofs = 0; ofs < order.size(); ofs += size_t(cfg_.train.batch_size)) {
                size_t take = std::min(size_t(cfg_.train.batch_size), order.size() - ofs);
                if (take < 2) break;  // a trailing singleton has no in-batch negatives
                std::vector<ManifestSample> chunk(order.begin() + std::ptrdiff_t(ofs),
                                                  order.begin() + std::ptrdiff_t(ofs + take));
                TrainBatch batch = make_batch(manifest, chunk, epoch);
                LossReport report;
                try {
                    report = train_step(batch);
                } catch (const numeric_error&) {
                    log.flush();
                    throw numeric_error("training aborted on non-finite loss at step " +
                                        std::to_string(global_step) + "; last good checkpoint: " +
                                        (last_good.empty() ? "<none>" : last_good));
                }
                log << format_log_line(global_step, report);
                outcome.reports.push_back(report);
                ++global_step;
                if (max_steps > 0 && global_step >= max_steps) {
                    done = true;
                    break;
                }
            }

            if ((epoch + 1) % cfg_.train.checkpoint_every == 0 || epoch + 1 == cfg_.train.epochs || done) {
                char name[32];
                std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch + 1);
                std::string path = (fs::path(run_dir) / "checkpoints" / name).string();
                save_checkpoint(path, epoch + 1, global_step);
                outcome.epoch_checkpoints.push_back(path);
                last_good = path;
            }
        }

        outcome.final_checkpoint = (fs::path(run_dir) / "checkpoints" / "final.ckpt").string();
        save_checkpoint(outcome.final_checkpoint, cfg_.train.epochs, global_step);
        outcome.steps_run = global_step;
        log.flush();
        return outcome;
    }

    void save_checkpoint(const std::string& path, int epoch, int step) const {
        Checkpoint ckpt;
        ckpt.config_text = serialize_config(cfg_);
        ckpt.tensors = model_->export_tensors();
        for (auto& [name, tensor] : optimizer_.export_state()) ckpt.tensors.emplace(name, tensor);
        ckpt.tensors.emplace("meta.epoch", Tensor::scalar(double(epoch)));
        ckpt.tensors.emplace("meta.step", Tensor::scalar(double(step)));
        ckpt.save(path);
    }

    static double meta_value(const Checkpoint& ckpt, const std::string& key) {
        auto it = ckpt.tensors.find(key);
        if (it == ckpt.tensors.end()) throw io_error("checkpoint missing " + key);
        return it->second[0];
    }

    static std::string format_log_line(int step, const LossReport& report) {
        char buf[64];
        std::string line = std::to_string(step);
        for (double v : report.fields()) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            line += "\t";
            line += buf;
        }
        line += "\n";
        return line;
    }

  private:
    DualEncoder* model_;
    McaAdapter* adapter_;
    RunConfig cfg_;
    Augmenter* augmenter_;
    SgdOptimizer optimizer_;
};

// Restores a model (and nothing else) from a checkpoint written by Trainer.
inline void load_model_from_checkpoint(DualEncoder& model, const std::string& path) {
    Checkpoint ckpt = Checkpoint::load(path);
    model.import_tensors(ckpt.tensors);
}

}  // namespace duet
