#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "duet/adapter.hpp"
#include "duet/data.hpp"

namespace duet {

// ─── Zero-shot classification ────────────────────────────────────────────────
// Class scores are cosine similarities of the class-conditioned embedding
// pair, divided by the temperature in both numerator and denominator of the
// softmax (the uniform-temperature reading; see the model notes on the
// denominator).

struct ClassifyResult {
    std::vector<int> predictions;  // argmax per image
    Tensor probabilities;          // [B, C], rows sum to 1
};

// Row softmax plus argmax (ties resolve to the lowest index).
inline ClassifyResult softmax_scores(const Tensor& scores) {
    std::int64_t B = scores.shape[0], C = scores.shape[1];
    ClassifyResult out;
    out.probabilities = Tensor({B, C});
    out.predictions.resize(size_t(B));
    for (std::int64_t b = 0; b < B; ++b) {
        double hi = scores.at(b, 0);
        for (std::int64_t c = 1; c < C; ++c) hi = std::max(hi, scores.at(b, c));
        double z = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            out.probabilities.at(b, c) = std::exp(scores.at(b, c) - hi);
            z += out.probabilities.at(b, c);
        }
        int best = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            out.probabilities.at(b, c) /= z;
            if (out.probabilities.at(b, c) > out.probabilities.at(b, best)) best = int(c);
        }
        out.predictions[size_t(b)] = best;
    }
    return out;
}

inline ClassifyResult classify(const DualEncoder& model, const McaAdapter& adapter,
                               const Tensor& images, const std::vector<std::string>& class_names,
                               const std::string& templ, const EvalConfig& eval_cfg = {}) {
    if (class_names.empty()) throw input_error("classify: empty class list");
    TokenSequence img_stream = model.encode_image(model.patch_embed(images)).stream;

    std::vector<TokenSequence> class_texts;
    class_texts.reserve(class_names.size());
    for (const auto& cls : class_names)
        class_texts.push_back(model.encode_text_strings({fill_template(templ, cls)}).stream);

    auto pairs = adapter.adapt_pairwise_for_eval(img_stream, class_texts, eval_cfg.conditioned);

    std::int64_t B = images.shape[0];
    std::int64_t C = std::int64_t(class_names.size());
    Tensor scores({B, C});
    double tau = model.config().temperature;
    for (std::int64_t c = 0; c < C; ++c) {
        const Tensor& u = pairs[size_t(c)].first.val();
        const Tensor& v = pairs[size_t(c)].second.val();
        for (std::int64_t b = 0; b < B; ++b) {
            double dot = 0.0;
            for (std::int64_t d = 0; d < u.shape[1]; ++d) dot += u.at(b, d) * v.at(b, d);
            scores.at(b, c) = dot / tau;
        }
    }
    return softmax_scores(scores);
}

// ─── Protocol evaluations ────────────────────────────────────────────────────

namespace eval_detail {

inline Tensor stack_images(const DatasetManifest& manifest, const std::vector<ManifestSample>& samples,
                           const ModelConfig& cfg) {
    Tensor out({std::int64_t(samples.size()), cfg.num_channels, cfg.image_size, cfg.image_size});
    for (size_t i = 0; i < samples.size(); ++i) {
        Tensor img = load_sample_image(manifest, samples[i]);
        if (img.shape[1] != cfg.image_size || img.shape[2] != cfg.image_size)
            throw config_error("test image size " + std::to_string(img.shape[1]) +
                               " does not match model.image_size " + std::to_string(cfg.image_size));
        std::copy(img.data.begin(), img.data.end(), out.data.begin() + std::int64_t(i) * img.numel());
    }
    return out;
}

// Accuracy of top-1 exact match over the given candidate label space.
inline double accuracy_over(const DualEncoder& model, const McaAdapter& adapter,
                            const DatasetManifest& manifest,
                            const std::vector<ManifestSample>& samples,
                            const std::vector<std::string>& candidates, const EvalConfig& eval_cfg,
                            std::int64_t batch_limit = 16) {
    if (samples.empty()) throw input_error("evaluation: no test samples");
    std::int64_t correct = 0;
    for (size_t ofs = 0; ofs < samples.size(); ofs += size_t(batch_limit)) {
        size_t take = std::min(size_t(batch_limit), samples.size() - ofs);
        std::vector<ManifestSample> chunk(samples.begin() + std::ptrdiff_t(ofs),
                                          samples.begin() + std::ptrdiff_t(ofs + take));
        Tensor images = stack_images(manifest, chunk, model.config());
        ClassifyResult res =
            classify(model, adapter, images, candidates, manifest.template_str, eval_cfg);
        for (size_t i = 0; i < take; ++i) {
            const std::string& truth = manifest.classes[size_t(chunk[i].class_index)];
            if (candidates[size_t(res.predictions[i])] == truth) ++correct;
        }
    }
    return double(correct) / double(samples.size());
}

}  // namespace eval_detail

struct BaseNovelAccuracy {
    double base = 0.0;   // fraction in [0,1]
    double novel = 0.0;
    int base_count = 0;
    int novel_count = 0;
};

// Base accuracy over base-class test samples against the base candidate set;
// novel accuracy over novel-class test samples against the novel candidate
// set (disjoint label spaces unless joint_space is requested).
inline BaseNovelAccuracy eval_base_to_novel(const DualEncoder& model, const McaAdapter& adapter,
                                            const DatasetManifest& manifest, const EvalSplit& split,
                                            const EvalConfig& eval_cfg = {}) {
    if (split.role != SplitRole::base_to_novel)
        throw input_error("eval_base_to_novel: split role must be base_to_novel");

    auto collect = [&](const std::vector<std::string>& classes) {
        std::vector<ManifestSample> out;
        for (const auto& s : manifest.samples) {
            if (s.split != SampleSplit::test) continue;
            const std::string& cls = manifest.classes[size_t(s.class_index)];
            if (std::find(classes.begin(), classes.end(), cls) != classes.end()) out.push_back(s);
        }
        for (const auto& cls : classes) {
            bool found = false;
            for (const auto& s : out)
                found = found || manifest.classes[size_t(s.class_index)] == cls;
            if (!found) throw input_error("evaluated class '" + cls + "' has no test samples");
        }
        return out;
    };

    std::vector<std::string> joint = manifest.classes;
    BaseNovelAccuracy acc;
    auto base_samples = collect(split.base_classes);
    auto novel_samples = collect(split.novel_classes);
    acc.base_count = int(base_samples.size());
    acc.novel_count = int(novel_samples.size());
    const std::vector<std::string>& base_space = eval_cfg.joint_space ? joint : split.base_classes;
    const std::vector<std::string>& novel_space = eval_cfg.joint_space ? joint : split.novel_classes;
    acc.base = eval_detail::accuracy_over(model, adapter, manifest, base_samples, base_space, eval_cfg);
    acc.novel =
        eval_detail::accuracy_over(model, adapter, manifest, novel_samples, novel_space, eval_cfg);
    return acc;
}

// ─── Results tables with delta rows ──────────────────────────────────────────
// Accuracies are stored as percentages rounded to two decimals, matching the
// reporting format; delta rows are computed from the rounded values.

struct ResultsTable {
    SplitRole role = SplitRole::cross_dataset;
    std::vector<std::string> datasets;
    std::vector<double> accuracy;              // percent, two-decimal precision
    std::optional<std::vector<double>> delta;  // vs a baseline table

    static double round2(double v) { return std::round(v * 100.0) / 100.0; }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw io_error("cannot write results file: " + path);
        os << "duet-results v1\n";
        os << "role " << config_detail::role_name(role) << "\n";
        char buf[64];
        for (size_t i = 0; i < datasets.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.2f", accuracy[i]);
            os << "dataset " << datasets[i] << " " << buf << "\n";
        }
    }

    static ResultsTable load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw io_error("cannot open results file: " + path);
        ResultsTable t;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::string s = trim(line);
            if (s.empty() || s[0] == '#') continue;
            if (lineno == 1) {
                if (s != "duet-results v1") throw input_error("results file: bad header");
                continue;
            }
            std::istringstream ls(s);
            std::string key;
            ls >> key;
            if (key == "role") {
                std::string value;
                ls >> value;
                t.role = config_detail::parse_role("results.role", value);
            } else if (key == "dataset") {
                std::string name;
                double acc;
                if (!(ls >> name >> acc))
                    throw input_error("results file line " + std::to_string(lineno) + ": bad row");
                t.datasets.push_back(name);
                t.accuracy.push_back(acc);
            } else {
                throw input_error("results file line " + std::to_string(lineno) + ": unknown key '" +
                                  key + "'");
            }
        }
        return t;
    }

    // Paper-style rendering: one column per dataset, an accuracy row, and a
    // delta row when a baseline was supplied.
    std::string render() const {
        std::ostringstream os;
        char buf[64];
        os << "target";
        for (const auto& d : datasets) os << "\t" << d;
        os << "\nours";
        for (double a : accuracy) {
            std::snprintf(buf, sizeof(buf), "%.2f", a);
            os << "\t" << buf;
        }
        os << "\n";
        if (delta) {
            os << "delta";
            for (double d : *delta) {
                std::snprintf(buf, sizeof(buf), "%+.2f", d);
                os << "\t" << buf;
            }
            os << "\n";
        }
        return os.str();
    }
};

// Attaches a delta row (ours minus baseline, two decimals) to a table.
inline void apply_baseline(ResultsTable& table, const ResultsTable& baseline) {
    if (baseline.datasets != table.datasets)
        throw input_error("baseline results file lists different targets than this evaluation");
    std::vector<double> delta;
    for (size_t i = 0; i < table.accuracy.size(); ++i)
        delta.push_back(ResultsTable::round2(table.accuracy[i] - baseline.accuracy[i]));
    table.delta = std::move(delta);
}

// Zero-shot evaluation of one checkpointed model over target manifests with
// their own class sets and templates; optional delta row against a baseline
// results file in the same format.
inline ResultsTable eval_transfer(const DualEncoder& model, const McaAdapter& adapter,
                                  const std::vector<DatasetManifest>& targets, SplitRole role,
                                  const EvalConfig& eval_cfg = {},
                                  const std::optional<ResultsTable>& baseline = std::nullopt) {
    if (role != SplitRole::cross_dataset && role != SplitRole::domain_shift)
        throw input_error("eval_transfer: role must be cross_dataset or domain_shift");
    ResultsTable table;
    table.role = role;
    for (const auto& target : targets) {
        std::vector<ManifestSample> tests;
        for (const auto& s : target.samples)
            if (s.split == SampleSplit::test) tests.push_back(s);
        double acc =
            eval_detail::accuracy_over(model, adapter, target, tests, target.classes, eval_cfg);
        table.datasets.push_back(target.name);
        table.accuracy.push_back(ResultsTable::round2(acc * 100.0));
    }
    if (baseline) apply_baseline(table, *baseline);
    return table;
}

}  // namespace duet
