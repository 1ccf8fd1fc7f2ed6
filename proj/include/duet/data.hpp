#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "duet/config.hpp"
#include "duet/image_io.hpp"

namespace duet {

// ─── Dataset manifests ───────────────────────────────────────────────────────
// One structured text file per dataset: a versioned header block, then one
// sample per line ("<path> <class index> <train|test>"). Paths are relative
// to the manifest's directory.

enum class SampleSplit { train, test };

struct ManifestSample {
    std::string path;
    int class_index = 0;
    SampleSplit split = SampleSplit::train;
};

struct DatasetManifest {
    std::string name;
    std::string template_str;
    std::vector<std::string> classes;
    std::vector<ManifestSample> samples;
    std::string base_dir;  // set on load; resolves sample paths

    std::string class_text(int class_index) const {
        return fill_template(template_str, classes.at(size_t(class_index)));
    }

    std::string resolve(const ManifestSample& s) const {
        std::filesystem::path p(s.path);
        if (p.is_absolute() || base_dir.empty()) return s.path;
        return (std::filesystem::path(base_dir) / p).string();
    }

    void validate() const {
        if (name.empty()) throw input_error("manifest: missing dataset name");
        if (template_str.find(kClassPlaceholder) == std::string::npos)
            throw input_error("manifest: template lacks the class placeholder");
        if (classes.size() < 1) throw input_error("manifest: no classes");
        std::set<std::string> seen;
        for (const auto& c : classes)
            if (!seen.insert(c).second) throw input_error("manifest: duplicate class name '" + c + "'");
        if (samples.empty()) throw input_error("manifest: empty dataset");
        for (const auto& s : samples)
            if (s.class_index < 0 || s.class_index >= int(classes.size()))
                throw input_error("manifest: sample '" + s.path + "' has class index out of range");
    }

    static DatasetManifest load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw io_error("cannot open manifest: " + path);
        DatasetManifest m;
        m.base_dir = std::filesystem::path(path).parent_path().string();
        std::string line;
        int lineno = 0;
        bool in_samples = false;
        bool versioned = false;
        while (std::getline(is, line)) {
            ++lineno;
            std::string s = trim(line);
            if (s.empty() || s[0] == '#') continue;
            if (!versioned) {
                if (s != "duet-manifest v1")
                    throw input_error("manifest line 1: expected header 'duet-manifest v1'");
                versioned = true;
                continue;
            }
            if (!in_samples) {
                if (s == "samples") {
                    in_samples = true;
                    continue;
                }
                auto sp = s.find(' ');
                if (sp == std::string::npos)
                    throw input_error("manifest line " + std::to_string(lineno) + ": expected 'key value'");
                std::string key = s.substr(0, sp);
                std::string value = trim(s.substr(sp + 1));
                if (key == "name") m.name = value;
                else if (key == "template") m.template_str = value;
                else if (key == "class") {
                    for (const auto& c : m.classes)
                        if (c == value)
                            throw input_error("manifest line " + std::to_string(lineno) +
                                              ": duplicate class name '" + value + "'");
                    m.classes.push_back(value);
                } else
                    throw input_error("manifest line " + std::to_string(lineno) + ": unknown header key '" +
                                      key + "'");
                continue;
            }
            std::istringstream ls(s);
            ManifestSample sample;
            std::string split_tag;
            int cls = -1;
            if (!(ls >> sample.path >> cls >> split_tag))
                throw input_error("manifest line " + std::to_string(lineno) +
                                  ": expected '<path> <class index> <train|test>'");
            if (cls < 0 || cls >= int(m.classes.size()))
                throw input_error("manifest line " + std::to_string(lineno) + ": class index " +
                                  std::to_string(cls) + " out of range [0, " +
                                  std::to_string(m.classes.size()) + ")");
            sample.class_index = cls;
            if (split_tag == "train") sample.split = SampleSplit::train;
            else if (split_tag == "test") sample.split = SampleSplit::test;
            else
                throw input_error("manifest line " + std::to_string(lineno) + ": unknown split tag '" +
                                  split_tag + "'");
            m.samples.push_back(std::move(sample));
        }
        m.validate();
        return m;
    }

    void save(const std::string& path) const {
        validate();
        std::ofstream os(path);
        if (!os) throw io_error("cannot write manifest: " + path);
        os << "duet-manifest v1\n";
        os << "name " << name << "\n";
        os << "template " << template_str << "\n";
        for (const auto& c : classes) os << "class " << c << "\n";
        os << "samples\n";
        for (const auto& s : samples)
            os << s.path << " " << s.class_index << " "
               << (s.split == SampleSplit::train ? "train" : "test") << "\n";
    }
};

// ─── Evaluation splits ───────────────────────────────────────────────────────

struct EvalSplit {
    std::vector<std::string> base_classes;
    std::vector<std::string> novel_classes;
    SplitRole role = SplitRole::base_to_novel;

    bool is_base(const std::string& cls) const {
        return std::find(base_classes.begin(), base_classes.end(), cls) != base_classes.end();
    }
};

// First ceil(C/2) classes in manifest order are base, the rest novel. The
// seed is reserved for alternative policies and unused by this one.
inline EvalSplit split_base_novel(const DatasetManifest& manifest, std::uint64_t seed = 0) {
    (void)seed;
    std::int64_t c = std::int64_t(manifest.classes.size());
    if (c < 2) throw input_error("split_base_novel: need at least 2 classes");
    std::int64_t base = (c + 1) / 2;
    EvalSplit split;
    split.role = SplitRole::base_to_novel;
    split.base_classes.assign(manifest.classes.begin(), manifest.classes.begin() + base);
    split.novel_classes.assign(manifest.classes.begin() + base, manifest.classes.end());
    return split;
}

// Exactly min(shots, available) train samples per base class, sampled without
// replacement; deterministic in (seed, class order).
inline std::vector<ManifestSample> sample_few_shot(const DatasetManifest& manifest,
                                                   const EvalSplit& split, int shots,
                                                   std::uint64_t seed) {
    if (shots < 1) throw input_error("sample_few_shot: shots must be >= 1");
    std::vector<ManifestSample> out;
    for (int ci = 0; ci < int(manifest.classes.size()); ++ci) {
        const std::string& cls = manifest.classes[size_t(ci)];
        if (!split.is_base(cls)) continue;
        std::vector<ManifestSample> pool;
        for (const auto& s : manifest.samples)
            if (s.class_index == ci && s.split == SampleSplit::train) pool.push_back(s);
        if (pool.empty())
            throw input_error("sample_few_shot: base class '" + cls + "' has no train samples");
        Rng rng(derive_seed(seed, std::uint64_t(ci) + 1, 0x66737370ull));
        std::shuffle(pool.begin(), pool.end(), rng);
        int take = std::min<int>(shots, int(pool.size()));
        if (take < shots)
            warn("class '" + cls + "' has only " + std::to_string(pool.size()) + " train samples; using all of them");
        out.insert(out.end(), pool.begin(), pool.begin() + take);
    }
    return out;
}

// ─── Bundled synthetic shape dataset ─────────────────────────────────────────
// Procedurally generated colored shapes on black backgrounds; stands in for
// the ImageNet-family benchmarks at desk scale.

struct ShapesDatasetOptions {
    int num_classes = 4;  // up to 10
    int train_per_class = 32;
    int test_per_class = 32;
    int image_size = 32;
    std::uint64_t seed = 0;
    std::string template_str = "a photo of a <CLASS>";
};

namespace shapes_detail {

struct ClassDef {
    const char* name;
    double r, g, b;
};

inline const std::vector<ClassDef>& class_defs() {
    static const std::vector<ClassDef> defs = {
        {"circle", 0.95, 0.15, 0.15}, {"square", 0.15, 0.9, 0.2},   {"triangle", 0.2, 0.35, 0.95},
        {"cross", 0.95, 0.9, 0.15},   {"ring", 0.9, 0.2, 0.9},      {"stripe", 0.15, 0.9, 0.9},
        {"dot", 0.95, 0.95, 0.95},    {"frame", 0.95, 0.55, 0.15},  {"wedge", 0.55, 0.25, 0.8},
        {"bars", 0.5, 0.85, 0.45},
    };
    return defs;
}

inline bool inside_shape(int shape, double dx, double dy, double r) {
    double d2 = dx * dx + dy * dy;
    switch (shape) {
        case 0: return d2 <= r * r;                                          // circle
        case 1: return std::abs(dx) <= r && std::abs(dy) <= r;               // square
        case 2: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2;  // triangle
        case 3:                                                              // cross
            return (std::abs(dx) <= r / 3 && std::abs(dy) <= r) ||
                   (std::abs(dy) <= r / 3 && std::abs(dx) <= r);
        case 4: return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);         // ring
        case 5: return std::abs(dy) <= r / 3 && std::abs(dx) <= r;           // stripe
        case 6: return d2 <= (0.45 * r) * (0.45 * r);                        // dot
        case 7:                                                              // frame
            return std::max(std::abs(dx), std::abs(dy)) <= r &&
                   std::max(std::abs(dx), std::abs(dy)) >= 0.6 * r;
        case 8: return d2 <= r * r && dx >= 0 && dy >= 0;                    // wedge
        default:                                                             // bars
            return std::abs(dy) <= r &&
                   (std::abs(dx - r / 2) <= r / 5 || std::abs(dx + r / 2) <= r / 5);
    }
}

inline Tensor render(int shape, const ClassDef& def, int size, Rng& rng) {
    Tensor img({3, size, size});
    double s = double(size);
    double cx = s / 2 + std::uniform_real_distribution<double>(-s / 8, s / 8)(rng);
    double cy = s / 2 + std::uniform_real_distribution<double>(-s / 8, s / 8)(rng);
    double r = s * std::uniform_real_distribution<double>(0.24, 0.34)(rng);
    double shade = std::uniform_real_distribution<double>(0.8, 1.0)(rng);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (inside_shape(shape, double(x) - cx, double(y) - cy, r)) {
                img.at(0, y, x) = def.r * shade;
                img.at(1, y, x) = def.g * shade;
                img.at(2, y, x) = def.b * shade;
            }
    return quantize_image(img);
}

}  // namespace shapes_detail

// Writes images plus a manifest under dir; returns the manifest path.
inline std::string generate_shapes_dataset(const std::string& dir, const ShapesDatasetOptions& opt) {
    if (opt.num_classes < 2 || opt.num_classes > int(shapes_detail::class_defs().size()))
        throw config_error("shapes dataset supports 2..10 classes");
    std::filesystem::create_directories(std::filesystem::path(dir) / "images");

    DatasetManifest m;
    m.name = "shapes" + std::to_string(opt.num_classes);
    m.template_str = opt.template_str;
    Rng rng(derive_seed(opt.seed, 0x73686170ull));  // "shap"
    for (int c = 0; c < opt.num_classes; ++c) {
        const auto& def = shapes_detail::class_defs()[size_t(c)];
        m.classes.push_back(def.name);
        for (int i = 0; i < opt.train_per_class + opt.test_per_class; ++i) {
            Tensor img = shapes_detail::render(c, def, opt.image_size, rng);
            std::string rel = "images/" + std::string(def.name) + "_" + std::to_string(i) + ".ppm";
            write_ppm((std::filesystem::path(dir) / rel).string(), img);
            ManifestSample s;
            s.path = rel;
            s.class_index = c;
            s.split = i < opt.train_per_class ? SampleSplit::train : SampleSplit::test;
            m.samples.push_back(std::move(s));
        }
    }
    std::string manifest_path = (std::filesystem::path(dir) / "manifest.txt").string();
    m.save(manifest_path);
    return manifest_path;
}

// Stat-checked lazy image load for one sample.
inline Tensor load_sample_image(const DatasetManifest& manifest, const ManifestSample& sample) {
    std::string path = manifest.resolve(sample);
    if (!std::filesystem::exists(path)) throw io_error("sample image missing: " + path);
    return read_ppm(path);
}

}  // namespace duet
