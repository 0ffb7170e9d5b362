#include "cfx/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cfx/archive.hpp"
#include "cfx/image_io.hpp"
#include "cfx/nn.hpp"

namespace cfx {

namespace {

constexpr const char* kMagic = "CFXDS1";

// Central square [lo, hi) holding the true feature.
std::pair<std::size_t, std::size_t> feature_box(std::size_t s) { return {s / 4, s - s / 4}; }
std::size_t patch_side(std::size_t s) { return s / 4; }

// Foreground mask (H x W) of the true feature for the given class.
std::vector<bool> feature_mask(const DatasetSpec& spec, int label) {
    const std::size_t s = spec.image_size;
    const auto [lo, hi] = feature_box(s);
    const double c = (static_cast<double>(lo) + static_cast<double>(hi) - 1.0) / 2.0;
    const double radius = static_cast<double>(hi - lo) / 2.0;
    const double arm = std::max(1.0, radius / 3.0);
    std::vector<bool> m(s * s, false);
    for (std::size_t y = lo; y < hi; ++y)
        for (std::size_t x = lo; x < hi; ++x) {
            const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
            bool on = false;
            if (spec.true_feature == TrueFeature::shape) {
                on = label == 0 ? dx * dx + dy * dy <= radius * radius * 0.8
                                : (std::abs(dx) < arm || std::abs(dy) < arm);
            } else {
                on = label == 0 ? ((y - lo) % 2 == 0) : ((x - lo) % 2 == 0);
            }
            m[y * s + x] = on;
        }
    return m;
}

}  // namespace

std::string to_string(TrueFeature f) { return f == TrueFeature::shape ? "shape" : "stripe-orientation"; }
std::string to_string(ConfoundFeature f) {
    return f == ConfoundFeature::corner_patch ? "corner-patch" : "background-tint";
}
std::string to_string(Split s) {
    switch (s) {
        case Split::all: return "all";
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "all";
}

TrueFeature true_feature_from_string(const std::string& s) {
    if (s == "shape") return TrueFeature::shape;
    if (s == "stripe-orientation") return TrueFeature::stripe_orientation;
    throw ConfigError("unknown true_feature '" + s + "'");
}

ConfoundFeature confound_feature_from_string(const std::string& s) {
    if (s == "corner-patch") return ConfoundFeature::corner_patch;
    if (s == "background-tint") return ConfoundFeature::background_tint;
    throw ConfigError("unknown confound_feature '" + s + "'");
}

Split split_from_string(const std::string& s) {
    for (auto v : {Split::all, Split::train, Split::val, Split::test})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown split '" + s + "'");
}

void DatasetSpec::validate() const {
    if (image_size < 8)
        throw ConfigError("image_size " + std::to_string(image_size) +
                          " is too small to render both the true feature and the confound (minimum 8)");
    if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
    if (n_samples < 2) throw ConfigError("n_samples must be at least 2");
    if (!(correlation >= 0.0 && correlation <= 1.0)) throw ConfigError("correlation must lie in [0, 1]");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be finite and >= 0");
    if (confound_feature == ConfoundFeature::background_tint && channels != 3)
        throw ConfigError("confound_feature background-tint requires channels = 3");
    for (double v : {background, true_contrast, confound_contrast})
        if (!std::isfinite(v) || v < 0.0) throw ConfigError("rendering levels must be finite and >= 0");
    if (background + std::max(true_contrast, confound_contrast) > 1.0)
        throw ConfigError("background plus contrast exceeds the [0, 1] pixel range");
}

nlohmann::json to_json(const DatasetSpec& s) {
    return {{"image_size", s.image_size},
            {"channels", s.channels},
            {"n_samples", s.n_samples},
            {"true_feature", to_string(s.true_feature)},
            {"confound_feature", to_string(s.confound_feature)},
            {"correlation", s.correlation},
            {"noise_std", s.noise_std},
            {"seed", s.seed},
            {"background", s.background},
            {"true_contrast", s.true_contrast},
            {"confound_contrast", s.confound_contrast}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> keys = {"image_size", "channels",         "n_samples",   "true_feature",
                                                  "confound_feature", "correlation", "noise_std",  "seed",
                                                  "background",  "true_contrast",   "confound_contrast"};
    if (!j.is_object()) throw ConfigError("dataset spec must be an object");
    for (const auto& [k, v] : j.items())
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown dataset key '" + k + "'");
    for (const auto& k : keys)
        if (!j.contains(k)) throw ConfigError("missing required field 'dataset." + k + "'");
    try {
        DatasetSpec s;
        s.image_size = j.at("image_size");
        s.channels = j.at("channels");
        s.n_samples = j.at("n_samples");
        s.true_feature = true_feature_from_string(j.at("true_feature"));
        s.confound_feature = confound_feature_from_string(j.at("confound_feature"));
        s.correlation = j.at("correlation");
        s.noise_std = j.at("noise_std");
        s.seed = j.at("seed");
        s.background = j.at("background");
        s.true_contrast = j.at("true_contrast");
        s.confound_contrast = j.at("confound_contrast");
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid dataset field: ") + e.what());
    }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows, Split s) const {
    LabeledDataset out;
    out.spec = spec;
    out.split = s;
    out.images = images.gather(rows);
    for (auto r : rows) {
        out.labels.push_back(labels[r]);
        out.confound_flags.push_back(confound_flags[r]);
    }
    return out;
}

std::vector<bool> confound_region(const DatasetSpec& spec) {
    const std::size_t s = spec.image_size;
    std::vector<bool> m(s * s, spec.confound_feature == ConfoundFeature::background_tint);
    if (spec.confound_feature == ConfoundFeature::corner_patch)
        for (std::size_t y = 0; y < patch_side(s); ++y)
            for (std::size_t x = 0; x < patch_side(s); ++x) m[y * s + x] = true;
    return m;
}

Tensor render_true_feature(const DatasetSpec& spec, int label) {
    const std::size_t s = spec.image_size, plane = s * s;
    Tensor img({spec.channels, s, s}, spec.background);
    const auto fm = feature_mask(spec, label);
    for (std::size_t c = 0; c < spec.channels; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            if (fm[i]) img.data[c * plane + i] += spec.true_contrast;
    return img;
}

int infer_true_label(const DatasetSpec& spec, std::span<const double> image) {
    const std::size_t s = spec.image_size, plane = s * s;
    const auto [lo, hi] = feature_box(s);
    const double area = static_cast<double>((hi - lo) * (hi - lo));
    // Box-mean-centred comparison so a global tint does not bias the match.
    auto box_mean = [&](std::span<const double> img, std::size_t c) {
        double m = 0.0;
        for (std::size_t y = lo; y < hi; ++y)
            for (std::size_t x = lo; x < hi; ++x) m += img[c * plane + y * s + x];
        return m / area;
    };
    double best = 0.0;
    int best_label = 0;
    for (int label = 0; label < static_cast<int>(kNumClasses); ++label) {
        const Tensor tmpl = render_true_feature(spec, label);
        double sse = 0.0;
        for (std::size_t c = 0; c < spec.channels; ++c) {
            const double mi = box_mean(image, c), mt = box_mean(tmpl.data, c);
            for (std::size_t y = lo; y < hi; ++y)
                for (std::size_t x = lo; x < hi; ++x) {
                    const std::size_t k = c * plane + y * s + x;
                    const double d = (image[k] - mi) - (tmpl.data[k] - mt);
                    sse += d * d;
                }
        }
        if (label == 0 || sse < best) {
            best = sse;
            best_label = label;
        }
    }
    return best_label;
}

LabeledDataset synthesize(const DatasetSpec& spec, Tensor* clean) {
    spec.validate();
    const std::size_t n = spec.n_samples, s = spec.image_size, plane = s * s, c = spec.channels;
    Rng rng(spec.seed);

    LabeledDataset ds;
    ds.spec = spec;
    ds.labels.resize(n);
    std::bernoulli_distribution coin(0.5);
    for (auto& l : ds.labels) l = coin(rng) ? 1 : 0;

    // Exactly round(correlation * n) agreeing samples, placed at random.
    const auto n_agree = static_cast<std::size_t>(std::llround(spec.correlation * static_cast<double>(n)));
    ds.confound_flags.assign(n, false);
    std::fill_n(ds.confound_flags.begin(), n_agree, true);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<bool> shuffled(n);
    for (std::size_t i = 0; i < n; ++i) shuffled[perm[i]] = ds.confound_flags[i];
    ds.confound_flags = shuffled;

    const auto region = confound_region(spec);
    const Tensor templates[2] = {render_true_feature(spec, 0), render_true_feature(spec, 1)};
    ds.images = Tensor({n, c, s, s});
    std::normal_distribution<double> noise(0.0, 1.0);
    if (clean) *clean = Tensor({n, c, s, s});
    for (std::size_t i = 0; i < n; ++i) {
        auto img = ds.images.sample(i);
        const Tensor& t = templates[ds.labels[i]];
        std::copy(t.data.begin(), t.data.end(), img.begin());
        if (ds.confound_present(i)) {
            if (spec.confound_feature == ConfoundFeature::corner_patch) {
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t k = 0; k < plane; ++k)
                        if (region[k]) img[ch * plane + k] = spec.background + spec.confound_contrast;
            } else {
                for (std::size_t k = 0; k < plane; ++k) img[k] += spec.confound_contrast / 2.0;
            }
        }
        if (clean) std::copy(img.begin(), img.end(), clean->sample(i).begin());
        for (auto& v : img) v = std::clamp(v + spec.noise_std * noise(rng), 0.0, 1.0);
    }
    return ds;
}

DatasetSplits split(const LabeledDataset& ds, std::array<double, 3> fractions) {
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

    const std::size_t n = ds.size();
    std::vector<std::vector<std::size_t>> by_class(kNumClasses);
    for (std::size_t i = 0; i < n; ++i) by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);

    // Global split sizes by largest remainder.
    auto apportion = [](std::size_t total, const std::array<double, 3>& f) {
        std::array<std::size_t, 3> out{};
        std::array<double, 3> rem{};
        std::size_t used = 0;
        for (int k = 0; k < 3; ++k) {
            const double q = f[k] * static_cast<double>(total);
            out[k] = static_cast<std::size_t>(std::floor(q + 1e-9));
            rem[k] = q - static_cast<double>(out[k]);
            used += out[k];
        }
        while (used < total) {
            int best = 0;
            for (int k = 1; k < 3; ++k)
                if (rem[k] > rem[best]) best = k;
            ++out[best];
            rem[best] = -1.0;
            ++used;
        }
        return out;
    };
    const auto global = apportion(n, fractions);

    // Per-class floors, then hand out the leftovers by fractional part while
    // keeping both per-class and per-split totals exact.
    std::vector<std::array<std::size_t, 3>> counts(kNumClasses);
    std::array<std::size_t, 3> split_left = global;
    std::vector<std::size_t> class_left(kNumClasses);
    struct Cand {
        double frac;
        std::size_t cls;
        int part;
    };
    std::vector<Cand> cands;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t used = 0;
        for (int k = 0; k < 3; ++k) {
            const double q = fractions[k] * static_cast<double>(by_class[c].size());
            counts[c][k] = std::min(static_cast<std::size_t>(std::floor(q + 1e-9)), split_left[k]);
            split_left[k] -= counts[c][k];
            used += counts[c][k];
            cands.push_back({q - std::floor(q + 1e-9), c, k});
        }
        class_left[c] = by_class[c].size() - used;
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.frac > b.frac; });
    for (int pass = 0; pass < 2; ++pass)
        for (const auto& cand : cands)
            while (class_left[cand.cls] > 0 && split_left[cand.part] > 0 && (pass == 1 || cand.frac > 0.0)) {
                ++counts[cand.cls][cand.part];
                --class_left[cand.cls];
                --split_left[cand.part];
                if (pass == 0) break;
            }

    std::array<std::vector<std::size_t>, 3> rows;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t at = 0;
        for (int k = 0; k < 3; ++k)
            for (std::size_t j = 0; j < counts[c][k]; ++j) rows[k].push_back(by_class[c][at++]);
    }
    for (auto& r : rows) std::sort(r.begin(), r.end());
    return {ds.subset(rows[0], Split::train), ds.subset(rows[1], Split::val), ds.subset(rows[2], Split::test)};
}

std::vector<std::uint8_t> serialize(const LabeledDataset& ds) {
    ArchiveWriter w(kMagic, {{"spec", to_json(ds.spec)}, {"split", to_string(ds.split)}, {"count", ds.size()}});
    w.add("images", ds.images);
    std::vector<std::int32_t> labels(ds.labels.begin(), ds.labels.end());
    w.add("labels", std::span<const std::int32_t>(labels));
    std::vector<std::uint8_t> flags(ds.confound_flags.begin(), ds.confound_flags.end());
    w.add("confound_flags", std::span<const std::uint8_t>(flags));
    return w.bytes();
}

void save(const LabeledDataset& ds, const std::filesystem::path& path) {
    const auto bytes = serialize(ds);
    write_file_atomic(path, bytes);
}

LabeledDataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
    const auto r = ArchiveReader::parse(bytes, kMagic);
    LabeledDataset ds;
    try {
        ds.spec = dataset_spec_from_json(r.header().at("spec"));
        ds.split = split_from_string(r.header().at("split"));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("dataset header incomplete: ") + e.what(), 0);
    }
    ds.images = r.tensor("images");
    for (auto v : r.ints("labels")) ds.labels.push_back(v);
    for (auto v : r.bytes("confound_flags")) ds.confound_flags.push_back(v != 0);
    if (ds.images.batch() != ds.labels.size() || ds.labels.size() != ds.confound_flags.size())
        throw IntegrityError("dataset arrays disagree on sample count", 0);
    return ds;
}

LabeledDataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file_bytes(path)); }

void export_pngs(const LabeledDataset& ds, const std::filesystem::path& dir, std::size_t count) {
    for (std::size_t i = 0; i < std::min(count, ds.size()); ++i)
        write_png(dir / ("sample_" + std::to_string(i) + "_y" + std::to_string(ds.labels[i]) + ".png"), ds.image(i));
}

}  // namespace cfx
