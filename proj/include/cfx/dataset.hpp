#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cfx/tensor.hpp"
#include "json.hpp"

namespace cfx {

enum class TrueFeature { shape, stripe_orientation };
enum class ConfoundFeature { corner_patch, background_tint };
enum class Split { all, train, val, test };

std::string to_string(TrueFeature f);
std::string to_string(ConfoundFeature f);
std::string to_string(Split s);
TrueFeature true_feature_from_string(const std::string& s);
ConfoundFeature confound_feature_from_string(const std::string& s);
Split split_from_string(const std::string& s);

inline constexpr std::size_t kNumClasses = 2;

// Procedural two-class image task. Class 0 is a disk (or horizontal
// stripes), class 1 a cross (or vertical stripes). The confound is a bright
// top-left corner patch (or a red tint, RGB only) that is present on class-1
// images and absent on class-0 images whenever it "agrees" with the class.
struct DatasetSpec {
    std::size_t image_size = 16;
    std::size_t channels = 1;
    std::size_t n_samples = 2000;
    TrueFeature true_feature = TrueFeature::shape;
    ConfoundFeature confound_feature = ConfoundFeature::corner_patch;
    double correlation = 0.95;
    double noise_std = 0.15;
    std::uint64_t seed = 0;
    double background = 0.2;
    double true_contrast = 0.1;
    double confound_contrast = 0.6;

    // Throws ConfigError on any invalid field or combination.
    void validate() const;
    bool operator==(const DatasetSpec&) const = default;
};

nlohmann::json to_json(const DatasetSpec& s);
// Strict: unknown keys and missing keys are ConfigErrors.
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

struct LabeledDataset {
    DatasetSpec spec;
    Split split = Split::all;
    Tensor images;                    // (N, C, H, W) in [0, 1]
    std::vector<int> labels;          // in {0, 1}
    std::vector<bool> confound_flags; // confound agrees with the label

    std::size_t size() const { return labels.size(); }
    // Whether the confound is rendered on sample i.
    bool confound_present(std::size_t i) const { return confound_flags[i] == (labels[i] == 1); }
    LabeledDataset subset(std::span<const std::size_t> rows, Split s) const;
    Tensor image(std::size_t i) const { return images.slice(i, 1); }

    bool operator==(const LabeledDataset&) const = default;
};

// `clean`, when given, receives the images before noise is added.
LabeledDataset synthesize(const DatasetSpec& spec, Tensor* clean = nullptr);

// Noise-free rendering of the true feature for a class on a plain background.
Tensor render_true_feature(const DatasetSpec& spec, int label);
// Label recovered by nearest template over the true-feature region.
int infer_true_label(const DatasetSpec& spec, std::span<const double> image);

// Pixel region (row-major, H x W) the confound occupies.
std::vector<bool> confound_region(const DatasetSpec& spec);

struct DatasetSplits {
    LabeledDataset train, val, test;
};

// Stratified by class; each class keeps its original order within a split.
DatasetSplits split(const LabeledDataset& ds, std::array<double, 3> fractions);

void save(const LabeledDataset& ds, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize(const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& path);
LabeledDataset deserialize_dataset(std::span<const std::uint8_t> bytes);

// Writes the first `count` images as sample_<i>_y<label>.png.
void export_pngs(const LabeledDataset& ds, const std::filesystem::path& dir, std::size_t count);

}  // namespace cfx
