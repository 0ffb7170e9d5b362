#pragma once

#include <array>
#include <filesystem>
#include <optional>

#include "cfx/metrics.hpp"

namespace cfx {

inline constexpr int kConfigVersion = 1;

struct CodecChoice {
    CodecKind kind = CodecKind::identity;
    AutoencoderConfig autoencoder;
};

struct ScheduleChoice {
    ScheduleKind kind = ScheduleKind::rectified_flow;
    std::size_t steps = 20;
};

struct ExplainOptions {
    Split split = Split::test;
    std::size_t first = 0;  // index into the split
    std::size_t count = 10;
    int target = -1;        // -1: the class f does not predict
};

// Balanced-confound set the gain is measured on.
struct UnpoisonedSpec {
    std::size_t n_samples = 1000;
    double correlation = 0.5;
    std::uint64_t seed_offset = 5000;
};

struct ExperimentConfig {
    int version = kConfigVersion;
    std::uint64_t seed = 0;
    DatasetSpec dataset;
    std::array<double, 3> splits{0.8, 0.1, 0.1};
    CodecChoice codec;
    ScheduleChoice schedule;
    GeneratorConfig generator;
    ClassifierConfig classifier;
    SurrogateSpec surrogate;
    std::uint64_t eval_surrogate_seed_offset = 1000;
    GuidanceConfig guidance;
    GradientSourceSpec gradient_source;
    ExplainOptions explain;
    EmbeddingKind embedding = EmbeddingKind::flat_pixels;
    DebiasConfig debias;
    UnpoisonedSpec unpoisoned;
    std::vector<std::string> ablate_sources{"vanilla", "smoothgrad", "integrated_gradients", "surrogate"};
};

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

nlohmann::json to_json(const ExperimentConfig& c);
// Every key is required and unknown keys are rejected. Errors name the
// offending field.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Sets the master seed and every component seed to `seed`.
ExperimentConfig with_seed(ExperimentConfig c, std::uint64_t seed);

// Counterfactual noise seed of one sample.
std::uint64_t sample_seed(std::uint64_t master, std::size_t sample_index);

// One experiment's artifacts under a single output directory.
class Workspace {
public:
    Workspace(ExperimentConfig cfg, std::filesystem::path out);

    const ExperimentConfig& config() const { return cfg_; }
    const std::filesystem::path& out() const { return out_; }
    std::filesystem::path path(const std::string& name) const { return out_ / name; }

    LabeledDataset synth() const;
    void train_codec() const;
    void train_generator() const;
    void train_classifier() const;
    // Writes both the generation surrogate and the evaluation surrogate.
    void train_surrogate() const;

    // Missing artifacts are ConfigErrors naming the stage that makes them.
    LabeledDataset dataset() const;
    DatasetSplits splits() const;
    LatentCodec codec() const;
    VelocityModel generator() const;
    Classifier f() const;
    Classifier f_hat() const;
    Classifier f_hat_eval() const;
    LabeledDataset unpoisoned_test() const;

    // Explains cfg.explain samples into <runs_dir>/<id>/.
    std::vector<RunRecord> explain(const GradientSourceSpec& source, const std::filesystem::path& runs_dir,
                                   std::size_t jobs = 1) const;
    std::vector<RunRecord> explain(std::size_t jobs = 1) const {
        return explain(cfg_.gradient_source, path("runs"), jobs);
    }

    // metrics.csv and report.json in `dest`, folding in debias.json when
    // present in the output directory.
    MetricsReport evaluate(const std::filesystem::path& runs_dir, const std::filesystem::path& dest) const;
    // Fine-tunes f on the flipped counterfactuals; writes f_debiased.cfxclf and debias.json.
    DebiasResult debias(const std::filesystem::path& runs_dir) const;
    // ablation.csv with one row per source in cfg.ablate_sources.
    std::string ablate(std::size_t jobs = 1) const;
    // report.md summarizing whatever stages have run.
    std::string report() const;

private:
    void snapshot() const;

    ExperimentConfig cfg_;
    std::filesystem::path out_;
};

std::vector<RunRecord> read_runs(const std::filesystem::path& runs_dir);

// Writes a one-column-per-curve CSV, rows padded with empty cells.
void write_curves_csv(const std::filesystem::path& path, const std::map<std::string, std::vector<double>>& curves);

}  // namespace cfx
