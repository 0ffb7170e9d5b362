#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "cfx/cfsearch.hpp"

namespace cfx {

enum class EmbeddingKind { flat_pixels, codec_latent };
std::string to_string(EmbeddingKind k);
EmbeddingKind embedding_kind_from_string(const std::string& s);

// The encoding e used by sparsity and diversity.
class EmbeddingFn {
public:
    static EmbeddingFn flat_pixels() { return EmbeddingFn(EmbeddingKind::flat_pixels, nullptr); }
    static EmbeddingFn codec_latent(const LatentCodec& codec) { return EmbeddingFn(EmbeddingKind::codec_latent, &codec); }

    EmbeddingKind kind() const { return kind_; }
    std::vector<double> operator()(const Tensor& x) const;

private:
    EmbeddingFn(EmbeddingKind k, const LatentCodec* c) : kind_(k), codec_(c) {}
    EmbeddingKind kind_;
    const LatentCodec* codec_;
};

// e(x) - e(x_cf), flattened over channels and pixels.
std::vector<double> embedding_delta(const Tensor& x, const Tensor& x_cf, const EmbeddingFn& e);

// 1 - mean|d| / max|d|, and 1 when d is all zeros.
double sparsity(std::span<const double> delta);
double sparsity(const Tensor& x, const Tensor& x_cf, const EmbeddingFn& e);

// 1 - cos(d1, d2) in [0, 2]; empty when either delta is zero.
std::optional<double> diversity(std::span<const double> d1, std::span<const double> d2);

// Percentage of pairs where the surrogate prediction changed.
double nafr(std::span<const int> f_hat_factual, std::span<const int> f_hat_cf);

struct NaRate {
    std::optional<double> value;  // percentage
    std::size_t n_f_flipped = 0;
    std::size_t n_both = 0;
    std::string note;
};

// Among pairs where f changed, the percentage where f_hat changed too.
NaRate na_rate(std::span<const int> f_factual, std::span<const int> f_cf, std::span<const int> f_hat_factual,
               std::span<const int> f_hat_cf);

// 100 (acc_after - acc_before) / (1 - acc_before); empty when acc_before is 1.
std::optional<double> gain(double acc_before, double acc_after);

struct DebiasConfig {
    std::size_t epochs = 2;
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t cf_repeats = 4;  // copies of each counterfactual in the fine-tuning set
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const DebiasConfig&) const = default;
};

nlohmann::json to_json(const DebiasConfig& c);
DebiasConfig debias_config_from_json(const nlohmann::json& j);

struct DebiasResult {
    Classifier f_after;
    double acc_before = 0.0;
    double acc_after = 0.0;
    double err_before = 0.0;
    std::optional<double> gain;
    std::string gain_note;
    std::size_t n_counterfactuals = 0;
};

// Fine-tunes a copy of f on train plus the labeled counterfactuals and
// scores both models on the unpoisoned test set.
DebiasResult debias_and_gain(const Classifier& f, const LabeledDataset& train, const LabeledDataset& unpoisoned_test,
                             const Tensor& cf_images, std::span<const int> cf_labels, const DebiasConfig& cfg);

// Flipped counterfactuals labeled with the factual's true class. By default
// only the first of each set: later ones are barred from the regions the
// first one edited and tend to flip f through the true feature instead.
struct LabeledCounterfactuals {
    Tensor images;
    std::vector<int> labels;
};
LabeledCounterfactuals collect_counterfactuals(const std::vector<RunRecord>& runs, bool primary_only = true);

struct SampleRow {
    std::string id;
    std::size_t sample_index = 0;
    int label = -1;
    int target = -1;
    int f_factual = -1;
    int f_hat_factual = -1;
    std::vector<int> f_cf, f_hat_cf;
    std::vector<double> sparsity;
    std::optional<double> diversity_raw;  // first two counterfactuals
};

struct MetricsReport {
    std::size_t n_samples = 0;
    std::size_t n_counterfactuals = 0;
    std::size_t n_flipped = 0;  // counterfactuals that change f
    double flip_rate = 0.0;
    double nafr = 0.0;
    std::optional<double> na_rate;
    double sparsity = 0.0;
    std::optional<double> diversity;      // mean of per-sample values clamped to [0, 1], x100
    std::optional<double> diversity_raw;  // unclamped mean, x100, range [0, 200]
    std::size_t n_diversity = 0;
    std::optional<DebiasResult> debias;
    std::map<std::string, std::string> absent;  // metric -> reason
    std::vector<SampleRow> rows;
    std::string embedding;
};

// Pools every (sample, k) counterfactual. f_hat must be the evaluation
// surrogate. Throws ConfigError on an empty run set or on runs whose
// configs differ.
MetricsReport evaluate_run(const std::vector<RunRecord>& runs, const Classifier& f, const Classifier& f_hat,
                           const EmbeddingFn& e, std::optional<DebiasResult> debias = std::nullopt);

nlohmann::json to_json(const MetricsReport& r);
std::string metrics_csv(const MetricsReport& r);
// metrics.csv and report.json.
void write_report(const std::filesystem::path& dir, const MetricsReport& r);

}  // namespace cfx
