#pragma once

#include <filesystem>
#include <vector>

#include "cfx/classifiers.hpp"
#include "cfx/codec.hpp"
#include "cfx/generator.hpp"

namespace cfx {

using Mask = std::vector<bool>;  // row-major H x W, pixel resolution

struct GuidanceConfig {
    double beta = 6.0;
    double lambda_l1 = 0.002;
    double lambda_l2 = 0.02;
    double eta = 0.1;
    std::size_t steps = 20;
    double start_time = 0.3;
    double tau_inpaint = 0.2;
    double psi_kernel_sigma = 1.0;
    std::size_t max_counterfactuals = 2;
    bool phase1 = true;

    void validate() const;
    bool operator==(const GuidanceConfig&) const = default;
};

nlohmann::json to_json(const GuidanceConfig& c);
GuidanceConfig guidance_config_from_json(const nlohmann::json& j);

// lambda_l1 sign(d) + lambda_l2 d / |d|_2 with d = z_t - z_0, per sample;
// both terms are 0 where d is 0.
Tensor proximity_gradient(const Tensor& zt, const Tensor& z0, double lambda_l1, double lambda_l2);

struct GradientTerms {
    Tensor total;
    Tensor guidance;   // beta * g_smooth(z_hat)
    Tensor proximity;
    Tensor z_hat;
    double guidance_loss = 0.0;  // beta * l
    double l1 = 0.0;             // lambda_l1 |z_t - z_0|_1
    double l2 = 0.0;             // lambda_l2 |z_t - z_0|_2
};

// Guidance evaluated at the one-step denoised estimate, proximity at z_t.
GradientTerms total_gradient(const GradientSource& src, const LatentCodec& codec, const Tensor& zt, const Tensor& z0,
                             double t, const TransportField& model, const TrajectorySchedule& sched,
                             const GuidanceConfig& cfg, std::span<const int> targets, Rng& rng);

// Psi: channel-mean |a - b| blurred by a Gaussian of std sigma. One image.
std::vector<double> residual_map(const Tensor& a, const Tensor& b, double sigma);

// True where Psi(x_0, x_hat) < tau.
Mask phase1_mask(const Tensor& x0, const Tensor& x_hat, double tau, double sigma);

// Average-pools the pixel mask by `factor` and thresholds at 0.5.
Mask downsample_mask(const Mask& m, std::size_t height, std::size_t width, std::size_t factor);

// z_t where the mask is false, z_0 where it is true (after downsampling to
// the latent grid and broadcasting over latent channels).
Tensor inpaint_latent(const Tensor& zt, const Tensor& z0, const Mask& mask, const LatentCodec& codec);

struct Exclusion {
    std::vector<double> cumulative;  // C = sum_j Psi(x_cf_j, x_0)
    Mask editable;                   // C < tau
};

Exclusion exclusion_mask(const std::vector<Tensor>& previous_cfs, const Tensor& x0, double tau, double sigma);

struct TraceRow {
    std::size_t step = 0;
    double guidance = 0.0, l1 = 0.0, l2 = 0.0, total = 0.0;
};

struct Counterfactual {
    Tensor image;   // (1, C, H, W) in [0, 1]
    Tensor latent;  // final latent
    bool flipped = false;
    int f_prediction = -1;
    int f_hat_prediction = -1;
    Mask editable;         // fixed mask this generation ran under
    Mask last_restore;     // effective restore mask of the final step
    Mask always_restored;  // restored at every step
    std::vector<TraceRow> trace;
};

struct Models {
    const TransportField& generator;
    const TrajectorySchedule& schedule;
    const LatentCodec& codec;
    const Classifier& f;
    const Classifier& f_hat;
    const GradientSource& source;
};

// One guided reverse-time run from start_time to 0. `editable` is true where
// edits are allowed; each step restores z_0 wherever the Phase I mask holds
// or the region is not editable.
Counterfactual generate_counterfactual(const Tensor& x0, int target, const Models& m, const GuidanceConfig& cfg,
                                       const Mask& editable, std::uint64_t seed);

struct DiverseSet {
    std::vector<Counterfactual> counterfactuals;
    std::vector<Exclusion> exclusions;  // the fixed mask used for each k
};

// Generations k = 1..K; the k-th is confined to pixels whose cumulative
// residual over the previous counterfactuals stays below tau. All
// generations share the seed, so the exclusion is the only thing that
// differs between them.
DiverseSet generate_diverse_set(const Tensor& x0, int target, const Models& m, const GuidanceConfig& cfg,
                                std::size_t k, std::uint64_t seed);

struct RunRecord {
    std::string id;
    std::size_t sample_index = 0;
    int label = -1;
    int target = -1;
    int f_factual = -1;
    int f_hat_factual = -1;
    std::uint64_t seed = 0;
    std::string source;
    Tensor factual;
    DiverseSet set;
    nlohmann::json config;  // filled by read_run from config.json
};

// runs/<id>/: config.json, trace.csv, factual.png, cf_<k>.png, mask_<k>.png,
// grid.png, result.json and counterfactuals.cfxrun.
void write_run(const std::filesystem::path& dir, const RunRecord& run, const nlohmann::json& config);
RunRecord read_run(const std::filesystem::path& dir);

}  // namespace cfx
