#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "cfx/nn.hpp"

namespace cfx {

enum class ScheduleKind { rectified_flow, ddpm };
std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

// Marginal coefficients z_t = a(t) z_0 + b(t) eps over continuous t in [0, 1].
// Rectified flow: a = 1 - t, b = t. DDPM: a = sqrt(abar), b = sqrt(1 - abar),
// with abar tabulated on the step grid n = t * steps (abar at n = 0 is 1) and
// linearly interpolated between grid points.
class TrajectorySchedule {
public:
    static TrajectorySchedule rectified_flow(std::size_t steps);
    static TrajectorySchedule ddpm(std::size_t steps, double beta_start = 1e-4, double beta_end = 2e-2);

    ScheduleKind kind() const { return kind_; }
    std::size_t steps() const { return steps_; }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }
    const std::vector<double>& betas() const { return betas_; }
    // alpha_bars()[n] for n = 0..steps.
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }

    void check_time(double t) const;
    double alpha_bar(double t) const;
    double a(double t) const;
    double b(double t) const;

    nlohmann::json describe() const;
    static TrajectorySchedule from_description(const nlohmann::json& j);

    bool operator==(const TrajectorySchedule&) const = default;

private:
    ScheduleKind kind_ = ScheduleKind::rectified_flow;
    std::size_t steps_ = 1;
    double beta_start_ = 0.0, beta_end_ = 0.0;
    std::vector<double> betas_, alpha_bars_;
};

// Returns a(t) z0 + b(t) eps.
Tensor interpolate(const Tensor& z0, const Tensor& eps, double t, const TrajectorySchedule& sched);

// Anything predicting the transport target: the velocity eps - z0 for
// rectified flow, the noise eps for DDPM.
class TransportField {
public:
    virtual ~TransportField() = default;
    virtual ScheduleKind target() const = 0;
    virtual Tensor predict(const Tensor& z, std::span<const double> t) const = 0;
    Tensor predict(const Tensor& z, double t) const;
};

// Exact field for a data distribution concentrated on one latent. Used as
// the analytic oracle in tests.
class PointMassField : public TransportField {
public:
    PointMassField(Tensor center, TrajectorySchedule sched);
    ScheduleKind target() const override { return sched_.kind(); }
    Tensor predict(const Tensor& z, std::span<const double> t) const override;

private:
    Tensor center_;  // one sample, broadcast over the batch
    TrajectorySchedule sched_;
};

struct GeneratorConfig {
    std::size_t conv_channels = 8;
    std::size_t hidden_units = 256;
    std::size_t train_steps = 1500;
    std::size_t batch_size = 32;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;

    bool operator==(const GeneratorConfig&) const = default;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

inline constexpr std::size_t kTimeFeatures = 4;

// Convolutional stem plus dense head. The time t enters as kTimeFeatures
// sinusoidal channels concatenated to the latent.
class VelocityModel : public TransportField {
public:
    VelocityModel() = default;
    VelocityModel(Shape latent_shape, TrajectorySchedule sched, const GeneratorConfig& cfg);

    ScheduleKind target() const override { return sched_.kind(); }
    using TransportField::predict;
    Tensor predict(const Tensor& z, std::span<const double> t) const override;

    const TrajectorySchedule& schedule() const { return sched_; }
    const Shape& latent_shape() const { return latent_shape_; }
    const std::vector<double>& loss_history() const { return loss_history_; }
    const nn::Network& network() const { return net_; }

    std::vector<std::uint8_t> serialize() const;
    static VelocityModel deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static VelocityModel load(const std::filesystem::path& path);

    bool operator==(const VelocityModel& o) const {
        return latent_shape_ == o.latent_shape_ && sched_ == o.sched_ && cfg_ == o.cfg_ && net_ == o.net_ &&
               loss_history_ == o.loss_history_;
    }

private:
    friend VelocityModel train_generator(const Tensor&, const TrajectorySchedule&, const GeneratorConfig&);

    Tensor embed(const Tensor& z, std::span<const double> t) const;

    Shape latent_shape_;
    TrajectorySchedule sched_;
    GeneratorConfig cfg_;
    nn::Network net_;
    std::vector<double> loss_history_;
};

// One Monte-Carlo estimate of the flow-matching (rectified flow) or
// noise-regression (DDPM) objective: per-element mean squared error over
// one (t, eps) draw per latent.
double cfm_loss(const TransportField& model, const Tensor& z0, const TrajectorySchedule& sched, Rng& rng);

VelocityModel train_generator(const Tensor& latents, const TrajectorySchedule& sched, const GeneratorConfig& cfg);

// Reverse-time transport from t_from down to t_to < t_from. Rectified flow
// takes one Euler step z + (t_to - t_from) v; DDPM samples the posterior
// q(z_to | z_from, z0_hat). The model output is stored in *prediction.
Tensor reverse_step(const TransportField& model, const Tensor& z, double t_from, double t_to,
                    const TrajectorySchedule& sched, Rng& rng, Tensor* prediction = nullptr);

// Starts from standard normal noise at t = 1 and takes sched.steps() uniform
// reverse steps to t = 0.
Tensor sample(const TransportField& model, const TrajectorySchedule& sched, std::size_t n, const Shape& latent_shape,
              Rng& rng);

// One-step clean-latent estimate: z - t v (rectified flow) or
// (z - sqrt(1 - abar) eps) / sqrt(abar) (DDPM).
Tensor denoise_estimate(const TransportField& model, const Tensor& z, double t, const TrajectorySchedule& sched);
Tensor denoise_from_prediction(const Tensor& z, const Tensor& prediction, double t, const TrajectorySchedule& sched);

}  // namespace cfx
