#include "cfx/generator.hpp"

#include <cmath>
#include <numbers>

#include "cfx/archive.hpp"

namespace cfx {

namespace {

constexpr const char* kMagic = "CFXGEN1";

Tensor standard_normal(const Shape& shape, Rng& rng) {
    Tensor t(shape);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : t.data) v = nd(rng);
    return t;
}

void require_finite(const Tensor& t, const char* what, std::size_t step) {
    if (!all_finite(t.data)) throw NumericError(std::string(what) + " produced a non-finite value", step);
}

}  // namespace

std::string to_string(ScheduleKind k) { return k == ScheduleKind::rectified_flow ? "rectified_flow" : "ddpm"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "rectified_flow") return ScheduleKind::rectified_flow;
    if (s == "ddpm") return ScheduleKind::ddpm;
    throw ConfigError("unknown schedule kind '" + s + "'");
}

TrajectorySchedule TrajectorySchedule::rectified_flow(std::size_t steps) {
    if (steps < 1) throw ConfigError("schedule needs at least one step");
    TrajectorySchedule s;
    s.kind_ = ScheduleKind::rectified_flow;
    s.steps_ = steps;
    return s;
}

TrajectorySchedule TrajectorySchedule::ddpm(std::size_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("schedule needs at least one step");
    if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0))
        throw ConfigError("ddpm betas must lie in (0, 1)");
    TrajectorySchedule s;
    s.kind_ = ScheduleKind::ddpm;
    s.steps_ = steps;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.alpha_bars_.push_back(1.0);
    for (std::size_t n = 1; n <= steps; ++n) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(n - 1) / static_cast<double>(steps - 1);
        const double beta = beta_start + frac * (beta_end - beta_start);
        s.betas_.push_back(beta);
        s.alpha_bars_.push_back(s.alpha_bars_.back() * (1.0 - beta));
    }
    return s;
}

void TrajectorySchedule::check_time(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time " + std::to_string(t) + " outside [0, 1]");
}

double TrajectorySchedule::alpha_bar(double t) const {
    check_time(t);
    if (kind_ == ScheduleKind::rectified_flow) {
        const double a = 1.0 - t;
        return a * a;
    }
    const double x = t * static_cast<double>(steps_);
    const auto lo = static_cast<std::size_t>(std::floor(x));
    if (lo >= steps_) return alpha_bars_.back();
    const double w = x - static_cast<double>(lo);
    if (w == 0.0) return alpha_bars_[lo];
    return (1.0 - w) * alpha_bars_[lo] + w * alpha_bars_[lo + 1];
}

double TrajectorySchedule::a(double t) const {
    check_time(t);
    return kind_ == ScheduleKind::rectified_flow ? 1.0 - t : std::sqrt(alpha_bar(t));
}

double TrajectorySchedule::b(double t) const {
    check_time(t);
    return kind_ == ScheduleKind::rectified_flow ? t : std::sqrt(1.0 - alpha_bar(t));
}

nlohmann::json TrajectorySchedule::describe() const {
    nlohmann::json j = {{"kind", to_string(kind_)}, {"steps", steps_}};
    if (kind_ == ScheduleKind::ddpm) {
        j["beta_start"] = beta_start_;
        j["beta_end"] = beta_end_;
    }
    return j;
}

TrajectorySchedule TrajectorySchedule::from_description(const nlohmann::json& j) {
    try {
        const auto kind = schedule_kind_from_string(j.at("kind"));
        const std::size_t steps = j.at("steps");
        if (kind == ScheduleKind::rectified_flow) return rectified_flow(steps);
        return ddpm(steps, j.value("beta_start", 1e-4), j.value("beta_end", 2e-2));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid schedule descriptor: ") + e.what());
    }
}

Tensor interpolate(const Tensor& z0, const Tensor& eps, double t, const TrajectorySchedule& sched) {
    require_same_shape(z0, eps, "interpolate");
    const double a = sched.a(t), b = sched.b(t);
    Tensor out(z0.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
    return out;
}

Tensor TransportField::predict(const Tensor& z, double t) const {
    const std::vector<double> ts(z.batch(), t);
    return predict(z, std::span<const double>(ts));
}

PointMassField::PointMassField(Tensor center, TrajectorySchedule sched)
    : center_(std::move(center)), sched_(std::move(sched)) {
    if (center_.rank() == 3) center_ = center_.reshaped({1, center_.dim(0), center_.dim(1), center_.dim(2)});
}

Tensor PointMassField::predict(const Tensor& z, std::span<const double> t) const {
    if (z.sample_size() != center_.size()) throw ShapeError("point-mass field: latent shape mismatch");
    Tensor out(z.shape);
    const std::size_t ss = z.sample_size();
    for (std::size_t n = 0; n < z.batch(); ++n) {
        const double b = sched_.b(t[n]), a = sched_.a(t[n]);
        if (b == 0.0) continue;  // z equals the center; any finite prediction works
        for (std::size_t i = 0; i < ss; ++i) {
            const double eps = (z.data[n * ss + i] - a * center_.data[i]) / b;
            out.data[n * ss + i] =
                sched_.kind() == ScheduleKind::rectified_flow ? eps - center_.data[i] : eps;
        }
    }
    return out;
}

nlohmann::json to_json(const GeneratorConfig& c) {
    return {{"conv_channels", c.conv_channels}, {"hidden_units", c.hidden_units},
            {"train_steps", c.train_steps},     {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate}, {"seed", c.seed}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    const auto ref = to_json(c);
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ConfigError("unknown generator key '" + k + "'");
    try {
        c.conv_channels = j.value("conv_channels", c.conv_channels);
        c.hidden_units = j.value("hidden_units", c.hidden_units);
        c.train_steps = j.value("train_steps", c.train_steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid generator field: ") + e.what());
    }
    return c;
}

VelocityModel::VelocityModel(Shape latent_shape, TrajectorySchedule sched, const GeneratorConfig& cfg)
    : latent_shape_(std::move(latent_shape)), sched_(std::move(sched)), cfg_(cfg) {
    if (latent_shape_.size() != 3) throw ShapeError("latent shape must be (c, h, w)");
    const std::size_t c = latent_shape_[0], h = latent_shape_[1], w = latent_shape_[2];
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("velocity model needs even latent height and width");
    const std::size_t ch = cfg.conv_channels;
    const auto smooth = nn::Activation::softplus;
    net_ = nn::Network({c + kTimeFeatures, h, w},
                       {nn::conv(c + kTimeFeatures, ch), nn::act(smooth), nn::conv(ch, 2 * ch, 2), nn::act(smooth),
                        nn::reshape({2 * ch * (h / 2) * (w / 2)}), nn::dense(2 * ch * (h / 2) * (w / 2), cfg.hidden_units),
                        nn::act(smooth), nn::dense(cfg.hidden_units, c * h * w), nn::reshape(latent_shape_)});
    Rng rng(cfg.seed);
    net_.init(rng);
}

Tensor VelocityModel::embed(const Tensor& z, std::span<const double> t) const {
    if (z.rank() != 4 || z.sample_shape() != latent_shape_)
        throw ShapeError("velocity model input " + to_string(z.shape) + " does not match latent shape " +
                         to_string(latent_shape_));
    if (t.size() != z.batch()) throw ShapeError("one time value per latent is required");
    const std::size_t c = latent_shape_[0], plane = latent_shape_[1] * latent_shape_[2];
    Tensor x({z.batch(), c + kTimeFeatures, latent_shape_[1], latent_shape_[2]});
    for (std::size_t n = 0; n < z.batch(); ++n) {
        sched_.check_time(t[n]);
        double* dst = x.data.data() + n * (c + kTimeFeatures) * plane;
        std::copy_n(z.data.data() + n * c * plane, c * plane, dst);
        const double phase = std::numbers::pi * t[n];
        const double feats[kTimeFeatures] = {std::sin(phase / 2), std::cos(phase / 2), std::sin(phase),
                                             std::cos(phase)};
        for (std::size_t f = 0; f < kTimeFeatures; ++f) std::fill_n(dst + (c + f) * plane, plane, feats[f]);
    }
    return x;
}

Tensor VelocityModel::predict(const Tensor& z, std::span<const double> t) const { return net_.forward(embed(z, t)); }

std::vector<std::uint8_t> VelocityModel::serialize() const {
    ArchiveWriter w(kMagic, {{"schedule", sched_.describe()},
                             {"latent_shape", latent_shape_},
                             {"config", to_json(cfg_)},
                             {"architecture", net_.describe()},
                             {"loss_history", loss_history_}});
    const auto ps = net_.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) w.add("param." + std::to_string(i), *ps[i]);
    return w.bytes();
}

VelocityModel VelocityModel::deserialize(std::span<const std::uint8_t> bytes) {
    const auto r = ArchiveReader::parse(bytes, kMagic);
    VelocityModel m;
    try {
        const auto& h = r.header();
        m.sched_ = TrajectorySchedule::from_description(h.at("schedule"));
        m.latent_shape_ = h.at("latent_shape").get<Shape>();
        m.cfg_ = generator_config_from_json(h.at("config"));
        m.net_ = nn::Network::from_description(h.at("architecture"));
        m.loss_history_ = h.at("loss_history").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("generator header incomplete: ") + e.what(), 0);
    }
    auto ps = m.net_.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = r.tensor("param." + std::to_string(i));
    return m;
}

void VelocityModel::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
VelocityModel VelocityModel::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

namespace {

struct TrainingDraw {
    Tensor zt, target;
    std::vector<double> t;
};

TrainingDraw draw(const Tensor& z0, const TrajectorySchedule& sched, Rng& rng) {
    TrainingDraw d;
    const Tensor eps = standard_normal(z0.shape, rng);
    d.zt = Tensor(z0.shape);
    d.target = Tensor(z0.shape);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> step(1, sched.steps());
    const std::size_t ss = z0.sample_size();
    for (std::size_t n = 0; n < z0.batch(); ++n) {
        const double t = sched.kind() == ScheduleKind::rectified_flow
                             ? ud(rng)
                             : static_cast<double>(step(rng)) / static_cast<double>(sched.steps());
        d.t.push_back(t);
        const double a = sched.a(t), b = sched.b(t);
        for (std::size_t i = n * ss; i < (n + 1) * ss; ++i) {
            d.zt.data[i] = a * z0.data[i] + b * eps.data[i];
            d.target.data[i] = sched.kind() == ScheduleKind::rectified_flow ? eps.data[i] - z0.data[i] : eps.data[i];
        }
    }
    return d;
}

}  // namespace

double cfm_loss(const TransportField& model, const Tensor& z0, const TrajectorySchedule& sched, Rng& rng) {
    if (z0.batch() == 0) throw ConfigError("cfm_loss needs a non-empty batch");
    if (model.target() != sched.kind()) throw ConfigError("model target does not match schedule kind");
    const auto d = draw(z0, sched, rng);
    const Tensor pred = model.predict(d.zt, d.t);
    if (!all_finite(pred.data)) throw NumericError("transport model produced a non-finite prediction");
    return nn::mse(pred, d.target).loss;
}

VelocityModel train_generator(const Tensor& latents, const TrajectorySchedule& sched, const GeneratorConfig& cfg) {
    if (latents.batch() == 0) throw ConfigError("generator training needs latents");
    VelocityModel model(latents.sample_shape(), sched, cfg);
    Rng rng(cfg.seed + 1);
    nn::Adam opt(model.net_, {cfg.learning_rate, 0.9, 0.999, 1e-8, 5.0});
    std::uniform_int_distribution<std::size_t> pick(0, latents.batch() - 1);
    std::vector<std::size_t> rows(cfg.batch_size);
    for (std::size_t step = 0; step < cfg.train_steps; ++step) {
        for (auto& r : rows) r = pick(rng);
        const Tensor z0 = latents.gather(rows);
        const auto d = draw(z0, sched, rng);
        nn::Tape tape;
        const Tensor pred = model.net_.forward(model.embed(d.zt, d.t), &tape);
        const auto loss = nn::mse(pred, d.target);
        if (!std::isfinite(loss.loss)) throw TrainingError("generator loss is not finite", step);
        model.loss_history_.push_back(loss.loss);
        opt.config().lr = 0.5 * cfg.learning_rate *
                          (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                          static_cast<double>(cfg.train_steps)));
        auto grads = model.net_.zero_grads();
        model.net_.backward(tape, loss.grad, &grads, false);
        opt.step(model.net_, grads);
    }
    return model;
}

Tensor reverse_step(const TransportField& model, const Tensor& z, double t_from, double t_to,
                    const TrajectorySchedule& sched, Rng& rng, Tensor* prediction) {
    if (!(t_to < t_from)) throw DomainError("reverse step must move backwards in time");
    if (model.target() != sched.kind()) throw ConfigError("model target does not match schedule kind");
    Tensor pred = model.predict(z, t_from);
    Tensor out(z.shape);
    if (sched.kind() == ScheduleKind::rectified_flow) {
        const double dt = t_to - t_from;
        for (std::size_t i = 0; i < z.size(); ++i) out.data[i] = z.data[i] + dt * pred.data[i];
    } else {
        const double ab_t = sched.alpha_bar(t_from), ab_s = sched.alpha_bar(t_to);
        const double a_ts = ab_t / ab_s, b_ts = 1.0 - a_ts;
        const double c0 = std::sqrt(ab_s) * b_ts / (1.0 - ab_t);
        const double ct = std::sqrt(a_ts) * (1.0 - ab_s) / (1.0 - ab_t);
        const double sigma = std::sqrt(b_ts * (1.0 - ab_s) / (1.0 - ab_t));
        const Tensor x0 = denoise_from_prediction(z, pred, t_from, sched);
        std::normal_distribution<double> nd(0.0, 1.0);
        for (std::size_t i = 0; i < z.size(); ++i) {
            out.data[i] = c0 * x0.data[i] + ct * z.data[i];
            if (sigma > 0.0) out.data[i] += sigma * nd(rng);
        }
    }
    if (prediction) *prediction = std::move(pred);
    return out;
}

Tensor sample(const TransportField& model, const TrajectorySchedule& sched, std::size_t n, const Shape& latent_shape,
              Rng& rng) {
    Shape s{n};
    s.insert(s.end(), latent_shape.begin(), latent_shape.end());
    Tensor z = standard_normal(s, rng);
    const double steps = static_cast<double>(sched.steps());
    for (std::size_t k = sched.steps(); k >= 1; --k) {
        z = reverse_step(model, z, static_cast<double>(k) / steps, static_cast<double>(k - 1) / steps, sched, rng);
        require_finite(z, "sampling", sched.steps() - k + 1);
    }
    return z;
}

Tensor denoise_from_prediction(const Tensor& z, const Tensor& prediction, double t, const TrajectorySchedule& sched) {
    require_same_shape(z, prediction, "denoise_estimate");
    Tensor out(z.shape);
    if (sched.kind() == ScheduleKind::rectified_flow) {
        sched.check_time(t);
        for (std::size_t i = 0; i < z.size(); ++i) out.data[i] = z.data[i] - t * prediction.data[i];
    } else {
        const double ab = sched.alpha_bar(t);
        if (ab <= 0.0) throw DomainError("alpha_bar is zero; the schedule must keep it positive");
        const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        for (std::size_t i = 0; i < z.size(); ++i) out.data[i] = (z.data[i] - sb * prediction.data[i]) / sa;
    }
    return out;
}

Tensor denoise_estimate(const TransportField& model, const Tensor& z, double t, const TrajectorySchedule& sched) {
    if (model.target() != sched.kind()) throw ConfigError("model target does not match schedule kind");
    sched.check_time(t);
    return denoise_from_prediction(z, model.predict(z, t), t, sched);
}

}  // namespace cfx
