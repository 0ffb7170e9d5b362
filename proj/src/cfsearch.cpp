#include "cfx/cfsearch.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cfx/archive.hpp"
#include "cfx/filters.hpp"
#include "cfx/image_io.hpp"

namespace cfx {

namespace {

constexpr const char* kRunMagic = "CFXRUN1";

Tensor as_batch(const Tensor& x) {
    if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("expected one image, got " + to_string(x.shape));
    return x;
}

void require_finite(const Tensor& t, const std::string& term) {
    if (!all_finite(t.data)) throw NumericError("non-finite value in the " + term + " term");
}

}  // namespace

void GuidanceConfig::validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("guidance.beta must be finite and >= 0");
    if (!(lambda_l1 >= 0.0) || !(lambda_l2 >= 0.0)) throw ConfigError("guidance lambdas must be >= 0");
    if (!(eta > 0.0)) throw ConfigError("guidance.eta must be > 0");
    if (steps < 1) throw ConfigError("guidance.steps must be >= 1");
    if (!(start_time > 0.0 && start_time <= 1.0)) throw ConfigError("guidance.start_time must lie in (0, 1]");
    if (!(tau_inpaint > 0.0)) throw ConfigError("guidance.tau_inpaint must be > 0");
    if (!(psi_kernel_sigma > 0.0)) throw ConfigError("guidance.psi_kernel_sigma must be > 0");
    if (max_counterfactuals < 1) throw ConfigError("guidance.max_counterfactuals must be >= 1");
}

nlohmann::json to_json(const GuidanceConfig& c) {
    return {{"beta", c.beta},
            {"lambda_l1", c.lambda_l1},
            {"lambda_l2", c.lambda_l2},
            {"eta", c.eta},
            {"steps", c.steps},
            {"start_time", c.start_time},
            {"tau_inpaint", c.tau_inpaint},
            {"psi_kernel_sigma", c.psi_kernel_sigma},
            {"max_counterfactuals", c.max_counterfactuals},
            {"phase1", c.phase1}};
}

GuidanceConfig guidance_config_from_json(const nlohmann::json& j) {
    GuidanceConfig c;
    const auto ref = to_json(c);
    if (!j.is_object()) throw ConfigError("guidance must be an object");
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ConfigError("unknown guidance key '" + k + "'");
    try {
        c.beta = j.value("beta", c.beta);
        c.lambda_l1 = j.value("lambda_l1", c.lambda_l1);
        c.lambda_l2 = j.value("lambda_l2", c.lambda_l2);
        c.eta = j.value("eta", c.eta);
        c.steps = j.value("steps", c.steps);
        c.start_time = j.value("start_time", c.start_time);
        c.tau_inpaint = j.value("tau_inpaint", c.tau_inpaint);
        c.psi_kernel_sigma = j.value("psi_kernel_sigma", c.psi_kernel_sigma);
        c.max_counterfactuals = j.value("max_counterfactuals", c.max_counterfactuals);
        c.phase1 = j.value("phase1", c.phase1);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid guidance field: ") + e.what());
    }
    c.validate();
    return c;
}

Tensor proximity_gradient(const Tensor& zt, const Tensor& z0, double lambda_l1, double lambda_l2) {
    require_same_shape(zt, z0, "proximity_gradient");
    Tensor g(zt.shape);
    const std::size_t batch = zt.rank() == 0 ? 0 : zt.batch();
    const std::size_t ss = batch == 0 ? 0 : zt.size() / batch;
    for (std::size_t n = 0; n < batch; ++n) {
        double norm = 0.0;
        for (std::size_t i = n * ss; i < (n + 1) * ss; ++i) norm += (zt.data[i] - z0.data[i]) * (zt.data[i] - z0.data[i]);
        norm = std::sqrt(norm);
        for (std::size_t i = n * ss; i < (n + 1) * ss; ++i) {
            const double d = zt.data[i] - z0.data[i];
            const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            g.data[i] = lambda_l1 * sign + (norm > 0.0 ? lambda_l2 * d / norm : 0.0);
        }
    }
    return g;
}

GradientTerms total_gradient(const GradientSource& src, const LatentCodec& codec, const Tensor& zt, const Tensor& z0,
                             double t, const TransportField& model, const TrajectorySchedule& sched,
                             const GuidanceConfig& cfg, std::span<const int> targets, Rng& rng) {
    GradientTerms r;
    r.z_hat = denoise_estimate(model, zt, t, sched);
    require_finite(r.z_hat, "denoised-estimate");
    if (cfg.beta != 0.0) {
        r.guidance = cfg.beta * src.gradient(codec, r.z_hat, targets, rng);
        r.guidance_loss = cfg.beta * src.loss(codec, r.z_hat, targets);
    } else {
        r.guidance = Tensor(zt.shape);
    }
    require_finite(r.guidance, "guidance");
    r.proximity = proximity_gradient(zt, z0, cfg.lambda_l1, cfg.lambda_l2);
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < zt.size(); ++i) {
        const double d = zt.data[i] - z0.data[i];
        l1 += std::abs(d);
        l2 += d * d;
    }
    r.l1 = cfg.lambda_l1 * l1;
    r.l2 = cfg.lambda_l2 * std::sqrt(l2);
    if (!std::isfinite(r.l1)) throw NumericError("non-finite value in the L1 proximity term");
    if (!std::isfinite(r.l2)) throw NumericError("non-finite value in the L2 proximity term");
    r.total = r.guidance + r.proximity;
    return r;
}

std::vector<double> residual_map(const Tensor& a, const Tensor& b, double sigma) {
    const Tensor x = as_batch(a), y = as_batch(b);
    require_same_shape(x, y, "residual_map");
    const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3), plane = h * w;
    Tensor diff({1, 1, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
            diff.data[i] += std::abs(x.data[ch * plane + i] - y.data[ch * plane + i]) / static_cast<double>(c);
    return gaussian_blur(diff, sigma).data;
}

Mask phase1_mask(const Tensor& x0, const Tensor& x_hat, double tau, double sigma) {
    const auto psi = residual_map(x0, x_hat, sigma);
    Mask m(psi.size());
    for (std::size_t i = 0; i < psi.size(); ++i) m[i] = psi[i] < tau;
    return m;
}

Mask downsample_mask(const Mask& m, std::size_t height, std::size_t width, std::size_t factor) {
    if (factor == 0 || height % factor != 0 || width % factor != 0)
        throw ShapeError("mask " + std::to_string(height) + "x" + std::to_string(width) +
                         " is not divisible by downsample factor " + std::to_string(factor));
    if (m.size() != height * width) throw ShapeError("mask size does not match its dimensions");
    if (factor == 1) return m;
    const std::size_t h = height / factor, w = width / factor;
    Mask out(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            std::size_t on = 0;
            for (std::size_t dy = 0; dy < factor; ++dy)
                for (std::size_t dx = 0; dx < factor; ++dx) on += m[(y * factor + dy) * width + x * factor + dx] ? 1 : 0;
            out[y * w + x] = 2 * on >= factor * factor;
        }
    return out;
}

Tensor inpaint_latent(const Tensor& zt, const Tensor& z0, const Mask& mask, const LatentCodec& codec) {
    require_same_shape(zt, z0, "inpaint_latent");
    const Shape& img = codec.image_shape();
    const Mask lm = downsample_mask(mask, img[1], img[2], codec.downsample_factor());
    const Shape& ls = codec.latent_shape();
    const std::size_t plane = ls[1] * ls[2];
    if (lm.size() != plane) throw ShapeError("downsampled mask does not match the latent grid");
    Tensor out = zt;
    const std::size_t ss = zt.sample_size();
    for (std::size_t n = 0; n < zt.batch(); ++n)
        for (std::size_t c = 0; c < ls[0]; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                if (lm[i]) {
                    const std::size_t k = n * ss + c * plane + i;
                    out.data[k] = z0.data[k];
                }
    return out;
}

Exclusion exclusion_mask(const std::vector<Tensor>& previous_cfs, const Tensor& x0, double tau, double sigma) {
    const Tensor x = as_batch(x0);
    const std::size_t plane = x.dim(2) * x.dim(3);
    Exclusion e{std::vector<double>(plane, 0.0), Mask(plane, true)};
    for (const auto& cf : previous_cfs) {
        const auto psi = residual_map(cf, x, sigma);
        for (std::size_t i = 0; i < plane; ++i) e.cumulative[i] += psi[i];
    }
    for (std::size_t i = 0; i < plane; ++i) e.editable[i] = e.cumulative[i] < tau;
    return e;
}

Counterfactual generate_counterfactual(const Tensor& x0_in, int target, const Models& m, const GuidanceConfig& cfg,
                                       const Mask& editable, std::uint64_t seed) {
    cfg.validate();
    const Tensor x0 = as_batch(x0_in);
    const std::size_t plane = x0.dim(2) * x0.dim(3);
    if (editable.size() != plane) throw ShapeError("fixed mask does not match the image grid");
    if (target < 0 || static_cast<std::size_t>(target) >= m.f.n_classes())
        throw DomainError("target class " + std::to_string(target) + " out of range");
    const std::vector<int> targets{target};

    Rng rng(seed);
    const Tensor z0 = m.codec.encode(x0);
    Tensor eps(z0.shape);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : eps.data) v = nd(rng);
    Tensor z = interpolate(z0, eps, cfg.start_time, m.schedule);

    Counterfactual out;
    out.editable = editable;
    out.always_restored = Mask(plane, true);
    const double T = static_cast<double>(cfg.steps);
    for (std::size_t k = cfg.steps; k >= 1; --k) {
        const std::size_t step = cfg.steps - k + 1;
        const double t = cfg.start_time * static_cast<double>(k) / T;
        const double t_next = cfg.start_time * static_cast<double>(k - 1) / T;
        try {
            z = reverse_step(m.generator, z, t, t_next, m.schedule, rng);
            require_finite(z, "transport");
            const auto terms = total_gradient(m.source, m.codec, z, z0, t_next, m.generator, m.schedule, cfg,
                                              targets, rng);
            axpy(-cfg.eta, terms.total, z);
            Mask restore(plane);
            Mask p1(plane, false);
            if (cfg.phase1) {
                Tensor moved = terms.z_hat;
                axpy(-cfg.eta, terms.total, moved);
                p1 = phase1_mask(x0, m.codec.decode(moved), cfg.tau_inpaint, cfg.psi_kernel_sigma);
            }
            for (std::size_t i = 0; i < plane; ++i) {
                restore[i] = p1[i] || !editable[i];
                if (!restore[i]) out.always_restored[i] = false;
            }
            z = inpaint_latent(z, z0, restore, m.codec);
            out.last_restore = std::move(restore);
            out.trace.push_back({step, terms.guidance_loss, terms.l1, terms.l2,
                                 terms.guidance_loss + terms.l1 + terms.l2});
        } catch (const NumericError& e) {
            if (e.step() != 0) throw;
            throw NumericError(e.what(), step);
        }
    }
    out.latent = z;
    out.image = m.codec.decode(z);
    out.f_prediction = m.f.predict(out.image).at(0);
    out.f_hat_prediction = m.f_hat.predict(out.image).at(0);
    out.flipped = out.f_prediction == target;
    return out;
}

DiverseSet generate_diverse_set(const Tensor& x0, int target, const Models& m, const GuidanceConfig& cfg,
                                std::size_t k, std::uint64_t seed) {
    if (k < 1) throw ConfigError("at least one counterfactual is required");
    DiverseSet set;
    std::vector<Tensor> previous;
    for (std::size_t j = 0; j < k; ++j) {
        auto ex = exclusion_mask(previous, x0, cfg.tau_inpaint, cfg.psi_kernel_sigma);
        auto cf = generate_counterfactual(x0, target, m, cfg, ex.editable, seed);
        previous.push_back(cf.image);
        set.exclusions.push_back(std::move(ex));
        set.counterfactuals.push_back(std::move(cf));
    }
    return set;
}

namespace {

std::string csv_number(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

void write_run(const std::filesystem::path& dir, const RunRecord& run, const nlohmann::json& config) {
    std::filesystem::create_directories(dir);
    write_text_atomic(dir / "config.json", config.dump(2) + "\n");

    std::ostringstream trace;
    trace << "k,step,guidance_loss,l1,l2,total\n";
    for (std::size_t k = 0; k < run.set.counterfactuals.size(); ++k)
        for (const auto& r : run.set.counterfactuals[k].trace)
            trace << k + 1 << ',' << r.step << ',' << csv_number(r.guidance) << ',' << csv_number(r.l1) << ','
                  << csv_number(r.l2) << ',' << csv_number(r.total) << '\n';
    write_text_atomic(dir / "trace.csv", trace.str());

    const Tensor x0 = as_batch(run.factual);
    const std::size_t h = x0.dim(2), w = x0.dim(3);
    write_png(dir / "factual.png", x0);
    std::vector<Tensor> panels{x0.reshaped(x0.sample_shape())};
    std::vector<Tensor> heat;
    ArchiveWriter arr(kRunMagic, {{"id", run.id}, {"count", run.set.counterfactuals.size()}});
    arr.add("factual", x0);
    nlohmann::json cfs = nlohmann::json::array();
    for (std::size_t k = 0; k < run.set.counterfactuals.size(); ++k) {
        const auto& cf = run.set.counterfactuals[k];
        const std::string n = std::to_string(k + 1);
        write_png(dir / ("cf_" + n + ".png"), cf.image);
        write_mask_png(dir / ("mask_" + n + ".png"), run.set.exclusions[k].editable, h, w);
        panels.push_back(cf.image.reshaped(cf.image.sample_shape()));
        heat.push_back(difference_heatmap(x0, cf.image));
        arr.add("cf." + n, cf.image);
        arr.add("latent." + n, cf.latent);
        arr.add("cumulative." + n, Tensor({h, w}, run.set.exclusions[k].cumulative));
        std::size_t excluded = 0;
        for (bool e : run.set.exclusions[k].editable) excluded += e ? 0 : 1;
        cfs.push_back({{"k", k + 1},
                       {"flipped", cf.flipped},
                       {"f_prediction", cf.f_prediction},
                       {"f_hat_prediction", cf.f_hat_prediction},
                       {"excluded_pixels", excluded},
                       {"final_loss", cf.trace.empty() ? 0.0 : cf.trace.back().total}});
    }
    panels.insert(panels.end(), heat.begin(), heat.end());
    write_png(dir / "grid.png", tile_horizontal(panels));
    arr.write(dir / "counterfactuals.cfxrun");

    const nlohmann::json result = {{"id", run.id},
                                   {"sample_index", run.sample_index},
                                   {"label", run.label},
                                   {"target", run.target},
                                   {"f_factual", run.f_factual},
                                   {"f_hat_factual", run.f_hat_factual},
                                   {"seed", run.seed},
                                   {"gradient_source", run.source},
                                   {"counterfactuals", cfs}};
    write_text_atomic(dir / "result.json", result.dump(2) + "\n");
}

RunRecord read_run(const std::filesystem::path& dir) {
    RunRecord run;
    nlohmann::json result;
    {
        std::ifstream in(dir / "result.json");
        if (!in) throw ConfigError("run directory " + dir.string() + " has no result.json");
        try {
            result = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("unreadable result.json in " + dir.string() + ": " + e.what());
        }
    }
    {
        std::ifstream in(dir / "config.json");
        if (!in) throw ConfigError("run directory " + dir.string() + " has no config.json");
        try {
            run.config = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("unreadable config.json in " + dir.string() + ": " + e.what());
        }
    }
    const auto arr = ArchiveReader::read(dir / "counterfactuals.cfxrun", kRunMagic);
    try {
        run.id = result.at("id");
        run.sample_index = result.at("sample_index");
        run.label = result.at("label");
        run.target = result.at("target");
        run.f_factual = result.at("f_factual");
        run.f_hat_factual = result.at("f_hat_factual");
        run.seed = result.at("seed");
        run.source = result.at("gradient_source");
        run.factual = arr.tensor("factual");
        const auto& cfs = result.at("counterfactuals");
        for (std::size_t k = 0; k < cfs.size(); ++k) {
            Counterfactual cf;
            const std::string n = std::to_string(k + 1);
            cf.image = arr.tensor("cf." + n);
            cf.latent = arr.tensor("latent." + n);
            cf.flipped = cfs[k].at("flipped");
            cf.f_prediction = cfs[k].at("f_prediction");
            cf.f_hat_prediction = cfs[k].at("f_hat_prediction");
            Exclusion ex;
            ex.cumulative = arr.tensor("cumulative." + n).data;
            run.set.counterfactuals.push_back(std::move(cf));
            run.set.exclusions.push_back(std::move(ex));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("incomplete result.json in " + dir.string() + ": " + e.what());
    }
    return run;
}

}  // namespace cfx
