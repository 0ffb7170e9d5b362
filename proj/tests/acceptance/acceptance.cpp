// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failed criteria.
//
// usage: cfx_acceptance [work dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cfx/experiment.hpp"
#include "metric_fixture.hpp"

using namespace cfx;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

void verdict(int id, const std::string& name, bool pass, const std::string& detail, Clock::time_point start) {
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    std::printf("[%s] criterion %d: %s | %s | %.1fs\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str(), secs);
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string str(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Tensor gaussian(Shape s, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor t(std::move(s));
    for (auto& v : t.data) v = nd(rng);
    return t;
}

// The straight-path target itself: v = eps - z0 for the pair it was built from.
class KnownNoiseField : public TransportField {
public:
    KnownNoiseField(Tensor z0, Tensor eps) : z0_(std::move(z0)), eps_(std::move(eps)) {}
    ScheduleKind target() const override { return ScheduleKind::rectified_flow; }
    Tensor predict(const Tensor&, std::span<const double>) const override { return eps_ - z0_; }

private:
    Tensor z0_, eps_;
};

void criterion1() {
    const auto start = Clock::now();
    const auto sched = TrajectorySchedule::rectified_flow(10);
    Rng rng(1);
    double worst = 0.0;
    for (int pair = 0; pair < 100; ++pair) {
        const Tensor z0 = gaussian({1, 2, 4, 4}, rng), eps = gaussian({1, 2, 4, 4}, rng);
        const KnownNoiseField field(z0, eps);
        for (int i = 0; i <= 10; ++i) {
            const double t = i / 10.0;
            const Tensor zh = denoise_estimate(field, interpolate(z0, eps, t, sched), t, sched);
            for (std::size_t k = 0; k < zh.size(); ++k) worst = std::max(worst, std::abs(zh.data[k] - z0.data[k]));
        }
    }
    verdict(1, "oracle-transport exactness", worst <= 1e-6, str("max |z_hat - z0| = %.3g (limit 1e-6)", worst), start);
}

void criterion2() {
    const auto start = Clock::now();
    const auto sched = TrajectorySchedule::ddpm(1000);
    const Tensor z0({1, 3}, {1.5, -0.7, 0.2});
    const std::size_t n = 10000;
    Rng rng(2);
    bool ok = true;
    double worst = 0.0;  // in units of the 3-sigma bound
    for (double t : {0.05, 0.25, 0.5, 0.75, 1.0}) {
        Tensor batch({n, 3});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < 3; ++k) batch.data[i * 3 + k] = z0.data[k];
        const Tensor z = interpolate(batch, gaussian({n, 3}, rng), t, sched);
        const double ab = sched.alpha_bar(t), var = 1.0 - ab;
        for (std::size_t k = 0; k < 3; ++k) {
            double m = 0.0, s = 0.0;
            for (std::size_t i = 0; i < n; ++i) m += z.data[i * 3 + k];
            m /= n;
            for (std::size_t i = 0; i < n; ++i) s += (z.data[i * 3 + k] - m) * (z.data[i * 3 + k] - m);
            s /= (n - 1);
            const double mean_bound = 3.0 * std::sqrt(var / n);
            const double var_bound = 3.0 * var * std::sqrt(2.0 / (n - 1));
            const double em = std::abs(m - std::sqrt(ab) * z0.data[k]) / mean_bound;
            const double ev = std::abs(s - var) / var_bound;
            worst = std::max({worst, em, ev});
            ok = ok && em <= 1.0 && ev <= 1.0;
        }
    }
    verdict(2, "DDPM marginal correctness", ok, str("worst deviation %.2f of the 3-sigma bound", worst), start);
}

void criterion3() {
    const auto start = Clock::now();
    const Shape image{1, 8, 8};
    const auto codec = LatentCodec::identity(image);
    const auto sched = TrajectorySchedule::rectified_flow(20);
    GeneratorConfig gc;
    gc.conv_channels = 4;
    gc.hidden_units = 32;
    const VelocityModel model(image, sched, gc);
    const auto f = Classifier::create(image, 2, ActivationFamily::standard, 4, 3);
    const auto f_hat = Classifier::create(image, 2, ActivationFamily::smooth, 4, 4);
    const GradientSource src(GradientSourceSpec{}, f, f_hat);
    GuidanceConfig cfg;
    cfg.lambda_l1 = 0.01;
    cfg.lambda_l2 = 0.05;
    Rng rng(3);
    std::uniform_real_distribution<double> u(0.2, 0.8), ut(0.05, 0.5);
    double worst = 0.0;
    for (int probe = 0; probe < 20; ++probe) {
        Tensor z0(Shape{1, 1, 8, 8}), zt(Shape{1, 1, 8, 8});
        for (auto& v : z0.data) v = u(rng);
        for (std::size_t i = 0; i < zt.size(); ++i) zt.data[i] = z0.data[i] + 0.2 * (u(rng) - 0.5);
        const double t = ut(rng);
        const std::vector<int> targets{probe % 2};
        Rng g(0);
        const auto terms = total_gradient(src, codec, zt, z0, t, model, sched, cfg, targets, g);
        // Objective with z_hat substituted: the guidance loss is taken at
        // z_hat + delta, the proximity terms at z_t + delta.
        auto objective = [&](const Tensor& delta) {
            const Tensor zh = terms.z_hat + delta, z = zt + delta;
            double l1 = 0.0, l2 = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) {
                l1 += std::abs(z.data[i] - z0.data[i]);
                l2 += (z.data[i] - z0.data[i]) * (z.data[i] - z0.data[i]);
            }
            return cfg.beta * src.loss(codec, zh, targets) + cfg.lambda_l1 * l1 + cfg.lambda_l2 * std::sqrt(l2);
        };
        const Tensor dir = gaussian(zt.shape, rng);
        const double h = 1e-5;
        const double fd = (objective(h * dir) - objective(-h * dir)) / (2 * h);
        const double an = dot(terms.total.data, dir.data);
        worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd), 1e-12));
    }
    verdict(3, "gradient correctness", worst < 1e-2, str("worst relative error %.3g over 20 probes (limit 1e-2)", worst),
            start);
}

void criterion4() {
    const auto start = Clock::now();
    bool ok = true;
    auto near = [&](double a, double b) { ok = ok && std::abs(a - b) <= 1e-9; };
    near(sparsity(std::vector<double>{0.0, 0.0, 2.0}), 2.0 / 3.0);
    near(sparsity(std::vector<double>{0.5, 0.5, 0.5}), 0.0);
    near(sparsity(std::vector<double>{0.0, 1.0, 0.0, 0.0}), 0.75);
    const std::vector<double> d{1.0, -2.0, 0.5}, o{2.0, 1.0, 0.0}, neg{-1.0, 2.0, -0.5};
    near(*diversity(d, d), 0.0);
    near(*diversity(d, o), 1.0);
    near(*diversity(d, neg), 2.0);
    near(nafr(std::vector<int>{0, 1, 0, 1}, std::vector<int>{0, 1, 0, 1}), 0.0);
    near(nafr(std::vector<int>{0, 0, 1, 1}, std::vector<int>{1, 1, 0, 1}), 75.0);
    const std::vector<int> f0{0, 0, 0, 0}, f1{1, 1, 1, 1};
    near(*na_rate(f0, f1, f0, f1).value, 100.0);
    near(*na_rate(f0, f1, f0, std::vector<int>{0, 1, 0, 0}).value, 25.0);
    ok = ok && !na_rate(f0, f0, f0, f1).value.has_value();
    near(*gain(0.6, 0.7), 25.0);
    near(*gain(0.6, 0.6), 0.0);
    near(*gain(0.9, 1.0), 100.0);
    ok = ok && !gain(1.0, 1.0).has_value();

    const auto f = test::threshold_classifier(0), h = test::threshold_classifier(1);
    const auto r = evaluate_run(test::fixture_runs(), f, h, EmbeddingFn::flat_pixels());
    const test::FixtureExpectation ex;
    near(r.flip_rate, ex.flip_rate);
    near(r.nafr, ex.nafr);
    near(r.na_rate.value_or(-1.0), ex.na_rate);
    near(r.sparsity, ex.sparsity);
    near(r.diversity.value_or(-1.0), ex.diversity);
    const auto x = test::px(0.1, 0.2, 0.3);
    const auto one = evaluate_run({test::fixture_run("x", 0, x, {x})}, f, h, EmbeddingFn::flat_pixels());
    near(one.sparsity, 100.0);
    near(one.nafr, 0.0);
    ok = ok && !one.na_rate.has_value();
    verdict(4, "metric oracles", ok, "sparsity, diversity, NAFR, NA, gain and the 3-sample table", start);
}

void criterion6(const std::vector<Workspace>& seeds) {
    const auto start = Clock::now();
    bool ok = true;
    std::string detail;
    for (const auto& ws : seeds) {
        const auto sp = ws.splits();
        const Tensor x = sp.val.images.slice(0, 100);
        const std::vector<int> y(sp.val.labels.begin(), sp.val.labels.begin() + 100);
        Rng a(7), b(7);
        const double vf = gradient_variation(ws.f(), x, y, 1e-2, a);
        const double vh = gradient_variation(ws.f_hat(), x, y, 1e-2, b);
        ok = ok && vh < vf;
        detail += str("seed %llu: f %.4f vs f_hat %.4f; ", static_cast<unsigned long long>(ws.config().seed), vf, vh);
    }
    verdict(6, "surrogate smoothness", ok, detail, start);
}

void criterion5(const Workspace& ws) {
    const auto start = Clock::now();
    // (a) full inpaint under the identity codec
    const auto codec = LatentCodec::identity({1, 16, 16});
    Rng rng(5);
    const Tensor zt = gaussian({1, 1, 16, 16}, rng), z0 = gaussian({1, 1, 16, 16}, rng);
    const bool a = inpaint_latent(zt, z0, Mask(256, true), codec) == z0;

    // (b) exclusion soundness on trained models
    const auto sp = ws.splits();
    const auto gen = ws.generator();
    const auto f = ws.f();
    const auto fh = ws.f_hat();
    const auto sched = gen.schedule();
    const GradientSource src(GradientSourceSpec{}, f, fh);
    const Models m{gen, sched, codec, f, fh, src};
    double worst = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        const Tensor x0 = sp.test.image(i);
        const auto set = generate_diverse_set(x0, 1 - f.predict(x0).at(0), m, ws.config().guidance, 2, 100 + i);
        const auto& excl = set.exclusions[1].editable;
        const auto& cf2 = set.counterfactuals[1].image;
        for (std::size_t p = 0; p < excl.size(); ++p)
            if (!excl[p]) worst = std::max(worst, std::abs(cf2.data[p] - x0.data[p]));
    }
    const bool b = worst == 0.0;

    // (c) 5x5 hand-convolved impulse
    Tensor x({1, 1, 5, 5}), xh({1, 1, 5, 5});
    xh.data[12] = 1.0;
    auto w = [](int i) {
        double num = 0.0, den = 0.0;
        for (int k = 0; k < 5; ++k) {
            if (std::abs(k - i) > 3) continue;
            const double g = std::exp(-0.5 * (k - i) * (k - i));
            den += g;
            if (k == 2) num = g;
        }
        return num / den;
    };
    const double tau = 0.05;
    const auto mask = phase1_mask(x, xh, tau, 1.0);
    bool c = true;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) c = c && mask[i * 5 + j] == (w(i) * w(j) < tau);
    verdict(5, "masking contracts", a && b && c,
            str("full inpaint %s; max excluded-pixel change %.3g; 5x5 oracle %s", a ? "exact" : "WRONG", worst,
                c ? "matches" : "DIFFERS"),
            start);
}

struct SeedResult {
    MetricsReport surrogate, vanilla;
    double primary_flip_rate = 0.0;
    DebiasResult debias;
};

SeedResult run_seed(const Workspace& ws) {
    ws.synth();
    ws.train_codec();
    ws.train_classifier();
    ws.train_surrogate();
    ws.train_generator();
    SeedResult r;
    const auto runs = ws.explain(gradient_source_from_name("surrogate"), ws.path("runs"));
    ws.explain(gradient_source_from_name("vanilla"), ws.path("runs_vanilla"));
    std::size_t flipped = 0;
    for (const auto& run : runs) flipped += run.set.counterfactuals.front().flipped ? 1 : 0;
    r.primary_flip_rate = 100.0 * static_cast<double>(flipped) / static_cast<double>(runs.size());
    r.debias = ws.debias(ws.path("runs"));
    r.surrogate = ws.evaluate(ws.path("runs"), ws.path("eval_surrogate"));
    r.vanilla = ws.evaluate(ws.path("runs_vanilla"), ws.path("eval_vanilla"));
    return r;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion9(const Workspace& ws) {
    const auto start = Clock::now();
    const auto sp = ws.splits();
    const auto gen = ws.generator();
    const auto f = ws.f();
    const auto fh = ws.f_hat();
    const auto codec = ws.codec();
    const auto sched = gen.schedule();
    const GradientSource src(GradientSourceSpec{}, f, fh);
    const Models m{gen, sched, codec, f, fh, src};
    const auto e = EmbeddingFn::flat_pixels();
    const Mask all(sp.test.images.dim(2) * sp.test.images.dim(3), true);
    double masked = 0.0, repeats = 0.0;
    std::size_t n_masked = 0, n_repeats = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        const Tensor x0 = sp.test.image(i);
        const int target = 1 - f.predict(x0).at(0);
        const auto set = generate_diverse_set(x0, target, m, ws.config().guidance, 2, 300 + i);
        if (auto d = diversity(embedding_delta(x0, set.counterfactuals[0].image, e),
                               embedding_delta(x0, set.counterfactuals[1].image, e))) {
            masked += *d;
            ++n_masked;
        }
        const auto a = generate_counterfactual(x0, target, m, ws.config().guidance, all, 300 + i);
        const auto b = generate_counterfactual(x0, target, m, ws.config().guidance, all, 300 + i);
        if (auto d = diversity(embedding_delta(x0, a.image, e), embedding_delta(x0, b.image, e))) {
            repeats += *d;
            ++n_repeats;
        }
    }
    masked = n_masked ? masked / n_masked : 0.0;
    repeats = n_repeats ? repeats / n_repeats : 0.0;
    verdict(9, "diversity mechanism", n_masked > 0 && masked > repeats,
            str("Phase II %.4f (%zu pairs) vs same-seed repeats %.4f (%zu pairs)", masked, n_masked, repeats, n_repeats),
            start);
}

void criterion10(const Workspace& base) {
    const auto start = Clock::now();
    ExperimentConfig cfg = base.config();
    cfg.explain.count = 5;
    const Workspace ws(cfg, base.out());
    const auto first = ws.path("repro/runs"), second = ws.path("repro/runs_again");
    const auto runs = ws.explain(cfg.gradient_source, first);
    ws.explain(cfg.gradient_source, second, 2);
    bool same = true;
    for (const auto& r : runs)
        for (const char* file : {"result.json", "trace.csv", "config.json"})
            same = same && slurp(first / r.id / file) == slurp(second / r.id / file);
    const std::string a = ws.ablate();
    const std::string a_file = slurp(ws.path("ablation.csv"));
    const std::string b = ws.ablate(2);
    same = same && a == b && a_file == slurp(ws.path("ablation.csv"));
    verdict(10, "reproducibility", same, "explain result/trace files and ablation.csv identical across reruns and --jobs",
            start);
}

}  // namespace

int main(int argc, char** argv) {
    const std::filesystem::path work = argc > 1 ? argv[1] : "acceptance_work";
    std::filesystem::remove_all(work);

    criterion1();
    criterion2();
    criterion3();
    criterion4();

    const auto start = Clock::now();
    ExperimentConfig base;
    base.explain.count = 50;
    std::vector<Workspace> seeds;
    std::vector<SeedResult> results;
    for (std::uint64_t s : {1, 2, 3}) {
        seeds.emplace_back(with_seed(base, s), work / ("seed" + std::to_string(s)));
        results.push_back(run_seed(seeds.back()));
        std::printf("  seed %llu pipeline ready (%.0fs)\n", static_cast<unsigned long long>(s),
                    std::chrono::duration<double>(Clock::now() - start).count());
        std::fflush(stdout);
    }

    criterion5(seeds.front());
    criterion6(seeds);

    {
        double na_s = 0.0, na_v = 0.0;
        std::string detail;
        bool defined = true;
        for (std::size_t i = 0; i < results.size(); ++i) {
            defined = defined && results[i].surrogate.na_rate && results[i].vanilla.na_rate;
            const double s = results[i].surrogate.na_rate.value_or(0.0), v = results[i].vanilla.na_rate.value_or(0.0);
            na_s += s / results.size();
            na_v += v / results.size();
            detail += str("seed %zu: %.1f vs %.1f; ", i + 1, s, v);
        }
        detail += str("mean NA surrogate %.1f vs vanilla %.1f (margin %.1f, need >= 15)", na_s, na_v, na_s - na_v);
        verdict(7, "ablation direction", defined && na_s >= na_v + 15.0, detail, start);
    }
    {
        bool ok = true;
        std::string detail;
        for (std::size_t i = 0; i < results.size(); ++i) {
            const auto& r = results[i];
            const bool pos = r.debias.gain && *r.debias.gain > 0.0;
            ok = ok && r.primary_flip_rate >= 70.0 && pos;
            detail += str("seed %zu: flip %.0f%%, acc %.3f -> %.3f, gain %s; ", i + 1, r.primary_flip_rate,
                          r.debias.acc_before, r.debias.acc_after,
                          r.debias.gain ? str("%.1f%%", *r.debias.gain).c_str() : "absent");
        }
        verdict(8, "end-to-end debias direction", ok, detail, start);
    }

    criterion9(seeds.front());
    criterion10(seeds.front());

    std::printf("%d of 10 criteria failed\n", failures);
    return failures;
}
