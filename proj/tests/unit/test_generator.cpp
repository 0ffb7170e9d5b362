#include <cmath>
#include <numeric>

#include "cfx/generator.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cfx;

namespace {

class ZeroField : public TransportField {
public:
    explicit ZeroField(ScheduleKind k) : kind_(k) {}
    ScheduleKind target() const override { return kind_; }
    Tensor predict(const Tensor& z, std::span<const double>) const override { return Tensor(z.shape); }

private:
    ScheduleKind kind_;
};

double t_for_alpha_bar(const TrajectorySchedule& s, double target) {
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (s.alpha_bar(mid) > target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

GeneratorConfig small_config(std::size_t steps) {
    GeneratorConfig c;
    c.conv_channels = 4;
    c.hidden_units = 64;
    c.train_steps = steps;
    c.seed = 3;
    return c;
}

}  // namespace

TEST_CASE("schedule coefficients") {
    const auto rf = TrajectorySchedule::rectified_flow(10);
    const auto dd = TrajectorySchedule::ddpm(100);
    for (const auto* s : {&rf, &dd}) {
        CHECK(s->a(0.0) == 1.0);
        CHECK(s->b(0.0) == 0.0);
        CHECK_THROWS_AS(s->a(1.5), DomainError);
        CHECK_THROWS_AS(s->b(-0.1), DomainError);
    }
    for (double t : {0.0, 0.3, 0.7, 1.0}) {
        CHECK(rf.a(t) == 1.0 - t);
        CHECK(rf.b(t) == t);
    }
    for (std::size_t n = 1; n < dd.alpha_bars().size(); ++n) CHECK(dd.alpha_bars()[n] < dd.alpha_bars()[n - 1]);
    double prev = 2.0;
    for (int i = 0; i <= 1000; ++i) {
        const double ab = dd.alpha_bar(i / 1000.0);
        CHECK(ab < prev);
        prev = ab;
    }
    CHECK(dd.betas().front() == doctest::Approx(1e-4));
    CHECK(dd.betas().back() == doctest::Approx(2e-2));
    CHECK(dd.alpha_bar(1.0) > 0.0);
    CHECK(TrajectorySchedule::from_description(dd.describe()) == dd);
    CHECK(TrajectorySchedule::from_description(rf.describe()) == rf);
    CHECK_THROWS_AS(TrajectorySchedule::rectified_flow(0), ConfigError);
}

TEST_CASE("interpolate") {
    const auto rf = TrajectorySchedule::rectified_flow(10);
    const auto z0 = test::random_tensor({2, 1, 2, 2}, 1);
    const auto eps = test::random_tensor({2, 1, 2, 2}, 2);
    CHECK(interpolate(z0, eps, 0.0, rf) == z0);
    CHECK(interpolate(z0, eps, 1.0, rf) == eps);
    CHECK(interpolate(Tensor({1, 1}, {0.0}), Tensor({1, 1}, {1.0}), 0.5, rf).data[0] == 0.5);
    CHECK_THROWS_AS(interpolate(z0, eps, 1.01, rf), DomainError);
    CHECK_THROWS_AS(interpolate(z0, Tensor({1, 1}), 0.5, rf), ShapeError);

    const auto dd = TrajectorySchedule::ddpm(1000);
    const double t = t_for_alpha_bar(dd, 0.25);
    const auto mixed = interpolate(z0, eps, t, dd);
    for (std::size_t i = 0; i < z0.size(); ++i)
        CHECK(mixed.data[i] == doctest::Approx(0.5 * z0.data[i] + std::sqrt(0.75) * eps.data[i]).epsilon(1e-9));

    // superposition
    const auto z1 = test::random_tensor(z0.shape, 3);
    const auto e1 = test::random_tensor(z0.shape, 4);
    for (const auto* s : {&rf, &dd}) {
        const auto lhs = interpolate(2.0 * z0 + z1, 2.0 * eps + e1, 0.4, *s);
        const auto rhs = 2.0 * interpolate(z0, eps, 0.4, *s) + interpolate(z1, e1, 0.4, *s);
        CHECK(test::max_abs_diff(lhs, rhs) < 1e-12);
    }
}

TEST_CASE("ddpm marginal moments") {
    const auto dd = TrajectorySchedule::ddpm(1000);
    const Tensor z0({1, 1}, {0.7});
    Rng rng(5);
    std::normal_distribution<double> nd;
    const std::size_t n = 10000;
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        double s = 0.0, ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = interpolate(z0, Tensor({1, 1}, {nd(rng)}), t, dd).data[0];
            s += x;
            ss += x * x;
        }
        const double m = s / n, var = ss / n - m * m, ab = dd.alpha_bar(t);
        CHECK(std::abs(m - std::sqrt(ab) * 0.7) < 3.0 * std::sqrt((1 - ab) / n));
        CHECK(std::abs(var - (1 - ab)) < 3.0 * (1 - ab) * std::sqrt(2.0 / n));
    }
}

TEST_CASE("denoise estimate inverts the marginal under the oracle field") {
    const auto z0 = test::random_tensor({1, 2, 4, 4}, 6);
    const auto eps = test::random_tensor({1, 2, 4, 4}, 7);
    for (const auto& s : {TrajectorySchedule::rectified_flow(10), TrajectorySchedule::ddpm(100)}) {
        const PointMassField oracle(z0, s);
        for (int i = 0; i <= 10; ++i) {
            const double t = i / 10.0;
            const auto zt = interpolate(z0, eps, t, s);
            CHECK(test::max_abs_diff(denoise_estimate(oracle, zt, t, s), z0) < 1e-9);
        }
    }
    const auto rf = TrajectorySchedule::rectified_flow(10);
    const PointMassField other(eps, rf);
    CHECK(denoise_estimate(other, z0, 0.0, rf) == z0);
    CHECK_THROWS_AS(denoise_estimate(other, z0, 0.5, TrajectorySchedule::ddpm(10)), ConfigError);
}

TEST_CASE("cfm loss") {
    const auto rf = TrajectorySchedule::rectified_flow(10);
    Rng rng(8);
    SUBCASE("oracle field gives zero") {
        const auto c = test::random_tensor({1, 1, 2, 2}, 9);
        const Tensor batch = concat_batch(std::vector<Tensor>(16, c));
        CHECK(cfm_loss(PointMassField(c, rf), batch, rf, rng) < 1e-20);
        const auto dd = TrajectorySchedule::ddpm(50);
        CHECK(cfm_loss(PointMassField(c, dd), batch, dd, rng) < 1e-20);
    }
    SUBCASE("zero field on zero data gives unit loss") {
        const Tensor batch({4000, 1, 2, 2});
        const double loss = cfm_loss(ZeroField(ScheduleKind::rectified_flow), batch, rf, rng);
        CHECK(std::abs(loss - 1.0) < 4.0 * std::sqrt(2.0 / 16000.0));
    }
    SUBCASE("empty batch and mismatched target") {
        CHECK_THROWS_AS(cfm_loss(ZeroField(ScheduleKind::rectified_flow), Tensor({0, 1, 2, 2}), rf, rng), ConfigError);
        CHECK_THROWS_AS(cfm_loss(ZeroField(ScheduleKind::ddpm), Tensor({2, 1, 2, 2}), rf, rng), ConfigError);
    }
}

TEST_CASE("sampling with the oracle field") {
    const auto c = test::random_tensor({1, 1, 4, 4}, 10);
    for (std::size_t T : {1u, 7u, 50u}) {
        const auto rf = TrajectorySchedule::rectified_flow(T);
        Rng rng(11);
        const auto out = sample(PointMassField(c, rf), rf, 5, {1, 4, 4}, rng);
        for (std::size_t n = 0; n < 5; ++n)
            for (std::size_t i = 0; i < 16; ++i) CHECK(out.data[n * 16 + i] == doctest::Approx(c.data[i]).epsilon(1e-12));
    }
    const auto dd = TrajectorySchedule::ddpm(50);
    Rng rng(12);
    const auto out = sample(PointMassField(c, dd), dd, 3, {1, 4, 4}, rng);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 16; ++i) CHECK(out.data[n * 16 + i] == doctest::Approx(c.data[i]).epsilon(1e-9));
}

TEST_CASE("generator training") {
    const auto rf = TrajectorySchedule::rectified_flow(20);
    SUBCASE("single point is overfit") {
        const auto c = test::random_tensor({1, 1, 2, 2}, 13, 0.0, 1.0);
        auto cfg = small_config(4000);
        cfg.learning_rate = 1e-2;
        const auto model = train_generator(c, rf, cfg);
        const auto& h = model.loss_history();
        const auto avg = [&](std::size_t from, std::size_t to) {
            return std::accumulate(h.begin() + from, h.begin() + to, 0.0) / static_cast<double>(to - from);
        };
        CHECK(avg(150, 200) < avg(0, 50));
        CHECK(avg(h.size() - 100, h.size()) < 0.05);
    }
    SUBCASE("gaussian toy data") {
        const auto sched = TrajectorySchedule::rectified_flow(50);
        const std::size_t n = 512;
        const double mu[4] = {1.0, -1.0, 0.5, 0.0};
        Tensor data({n, 1, 2, 2});
        Rng drng(14);
        std::normal_distribution<double> nd(0.0, 0.1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < 4; ++j) data.data[i * 4 + j] = mu[j] + nd(drng);
        const auto cfg = small_config(1000);
        const auto model = train_generator(data, sched, cfg);
        const auto& h = model.loss_history();
        const double first = std::accumulate(h.begin(), h.begin() + 50, 0.0) / 50.0;
        const double last = std::accumulate(h.end() - 50, h.end(), 0.0) / 50.0;
        CHECK(last < 0.5 * first);

        Rng srng(15);
        const auto snapshot = model;
        const auto gen = sample(model, sched, n, {1, 2, 2}, srng);
        CHECK(model == snapshot);
        for (std::size_t j = 0; j < 4; ++j) {
            double m = 0.0, d = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                m += gen.data[i * 4 + j];
                d += data.data[i * 4 + j];
            }
            CHECK(std::abs(m - d) / n < 3.0 * 0.1 / std::sqrt(static_cast<double>(n)));
        }
        Rng again(15);
        CHECK(sample(model, sched, n, {1, 2, 2}, again) == gen);
        CHECK(train_generator(data, sched, cfg) == model);
    }
}

TEST_CASE("generator checkpoint") {
    const auto dd = TrajectorySchedule::ddpm(30);
    const auto data = test::random_tensor({8, 2, 4, 4}, 16);
    const auto model = train_generator(data, dd, small_config(5));
    const auto bytes = model.serialize();
    const auto back = VelocityModel::deserialize(bytes);
    CHECK(back == model);
    CHECK(back.serialize() == bytes);
    CHECK(back.schedule() == dd);
    auto bad = bytes;
    bad[6] = '2';
    CHECK_THROWS_AS(VelocityModel::deserialize(bad), VersionError);
    CHECK_THROWS_AS(VelocityModel::deserialize(std::span(bytes.data(), 40)), IntegrityError);
    CHECK_THROWS_AS(VelocityModel(Shape{1, 3, 3}, dd, {}), ShapeError);
}
