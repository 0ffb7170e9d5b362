#include <cmath>

#include "cfx/classifiers.hpp"
#include "cfx/errors.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cfx;

namespace {

// Two-class linear model on 1x1x3 inputs: logit_c = w_c . x.
Classifier linear_classifier() {
    nn::Network net({1, 1, 3}, {nn::reshape({3}), nn::dense(3, 2)});
    const auto params = net.parameters();
    params[0]->data = {0.5, -1.0, 2.0, -0.3, 0.8, -1.5};
    params[1]->data = {0.1, -0.2};
    return Classifier(std::move(net), 2, ActivationFamily::standard);
}

Tensor one_hot(std::vector<int> labels, std::size_t c) {
    Tensor y({labels.size(), c});
    for (std::size_t n = 0; n < labels.size(); ++n) y.data[n * c + static_cast<std::size_t>(labels[n])] = 1.0;
    return y;
}

double linf(const Tensor& a, const Tensor& b, std::size_t row) {
    const std::size_t ss = a.sample_size();
    double m = 0.0;
    for (std::size_t i = 0; i < ss; ++i) m = std::max(m, std::abs(a.data[row * ss + i] - b.data[row * ss + i]));
    return m;
}

double l2(const Tensor& a, const Tensor& b, std::size_t row) {
    const std::size_t ss = a.sample_size();
    double s = 0.0;
    for (std::size_t i = 0; i < ss; ++i) s += std::pow(a.data[row * ss + i] - b.data[row * ss + i], 2);
    return std::sqrt(s);
}

struct Toy {
    DatasetSplits splits;
    LabeledDataset balanced;  // correlation 0.5, independent seed
};

const Toy& toy() {
    static const Toy t = [] {
        DatasetSpec s;
        s.n_samples = 1200;
        s.seed = 11;
        Toy out{split(synthesize(s), {0.7, 0.15, 0.15}), {}};
        s.correlation = 0.5;
        s.n_samples = 600;
        s.seed = 12;
        out.balanced = synthesize(s);
        return out;
    }();
    return t;
}

const Classifier& toy_f() {
    static const Classifier f = [] {
        ClassifierConfig cc;
        cc.seed = 3;
        return train_base(toy().splits.train, toy().splits.val, cc);
    }();
    return f;
}

}  // namespace

TEST_CASE("smooth labels") {
    auto a = smooth_labels(one_hot({0}, 2), 0.1);
    CHECK(a.data[0] == doctest::Approx(0.95).epsilon(1e-12));
    CHECK(a.data[1] == doctest::Approx(0.05).epsilon(1e-12));

    const auto y = one_hot({1, 0}, 3);
    CHECK(smooth_labels(y, 0.0).data == y.data);

    auto b = smooth_labels(one_hot({2}, 5), 0.5);
    const std::vector<double> want{0.1, 0.1, 0.6, 0.1, 0.1};
    for (std::size_t i = 0; i < 5; ++i) CHECK(b.data[i] == doctest::Approx(want[i]).epsilon(1e-12));

    CHECK_THROWS_AS(smooth_labels(y, 1.0), DomainError);
    CHECK_THROWS_AS(smooth_labels(y, -0.1), DomainError);
}

TEST_CASE("smooth labels keep the argmax below the tie point") {
    for (double eps : {0.0, 0.3, 0.49}) {
        const auto s = smooth_labels(one_hot({0, 1}, 2), eps);
        CHECK(s.data[0] > s.data[1]);
        CHECK(s.data[3] > s.data[2]);
        CHECK(s.data[0] + s.data[1] == doctest::Approx(1.0));
    }
}

TEST_CASE("mixup batch") {
    const auto xi = test::random_tensor({2, 1, 2, 2}, 1);
    const auto xj = test::random_tensor({2, 1, 2, 2}, 2);
    const auto yi = one_hot({0, 1}, 2), yj = one_hot({1, 1}, 2);

    auto m = mixup_batch(xi, yi, xj, yj, 1.0);
    CHECK(m.x.data == xi.data);
    CHECK(m.y.data == yi.data);

    Tensor zeros({1, 1, 2, 2}), ones({1, 1, 2, 2}, 1.0);
    auto mid = mixup_batch(zeros, one_hot({0}, 2), ones, one_hot({1}, 2), 0.5);
    for (double v : mid.x.data) CHECK(v == 0.5);
    CHECK(mid.y.data == std::vector<double>{0.5, 0.5});

    auto a = mixup_batch(xi, yi, xj, yj, 0.3);
    auto b = mixup_batch(xj, yj, xi, yi, 0.7);
    CHECK(test::max_abs_diff(a.x, b.x) < 1e-15);
    CHECK(test::max_abs_diff(a.y, b.y) < 1e-15);

    CHECK_THROWS_AS(mixup_batch(xi, yi, xj, yj, 1.5), DomainError);
    CHECK_THROWS_AS(mixup_batch(xi, yi, xj, yj, -0.1), DomainError);
}

TEST_CASE("beta draws match the symmetric mean") {
    for (double beta : {0.4, 2.0}) {
        Rng rng(5);
        const int n = 10000;
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const double a = sample_beta(beta, beta, rng);
            REQUIRE(a >= 0.0);
            REQUIRE(a <= 1.0);
            sum += a;
        }
        const double sd = std::sqrt(1.0 / (4.0 * (2.0 * beta + 1.0)) / n);
        CHECK(std::abs(sum / n - 0.5) < 3.0 * sd);
    }
}

TEST_CASE("adversarial perturbation") {
    const auto clf = linear_classifier();
    Tensor x({1, 1, 1, 3}, {0.5, 0.5, 0.5});
    const std::vector<int> y{0};

    SurrogateSpec spec;
    spec.adv_epsilon = 0.0;
    CHECK(adversarial_perturb(clf, x, y, spec).data == x.data);
    spec.adv_epsilon = -0.1;
    CHECK_THROWS_AS(adversarial_perturb(clf, x, y, spec), DomainError);

    SUBCASE("one linf step is the signed gradient step") {
        spec.adv_epsilon = 0.1;
        spec.adv_steps = 1;
        spec.adv_norm = AdvNorm::linf;
        // d CE / dx = (p - e_y) W = (p1) (w1 - w0) for y = 0
        const std::vector<double> w0{0.5, -1.0, 2.0}, w1{-0.3, 0.8, -1.5};
        const auto adv = adversarial_perturb(clf, x, y, spec);
        for (std::size_t i = 0; i < 3; ++i) {
            const double sign = (w1[i] - w0[i]) > 0 ? 1.0 : -1.0;
            CHECK(adv.data[i] == doctest::Approx(0.5 + 0.1 * sign).epsilon(1e-12));
        }
    }

    SUBCASE("the budget holds and the loss does not drop") {
        nn::Network net({1, 4, 4}, {nn::conv(1, 3), nn::act(nn::Activation::softplus), nn::reshape({48}), nn::dense(48, 2)});
        Rng init(9);
        net.init(init);
        const Classifier small(std::move(net), 2, ActivationFamily::smooth);
        Rng rng(17);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double worst = 0.0;
        bool monotone = true;
        for (int probe = 0; probe < 1000; ++probe) {
            SurrogateSpec s;
            s.adv_norm = probe % 2 ? AdvNorm::l2 : AdvNorm::linf;
            s.adv_epsilon = 0.01 + 0.3 * u(rng);
            s.adv_steps = 1 + probe % 4;
            Tensor xp({1, 1, 4, 4});
            for (auto& v : xp.data) v = u(rng);
            const std::vector<int> yp{probe % 3 == 0 ? 1 : 0};
            const auto adv = adversarial_perturb(small, xp, yp, s);
            const double d = s.adv_norm == AdvNorm::linf ? linf(adv, xp, 0) : l2(adv, xp, 0);
            worst = std::max(worst, d - s.adv_epsilon);
            if (small.loss(adv, yp) < small.loss(xp, yp) - 1e-6) monotone = false;
        }
        CHECK(worst <= 1e-6);
        CHECK(monotone);
    }
}

TEST_CASE("gradient source degenerate cases") {
    const auto codec = LatentCodec::identity({1, 4, 4});
    auto make = [](std::uint64_t seed) {
        return Classifier::create({1, 4, 4}, 2, ActivationFamily::smooth, 4, seed);
    };
    const auto f = make(1);
    const auto f_other = make(2);
    const auto z = test::random_tensor({2, 1, 4, 4}, 4, 0.1, 0.9);
    const std::vector<int> target{1, 0};
    Rng rng(0);

    const auto vanilla = GradientSource(gradient_source_from_name("vanilla"), f, f_other).gradient(codec, z, target, rng);

    SUBCASE("smoothgrad with zero noise is vanilla") {
        auto spec = gradient_source_from_name("smoothgrad");
        spec.smoothgrad_sigma = 0.0;
        for (std::size_t n : {1u, 5u}) {
            spec.smoothgrad_samples = n;
            const auto g = GradientSource(spec, f, f_other).gradient(codec, z, target, rng);
            CHECK(g.data == vanilla.data);
        }
    }

    SUBCASE("surrogate equal to f gives the vanilla gradient") {
        const auto g = GradientSource(gradient_source_from_name("surrogate"), f_other, f).gradient(codec, z, target, rng);
        CHECK(g.data == vanilla.data);
    }

    SUBCASE("integrated gradients completeness") {
        auto spec = gradient_source_from_name("integrated_gradients");
        spec.ig_steps = 256;
        spec.ig_baseline = IgBaseline::zeros;
        const GradientSource src(spec, f, f_other);
        const auto attr = src.gradient(codec, z, target, rng);
        const Tensor zero(z.shape);
        double sum = 0.0;
        for (double v : attr.data) sum += v;
        const double delta = src.loss(codec, z, target) - src.loss(codec, zero, target);
        CHECK(std::abs(sum - delta) <= 0.01 * std::abs(delta));
    }

    CHECK_THROWS_AS(gradient_source_from_name("saliency"), ConfigError);
}

TEST_CASE("base classifier on the toy task") {
    const auto& f = toy_f();
    const auto& val = toy().splits.val;
    CHECK(f.accuracy(val.images, val.labels) > 0.9);

    // Clever Hans: accuracy where the confound agrees beats disagreeing rows
    const auto& b = toy().balanced;
    const auto pred = f.predict(b.images);
    double hit[2] = {0, 0}, count[2] = {0, 0};
    for (std::size_t i = 0; i < b.size(); ++i) {
        const int g = b.confound_flags[i] ? 1 : 0;
        count[g] += 1;
        hit[g] += pred[i] == b.labels[i];
    }
    REQUIRE(count[0] > 50);
    CHECK(100.0 * (hit[1] / count[1] - hit[0] / count[0]) > 10.0);

    ClassifierConfig cc;
    cc.seed = 3;
    CHECK(train_base(toy().splits.train, toy().splits.val, cc) == f);
}

TEST_CASE("pure kl distillation agrees with the teacher") {
    SurrogateSpec spec;
    spec.lambda_mixup = spec.lambda_ls = spec.lambda_adv = 0.0;
    ClassifierConfig cc;
    cc.seed = 4;
    const auto& f = toy_f();
    const auto f_hat = distill_surrogate(f, toy().splits.train, toy().splits.val, spec, cc);
    CHECK(f_hat.family() == ActivationFamily::smooth);
    const auto& val = toy().splits.val;
    const auto a = f.predict(val.images), b = f_hat.predict(val.images);
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
    CHECK(static_cast<double>(same) / a.size() > 0.95);
    CHECK(f_hat.metadata().at("val_agreement").get<double>() > 0.95);
    CHECK(f_hat.curves().count("kl") == 1);
}
