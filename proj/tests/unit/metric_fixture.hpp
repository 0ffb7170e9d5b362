#pragma once

// Hand-built three-sample fixture for the metric suite. Images are 1x1x3
// pixel vectors; f predicts class 1 when pixel 0 exceeds 0.5, the surrogate
// when pixel 1 does.

#include <cmath>

#include "cfx/metrics.hpp"

namespace cfx::test {

inline Classifier threshold_classifier(std::size_t pixel, bool constant = false) {
    nn::Network net({1, 1, 3}, {nn::reshape({3}), nn::dense(3, 2)});
    const auto params = net.parameters();  // dense weight (2, 3), bias (2)
    if (constant) {
        params[1]->data = {1.0, 0.0};
    } else {
        params[0]->data[3 + pixel] = 10.0;
        params[1]->data = {0.0, -5.0};
    }
    return Classifier(std::move(net), 2, ActivationFamily::standard);
}

inline Tensor px(double a, double b, double c) { return Tensor({1, 1, 1, 3}, {a, b, c}); }

inline RunRecord fixture_run(const std::string& id, int label, Tensor x, std::vector<Tensor> cfs) {
    RunRecord r;
    r.id = id;
    r.label = label;
    r.target = 1 - label;
    r.factual = std::move(x);
    for (auto& c : cfs) {
        Counterfactual cf;
        cf.image = std::move(c);
        r.set.counterfactuals.push_back(std::move(cf));
        r.set.exclusions.emplace_back();
    }
    return r;
}

inline std::vector<RunRecord> fixture_runs() {
    return {fixture_run("a", 0, px(0.2, 0.2, 0.2), {px(0.8, 0.8, 0.2), px(0.8, 0.2, 0.2)}),
            fixture_run("b", 1, px(0.7, 0.7, 0.1), {px(0.3, 0.7, 0.1), px(0.7, 0.3, 0.5)}),
            fixture_run("c", 0, px(0.2, 0.9, 0.5), {px(0.2, 0.9, 0.5), px(0.9, 0.9, 0.5)})};
}

// Hand-computed aggregates of fixture_runs().
struct FixtureExpectation {
    double flip_rate = 400.0 / 6.0;                          // a1 a2 b1 c2 change f
    double nafr = 200.0 / 6.0;                               // a1 b2 change the surrogate
    double na_rate = 25.0;                                   // of the 4 f-flips only a1
    double sparsity = 100.0 * (11.0 / 3.0) / 6.0;            // 1/3 2/3 2/3 1/3 1 2/3
    double diversity = 100.0 * (2.0 - 1.0 / std::sqrt(2.0)) / 2.0;  // a: 1 - 1/sqrt2, b: 1, c: missing
    std::size_t n_diversity = 2;
};

}  // namespace cfx::test
