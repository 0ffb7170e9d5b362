#include <cmath>
#include <filesystem>
#include <set>

#include "cfx/archive.hpp"
#include "cfx/dataset.hpp"
#include "doctest.h"

using namespace cfx;

namespace {

DatasetSpec small_spec(std::size_t n = 200, double corr = 0.95, std::uint64_t seed = 1) {
    DatasetSpec s;
    s.n_samples = n;
    s.correlation = corr;
    s.seed = seed;
    return s;
}

// Pearson chi-square on the 2x2 table label x confound-present, 1 dof.
double chi_square_p(const LabeledDataset& ds) {
    double table[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < ds.size(); ++i) table[ds.labels[i]][ds.confound_present(i) ? 1 : 0] += 1;
    const double n = static_cast<double>(ds.size());
    double chi = 0.0;
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            const double e = (table[r][0] + table[r][1]) * (table[0][c] + table[1][c]) / n;
            chi += (table[r][c] - e) * (table[r][c] - e) / e;
        }
    return std::erfc(std::sqrt(chi / 2.0));
}

}  // namespace

TEST_CASE("synthesize confound rates") {
    SUBCASE("full correlation") {
        const auto ds = synthesize(small_spec(100, 1.0));
        CHECK(ds.size() == 100);
        for (std::size_t i = 0; i < 100; ++i) CHECK(ds.confound_flags[i]);
    }
    SUBCASE("independent confound at 0.5") {
        const auto ds = synthesize(small_spec(2000, 0.5, 7));
        CHECK(chi_square_p(ds) > 0.01);
    }
    SUBCASE("agreement fraction within rounding") {
        for (double corr : {0.0, 0.37, 0.95}) {
            const auto ds = synthesize(small_spec(501, corr, 3));
            const auto agree = std::count(ds.confound_flags.begin(), ds.confound_flags.end(), true);
            CHECK(std::abs(static_cast<double>(agree) / 501.0 - corr) <= 1.0 / 501.0);
        }
    }
    SUBCASE("per-class agreement within binomial 99% interval") {
        const auto ds = synthesize(small_spec(2000, 0.8, 11));
        for (int c = 0; c < 2; ++c) {
            double n = 0, agree = 0;
            for (std::size_t i = 0; i < ds.size(); ++i)
                if (ds.labels[i] == c) {
                    n += 1;
                    agree += ds.confound_flags[i] ? 1 : 0;
                }
            CHECK(std::abs(agree / n - 0.8) < 2.576 * std::sqrt(0.8 * 0.2 / n));
        }
    }
}

TEST_CASE("synthesize invariants") {
    for (auto tf : {TrueFeature::shape, TrueFeature::stripe_orientation}) {
        auto spec = small_spec(300, 0.9, 5);
        spec.true_feature = tf;
        Tensor clean;
        const auto ds = synthesize(spec, &clean);
        for (double v : ds.images.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (std::size_t i = 0; i < ds.size(); ++i) CHECK(infer_true_label(spec, clean.sample(i)) == ds.labels[i]);
        auto quiet = spec;
        quiet.noise_std = 0.02;
        const auto low = synthesize(quiet);
        for (std::size_t i = 0; i < low.size(); ++i) CHECK(infer_true_label(quiet, low.images.sample(i)) == low.labels[i]);
        CHECK(synthesize(spec) == ds);
        CHECK(serialize(synthesize(spec)) == serialize(ds));
    }
    auto rgb = small_spec(50);
    rgb.channels = 3;
    rgb.confound_feature = ConfoundFeature::background_tint;
    const auto ds = synthesize(rgb);
    CHECK(ds.images.shape == Shape{50, 3, 16, 16});
}

TEST_CASE("synthesize rejects invalid specs") {
    auto s = small_spec();
    s.image_size = 6;
    CHECK_THROWS_AS(synthesize(s), ConfigError);
    s = small_spec();
    s.confound_feature = ConfoundFeature::background_tint;
    CHECK_THROWS_AS(synthesize(s), ConfigError);
    s = small_spec();
    s.correlation = 1.5;
    CHECK_THROWS_AS(synthesize(s), ConfigError);
    s = small_spec();
    s.n_samples = 1;
    CHECK_THROWS_AS(synthesize(s), ConfigError);
}

TEST_CASE("spec json is strict") {
    const auto j = to_json(small_spec());
    CHECK(dataset_spec_from_json(j) == small_spec());
    auto extra = j;
    extra["colour"] = 1;
    CHECK_THROWS_AS(dataset_spec_from_json(extra), ConfigError);
    auto missing = j;
    missing.erase("seed");
    try {
        dataset_spec_from_json(missing);
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("seed") != std::string::npos);
    }
    auto bad_enum = j;
    bad_enum["true_feature"] = "colour";
    CHECK_THROWS_AS(dataset_spec_from_json(bad_enum), ConfigError);
}

TEST_CASE("split") {
    const auto ds = synthesize(small_spec(100, 0.9, 2));
    SUBCASE("80/10/10") {
        const auto s = split(ds, {0.8, 0.1, 0.1});
        CHECK(s.train.size() == 80);
        CHECK(s.val.size() == 10);
        CHECK(s.test.size() == 10);
        CHECK(s.train.split == Split::train);
        CHECK(s.test.split == Split::test);
    }
    SUBCASE("degenerate") {
        const auto s = split(ds, {1.0, 0.0, 0.0});
        CHECK(s.train.size() == 100);
        CHECK(s.val.size() == 0);
        CHECK(s.test.size() == 0);
    }
    SUBCASE("stratified and exhaustive") {
        const auto s = split(ds, {0.5, 0.25, 0.25});
        const double n1 = static_cast<double>(std::count(ds.labels.begin(), ds.labels.end(), 1));
        const double fr[3] = {0.5, 0.25, 0.25};
        const LabeledDataset* parts[3] = {&s.train, &s.val, &s.test};
        std::size_t total = 0;
        for (int p = 0; p < 3; ++p) {
            const double c1 = static_cast<double>(std::count(parts[p]->labels.begin(), parts[p]->labels.end(), 1));
            CHECK(std::abs(c1 - fr[p] * n1) <= 1.0);
            total += parts[p]->size();
        }
        CHECK(total == 100);
        // every image lands in exactly one split
        std::multiset<std::vector<double>> all, got;
        for (std::size_t i = 0; i < ds.size(); ++i) all.insert({ds.images.sample(i).begin(), ds.images.sample(i).end()});
        for (auto* p : parts)
            for (std::size_t i = 0; i < p->size(); ++i)
                got.insert({p->images.sample(i).begin(), p->images.sample(i).end()});
        CHECK(all == got);
    }
    SUBCASE("bad fractions") {
        CHECK_THROWS_AS(split(ds, {0.5, 0.2, 0.2}), ConfigError);
        CHECK_THROWS_AS(split(ds, {1.2, -0.1, -0.1}), ConfigError);
    }
}

TEST_CASE("dataset persistence") {
    const auto dir = std::filesystem::temp_directory_path() / "cfx_dataset_test";
    std::filesystem::create_directories(dir);
    const auto ds = split(synthesize(small_spec(60)), {0.5, 0.25, 0.25}).val;
    save(ds, dir / "d.cfxds");
    const auto back = load_dataset(dir / "d.cfxds");
    CHECK(back == ds);
    CHECK(serialize(back) == serialize(ds));

    auto bytes = read_file_bytes(dir / "d.cfxds");
    write_file_atomic(dir / "trunc.cfxds", std::span(bytes.data(), bytes.size() / 2));
    CHECK_THROWS_AS(load_dataset(dir / "trunc.cfxds"), IntegrityError);
    write_file_atomic(dir / "empty.cfxds", std::span<const std::uint8_t>());
    CHECK_THROWS_AS(load_dataset(dir / "empty.cfxds"), IntegrityError);
    bytes[5] = '9';
    CHECK_THROWS_AS(deserialize_dataset(bytes), VersionError);

    export_pngs(ds, dir / "png", 3);
    CHECK(std::distance(std::filesystem::directory_iterator(dir / "png"), {}) == 3);
    std::filesystem::remove_all(dir);
}
