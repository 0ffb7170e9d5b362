#include "cfx/codec.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cfx;

namespace {

LabeledDataset toy(std::size_t n, std::size_t size, std::uint64_t seed) {
    DatasetSpec s;
    s.n_samples = n;
    s.image_size = size;
    s.seed = seed;
    return synthesize(s);
}

}  // namespace

TEST_CASE("identity codec") {
    const auto codec = LatentCodec::identity({1, 8, 8});
    CHECK(codec.kind() == CodecKind::identity);
    CHECK(codec.latent_shape() == Shape{1, 8, 8});
    CHECK(codec.downsample_factor() == 1);
    const auto x = test::random_tensor({3, 1, 8, 8}, 1, 0.0, 1.0);
    CHECK(codec.encode(x) == x);
    CHECK(codec.decode(x) == x);
    const auto wide = test::random_tensor({3, 1, 8, 8}, 2, -0.5, 1.5);
    CHECK(codec.decode(wide) == clipped(wide, 0.0, 1.0));
    for (double v : codec.decode(Tensor({1, 1, 8, 8})).data) CHECK(v == 0.0);
    CHECK_THROWS_AS(codec.encode(Tensor({1, 1, 4, 4})), ShapeError);
    const auto g = test::random_tensor({3, 1, 8, 8}, 3);
    const auto vjp = codec.decode_vjp(wide, g);
    for (std::size_t i = 0; i < g.size(); ++i)
        CHECK(vjp.data[i] == ((wide.data[i] >= 0.0 && wide.data[i] <= 1.0) ? g.data[i] : 0.0));
}

TEST_CASE("autoencoder shapes and jacobian") {
    const auto ds = toy(64, 32, 1);
    AutoencoderConfig cfg;
    cfg.downsample = 4;
    cfg.epochs = 1;
    const auto codec = fit_autoencoder(ds, ds, cfg);
    CHECK(codec.latent_shape() == Shape{cfg.latent_channels, 8, 8});
    CHECK(codec.downsample_factor() == 4);
    const auto z = codec.encode(ds.images.slice(0, 2));
    CHECK(z.shape == Shape{2, cfg.latent_channels, 8, 8});
    CHECK_THROWS_AS(codec.decode(Tensor({1, 1, 8, 8})), ShapeError);

    // jvp through decode by central differences; the clip is inactive for
    // these probes only where the output stays inside (0, 1)
    const auto g = test::random_tensor({2, 1, 32, 32}, 5);
    const auto u = test::random_tensor(z.shape, 6);
    const double h = 1e-5;
    Tensor zp = z, zm = z;
    axpy(h, u, zp);
    axpy(-h, u, zm);
    const double fd = (dot(codec.decode(zp).data, g.data) - dot(codec.decode(zm).data, g.data)) / (2 * h);
    const double ad = dot(codec.decode_vjp(z, g).data, u.data);
    CHECK(test::rel_err(fd, ad) < 1e-3);
    CHECK(all_finite(codec.decode_vjp(z, g).data));
}

TEST_CASE("autoencoder fitting") {
    SUBCASE("loss decreases in one epoch") {
        const auto ds = toy(128, 16, 2);
        AutoencoderConfig cfg;
        cfg.epochs = 1;
        cfg.target_mse = 0.0;
        const auto codec = fit_autoencoder(ds, ds, cfg);
        REQUIRE(codec.loss_history().size() > 1);
        CHECK(codec.loss_history().back() < codec.loss_history().front());
        CHECK(codec.tolerance() > 0.0);
    }
    SUBCASE("constant images are reconstructed") {
        auto ds = toy(64, 16, 3);
        for (auto& v : ds.images.data) v = 0.4;
        AutoencoderConfig cfg;
        cfg.epochs = 40;
        cfg.batch_size = 16;
        cfg.target_mse = 1e-5;
        const auto codec = fit_autoencoder(ds, ds, cfg);
        const auto rec = codec.decode(codec.encode(ds.images));
        double mse = 0.0;
        for (std::size_t i = 0; i < rec.size(); ++i) mse += (rec.data[i] - 0.4) * (rec.data[i] - 0.4);
        CHECK(mse / static_cast<double>(rec.size()) < 1e-4);
    }
    SUBCASE("empty train split") {
        const auto ds = toy(10, 16, 4);
        CHECK_THROWS_AS(fit_autoencoder(ds.subset({}, Split::train), ds, {}), ConfigError);
    }
}

TEST_CASE("codec checkpoint roundtrip") {
    const auto ds = toy(32, 16, 5);
    AutoencoderConfig cfg;
    cfg.epochs = 1;
    const auto codec = fit_autoencoder(ds, ds, cfg);
    const auto back = LatentCodec::deserialize(codec.serialize());
    CHECK(back == codec);
    CHECK(back.serialize() == codec.serialize());
    const auto id = LatentCodec::identity({1, 16, 16});
    CHECK(LatentCodec::deserialize(id.serialize()) == id);
    CHECK(fit_autoencoder(ds, ds, cfg).serialize() == codec.serialize());
}
