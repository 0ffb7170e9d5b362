#include "cfx/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cfx/archive.hpp"

namespace cfx {

namespace {

constexpr const char* kMagic = "CFXAE1";

Shape with_batch(std::size_t n, const Shape& s) {
    Shape out{n};
    out.insert(out.end(), s.begin(), s.end());
    return out;
}

}  // namespace

std::string to_string(CodecKind k) { return k == CodecKind::identity ? "identity" : "autoencoder"; }

CodecKind codec_kind_from_string(const std::string& s) {
    if (s == "identity") return CodecKind::identity;
    if (s == "autoencoder") return CodecKind::autoencoder;
    throw ConfigError("unknown codec kind '" + s + "'");
}

nlohmann::json to_json(const AutoencoderConfig& c) {
    return {{"downsample", c.downsample},       {"latent_channels", c.latent_channels},
            {"width", c.width},                 {"epochs", c.epochs},
            {"batch_size", c.batch_size},       {"learning_rate", c.learning_rate},
            {"target_mse", c.target_mse},       {"seed", c.seed}};
}

AutoencoderConfig autoencoder_config_from_json(const nlohmann::json& j) {
    AutoencoderConfig c;
    const auto ref = to_json(c);
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ConfigError("unknown autoencoder key '" + k + "'");
    try {
        c.downsample = j.value("downsample", c.downsample);
        c.latent_channels = j.value("latent_channels", c.latent_channels);
        c.width = j.value("width", c.width);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.target_mse = j.value("target_mse", c.target_mse);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid autoencoder field: ") + e.what());
    }
    return c;
}

LatentCodec LatentCodec::identity(Shape image_shape) {
    if (image_shape.size() != 3) throw ShapeError("image shape must be (C, H, W), got " + to_string(image_shape));
    LatentCodec c;
    c.kind_ = CodecKind::identity;
    c.image_shape_ = image_shape;
    c.latent_shape_ = image_shape;
    c.downsample_ = 1;
    return c;
}

void LatentCodec::check(const Tensor& t, const Shape& expected, const char* what) const {
    if (t.rank() != 4 || t.sample_shape() != expected)
        throw ShapeError(std::string(what) + ": got " + to_string(t.shape) + ", expected (N, " +
                         to_string(expected).substr(1));
}

Tensor LatentCodec::encode(const Tensor& images) const {
    check(images, image_shape_, "encode");
    if (kind_ == CodecKind::identity) return images;
    return encoder_.forward(images).reshaped(with_batch(images.batch(), latent_shape_));
}

Tensor LatentCodec::decode_raw(const Tensor& latents, nn::Tape* tape) const {
    check(latents, latent_shape_, "decode");
    if (kind_ == CodecKind::identity) return latents;
    return decoder_.forward(latents, tape).reshaped(with_batch(latents.batch(), image_shape_));
}

Tensor LatentCodec::decode(const Tensor& latents) const { return clipped(decode_raw(latents, nullptr), 0.0, 1.0); }

Tensor LatentCodec::decode_vjp(const Tensor& latents, const Tensor& grad_images) const {
    nn::Tape tape;
    Tensor raw = decode_raw(latents, kind_ == CodecKind::identity ? nullptr : &tape);
    require_same_shape(raw, grad_images, "decode_vjp");
    Tensor g = grad_images;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (raw.data[i] < 0.0 || raw.data[i] > 1.0) g.data[i] = 0.0;
    if (kind_ == CodecKind::identity) return g;
    return decoder_.backward(tape, g, nullptr).reshaped(latents.shape);
}

std::vector<std::uint8_t> LatentCodec::serialize() const {
    nlohmann::json header = {{"kind", to_string(kind_)},
                             {"image_shape", image_shape_},
                             {"latent_shape", latent_shape_},
                             {"downsample", downsample_},
                             {"tolerance", tolerance_},
                             {"latent_tolerance", latent_tolerance_},
                             {"loss_history", loss_history_}};
    if (kind_ == CodecKind::autoencoder) {
        header["encoder"] = encoder_.describe();
        header["decoder"] = decoder_.describe();
    }
    ArchiveWriter w(kMagic, header);
    if (kind_ == CodecKind::autoencoder) {
        const auto ep = encoder_.parameters();
        for (std::size_t i = 0; i < ep.size(); ++i) w.add("encoder." + std::to_string(i), *ep[i]);
        const auto dp = decoder_.parameters();
        for (std::size_t i = 0; i < dp.size(); ++i) w.add("decoder." + std::to_string(i), *dp[i]);
    }
    return w.bytes();
}

LatentCodec LatentCodec::deserialize(std::span<const std::uint8_t> bytes) {
    const auto r = ArchiveReader::parse(bytes, kMagic);
    LatentCodec c;
    try {
        const auto& h = r.header();
        c.kind_ = codec_kind_from_string(h.at("kind"));
        c.image_shape_ = h.at("image_shape").get<Shape>();
        c.latent_shape_ = h.at("latent_shape").get<Shape>();
        c.downsample_ = h.at("downsample");
        c.tolerance_ = h.at("tolerance");
        c.latent_tolerance_ = h.at("latent_tolerance");
        c.loss_history_ = h.at("loss_history").get<std::vector<double>>();
        if (c.kind_ == CodecKind::autoencoder) {
            c.encoder_ = nn::Network::from_description(h.at("encoder"));
            c.decoder_ = nn::Network::from_description(h.at("decoder"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("codec header incomplete: ") + e.what(), 0);
    }
    if (c.kind_ == CodecKind::autoencoder) {
        auto ep = c.encoder_.parameters();
        for (std::size_t i = 0; i < ep.size(); ++i) *ep[i] = r.tensor("encoder." + std::to_string(i));
        auto dp = c.decoder_.parameters();
        for (std::size_t i = 0; i < dp.size(); ++i) *dp[i] = r.tensor("decoder." + std::to_string(i));
    }
    return c;
}

void LatentCodec::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
LatentCodec LatentCodec::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

LatentCodec fit_autoencoder(const LabeledDataset& train, const LabeledDataset& val, const AutoencoderConfig& cfg) {
    if (train.size() == 0) throw ConfigError("autoencoder training split is empty");
    std::size_t levels = 0;
    for (std::size_t f = cfg.downsample; f > 1; f /= 2) {
        if (f % 2 != 0) throw ConfigError("autoencoder downsample must be a power of two");
        ++levels;
    }
    const Shape img = train.images.sample_shape();
    if (img[1] % cfg.downsample != 0 || img[2] % cfg.downsample != 0)
        throw ShapeError("image size " + std::to_string(img[1]) + " is not divisible by downsample " +
                         std::to_string(cfg.downsample));
    const std::size_t c = img[0], h = img[1] / cfg.downsample, w = img[2] / cfg.downsample;
    const auto smooth = nn::Activation::softplus;

    std::vector<nn::Layer> enc{nn::conv(c, cfg.width), nn::act(smooth)};
    for (std::size_t l = 0; l < levels; ++l) {
        enc.push_back(nn::conv(cfg.width, cfg.width, 2));
        enc.push_back(nn::act(smooth));
    }
    enc.push_back(nn::conv(cfg.width, cfg.latent_channels));
    std::vector<nn::Layer> dec{nn::conv(cfg.latent_channels, cfg.width), nn::act(smooth)};
    for (std::size_t l = 0; l < levels; ++l) {
        dec.push_back(nn::upsample(2));
        dec.push_back(nn::conv(cfg.width, cfg.width));
        dec.push_back(nn::act(smooth));
    }
    dec.push_back(nn::conv(cfg.width, c));

    LatentCodec codec;
    codec.kind_ = CodecKind::autoencoder;
    codec.image_shape_ = img;
    codec.latent_shape_ = {cfg.latent_channels, h, w};
    codec.downsample_ = cfg.downsample;
    codec.encoder_ = nn::Network(img, enc);
    codec.decoder_ = nn::Network(codec.latent_shape_, dec);

    Rng rng(cfg.seed);
    codec.encoder_.init(rng);
    codec.decoder_.init(rng);
    {
        // start the output layer near the mean image
        auto ps = codec.decoder_.parameters();
        Tensor& w_out = *ps[ps.size() - 2];
        Tensor& b_out = *ps.back();
        for (auto& v : w_out.data) v *= 0.1;
        std::fill(b_out.data.begin(), b_out.data.end(), mean(train.images.data));
    }
    nn::Adam enc_opt(codec.encoder_, {cfg.learning_rate});
    nn::Adam dec_opt(codec.decoder_, {cfg.learning_rate});

    const LabeledDataset& held_out = val.size() > 0 ? val : train;
    auto val_mse = [&] {
        const Tensor rec = codec.decode(codec.encode(held_out.images));
        return nn::mse(rec, held_out.images).loss;
    };

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const double total_steps = static_cast<double>(per_epoch * std::max<std::size_t>(cfg.epochs, 1));
    double tol = val_mse();
    for (std::size_t epoch = 0; epoch < cfg.epochs && tol > cfg.target_mse; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - start);
            const Tensor x = train.images.gather(std::span(order).subspan(start, count));
            nn::Tape et, dt;
            const Tensor z = codec.encoder_.forward(x, &et);
            const Tensor rec = codec.decoder_.forward(z, &dt);
            auto loss = nn::mse(rec, x);
            if (!std::isfinite(loss.loss)) throw TrainingError("autoencoder loss is not finite", step);
            codec.loss_history_.push_back(loss.loss);
            // cosine annealing to zero over the epoch budget
            const double lr =
                0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
            enc_opt.config().lr = lr;
            dec_opt.config().lr = lr;
            auto dg = codec.decoder_.zero_grads();
            const Tensor gz = codec.decoder_.backward(dt, loss.grad, &dg);
            auto eg = codec.encoder_.zero_grads();
            codec.encoder_.backward(et, gz, &eg, false);
            dec_opt.step(codec.decoder_, dg);
            enc_opt.step(codec.encoder_, eg);
        }
        tol = val_mse();
    }
    codec.tolerance_ = tol;
    const Tensor z = codec.encode(held_out.images);
    codec.latent_tolerance_ = nn::mse(codec.encode(codec.decode(z)), z).loss;
    return codec;
}

}  // namespace cfx
