#pragma once

#include <filesystem>
#include <vector>

#include "cfx/dataset.hpp"
#include "cfx/nn.hpp"

namespace cfx {

enum class CodecKind { identity, autoencoder };
std::string to_string(CodecKind k);
CodecKind codec_kind_from_string(const std::string& s);

struct AutoencoderConfig {
    std::size_t downsample = 2;  // power of two
    std::size_t latent_channels = 2;
    std::size_t width = 8;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 3e-3;
    double target_mse = 1e-3;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const AutoencoderConfig& c);
AutoencoderConfig autoencoder_config_from_json(const nlohmann::json& j);

// Encoder/decoder pair mapping (C, H, W) images to (c, h, w) latents.
// decode() always clips to [0, 1]; decode_vjp() pulls an image-space
// gradient back to the latent, treating the clip as pass-through on the
// closed interval and zero outside it.
class LatentCodec {
public:
    static LatentCodec identity(Shape image_shape);

    CodecKind kind() const { return kind_; }
    const Shape& image_shape() const { return image_shape_; }
    const Shape& latent_shape() const { return latent_shape_; }
    std::size_t downsample_factor() const { return downsample_; }
    // Validation reconstruction MSE recorded at fit time (0 for identity).
    double tolerance() const { return tolerance_; }
    // Mean squared encode(decode(z)) - z on held-out latents (0 for identity).
    double latent_tolerance() const { return latent_tolerance_; }
    const std::vector<double>& loss_history() const { return loss_history_; }

    Tensor encode(const Tensor& images) const;
    Tensor decode(const Tensor& latents) const;
    Tensor decode_vjp(const Tensor& latents, const Tensor& grad_images) const;

    std::vector<std::uint8_t> serialize() const;
    static LatentCodec deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static LatentCodec load(const std::filesystem::path& path);

    bool operator==(const LatentCodec&) const = default;

private:
    friend LatentCodec fit_autoencoder(const LabeledDataset&, const LabeledDataset&, const AutoencoderConfig&);

    Tensor decode_raw(const Tensor& latents, nn::Tape* tape) const;
    void check(const Tensor& t, const Shape& expected, const char* what) const;

    CodecKind kind_ = CodecKind::identity;
    Shape image_shape_, latent_shape_;
    std::size_t downsample_ = 1;
    double tolerance_ = 0.0;
    double latent_tolerance_ = 0.0;
    nn::Network encoder_, decoder_;
    std::vector<double> loss_history_;
};

// Trains the convolutional hourglass. Stops at the first epoch whose
// validation MSE reaches target_mse, or after `epochs`; either way the codec
// is returned with its measured tolerance.
LatentCodec fit_autoencoder(const LabeledDataset& train, const LabeledDataset& val, const AutoencoderConfig& cfg);

}  // namespace cfx
