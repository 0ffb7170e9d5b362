#pragma once

#include <filesystem>
#include <map>

#include "cfx/codec.hpp"
#include "cfx/dataset.hpp"
#include "cfx/nn.hpp"

namespace cfx {

enum class ActivationFamily { standard, smooth };
std::string to_string(ActivationFamily f);

struct ClassifierConfig {
    std::size_t width = 8;
    std::size_t epochs = 5;
    std::size_t batch_size = 32;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;

    bool operator==(const ClassifierConfig&) const = default;
};

nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

// Logit-producing image classifier. The standard family uses ReLU, the
// smooth family softplus.
class Classifier {
public:
    Classifier() = default;
    Classifier(nn::Network net, std::size_t n_classes, ActivationFamily family);
    static Classifier create(const Shape& image_shape, std::size_t n_classes, ActivationFamily family,
                             std::size_t width, std::uint64_t seed);

    const nn::Network& network() const { return net_; }
    nn::Network& network() { return net_; }
    std::size_t n_classes() const { return n_classes_; }
    ActivationFamily family() const { return family_; }
    const Shape& input_shape() const { return net_.input_shape(); }

    Tensor logits(const Tensor& x) const;
    Tensor probabilities(const Tensor& x) const;
    std::vector<int> predict(const Tensor& x) const;
    double accuracy(const Tensor& x, std::span<const int> labels) const;

    // Summed cross-entropy of each sample against its target class. When
    // grad_x is given it receives d(loss)/dx, so each row is the gradient of
    // that sample's own loss.
    double loss(const Tensor& x, std::span<const int> targets, Tensor* grad_x = nullptr) const;
    double loss(const Tensor& x, const Tensor& target_dist, Tensor* grad_x = nullptr) const;

    // Training records. Curves are keyed by term name.
    std::map<std::string, std::vector<double>>& curves() { return curves_; }
    const std::map<std::string, std::vector<double>>& curves() const { return curves_; }
    nlohmann::json& metadata() { return metadata_; }
    const nlohmann::json& metadata() const { return metadata_; }

    std::vector<std::uint8_t> serialize() const;
    static Classifier deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static Classifier load(const std::filesystem::path& path);

    bool operator==(const Classifier& o) const {
        return net_ == o.net_ && n_classes_ == o.n_classes_ && family_ == o.family_ && curves_ == o.curves_ &&
               metadata_ == o.metadata_;
    }

private:
    nn::Network net_;
    std::size_t n_classes_ = 0;
    ActivationFamily family_ = ActivationFamily::standard;
    std::map<std::string, std::vector<double>> curves_;
    nlohmann::json metadata_ = nlohmann::json::object();
};

// Cross-entropy training of the black-box model f. Curves: "loss" per step,
// "train_accuracy" and "val_accuracy" per epoch.
Classifier train_base(const LabeledDataset& train, const LabeledDataset& val, const ClassifierConfig& cfg);

// Continues cross-entropy training of `clf` in place (curve "fine_tune_loss").
// cfg.width is ignored.
void fine_tune(Classifier& clf, const Tensor& images, std::span<const int> labels, const ClassifierConfig& cfg);

enum class AdvNorm { l2, linf };
std::string to_string(AdvNorm n);

struct SurrogateSpec {
    double lambda_mixup = 0.5;
    double lambda_ls = 0.5;
    double lambda_adv = 0.5;
    double mixup_beta = 0.4;
    double ls_epsilon = 0.1;
    double adv_epsilon = 0.05;
    AdvNorm adv_norm = AdvNorm::linf;
    std::size_t adv_steps = 3;
    double distill_temperature = 2.0;

    void validate() const;
    bool operator==(const SurrogateSpec&) const = default;
};

nlohmann::json to_json(const SurrogateSpec& s);
SurrogateSpec surrogate_spec_from_json(const nlohmann::json& j);

double sample_beta(double a, double b, Rng& rng);

struct MixedBatch {
    Tensor x, y;
};

// x = alpha x_i + (1 - alpha) x_j, same for the label distributions.
MixedBatch mixup_batch(const Tensor& x_i, const Tensor& y_i, const Tensor& x_j, const Tensor& y_j, double alpha);

// (1 - eps) y + eps / C per row, C = number of columns.
Tensor smooth_labels(const Tensor& y, double epsilon);

// Projected gradient ascent on the summed cross-entropy inside the
// per-sample ball of radius spec.adv_epsilon, then clipped to [0, 1]. A step
// that would lower the loss is halved until it does not.
Tensor adversarial_perturb(const Classifier& clf, const Tensor& x, std::span<const int> labels,
                           const SurrogateSpec& spec);

// Distils a smooth-family student from f on its own hard predictions.
// Curves: "kl", "mixup", "ls", "adv", "total" per step; metadata records
// "val_agreement" with f.
Classifier distill_surrogate(const Classifier& f, const LabeledDataset& train, const LabeledDataset& val,
                             const SurrogateSpec& spec, const ClassifierConfig& cfg);

// Mean over rows of |grad l(x) - grad l(x + delta)| / |delta| with a random
// direction delta of the given norm.
double gradient_variation(const Classifier& clf, const Tensor& x, std::span<const int> labels, double delta_norm,
                          Rng& rng);

enum class GradientKind { vanilla, smoothgrad, integrated_gradients, surrogate, product };
std::string to_string(GradientKind k);
GradientKind gradient_kind_from_string(const std::string& s);

enum class IgBaseline { zeros, blurred_input };

struct GradientSourceSpec {
    GradientKind kind = GradientKind::surrogate;
    double smoothgrad_sigma = 0.1;
    std::size_t smoothgrad_samples = 8;
    std::size_t ig_steps = 16;
    IgBaseline ig_baseline = IgBaseline::zeros;
    double ig_blur_sigma = 2.0;
    std::vector<GradientSourceSpec> factors;  // product only, exactly two

    void validate() const;
    bool operator==(const GradientSourceSpec&) const = default;
};

nlohmann::json to_json(const GradientSourceSpec& s);
GradientSourceSpec gradient_source_from_json(const nlohmann::json& j);
// Parses "vanilla", "surrogate", "smoothgrad*integrated_gradients", ...
GradientSourceSpec gradient_source_from_name(const std::string& name);
std::string name_of(const GradientSourceSpec& s);

// Gradient of the guidance loss l(clf(D(z)), y') with respect to the latent
// z, in one of the ablation variants.
class GradientSource {
public:
    GradientSource(GradientSourceSpec spec, const Classifier& f, const Classifier& f_hat);

    const GradientSourceSpec& spec() const { return spec_; }
    // Classifier whose loss the source tracks: f_hat for surrogate, f otherwise.
    const Classifier& loss_classifier() const;

    // Summed guidance loss at z.
    double loss(const LatentCodec& codec, const Tensor& z, std::span<const int> targets) const;
    Tensor gradient(const LatentCodec& codec, const Tensor& z, std::span<const int> targets, Rng& rng) const;

private:
    Tensor gradient(const GradientSourceSpec& s, const LatentCodec& codec, const Tensor& z,
                    std::span<const int> targets, Rng& rng) const;

    GradientSourceSpec spec_;
    const Classifier* f_;
    const Classifier* f_hat_;
};

// d l(clf(D(z)), y') / dz.
Tensor latent_loss_gradient(const Classifier& clf, const LatentCodec& codec, const Tensor& z,
                            std::span<const int> targets, double* loss = nullptr);

}  // namespace cfx
