#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "cfx/tensor.hpp"
#include "json.hpp"

namespace cfx {

using Rng = std::mt19937_64;

namespace nn {

enum class Activation { relu, leaky_relu, softplus, tanh, identity };

inline constexpr double kLeakySlope = 0.01;

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);
// ReLU is the only member without a continuous derivative.
inline bool is_smooth(Activation a) { return a != Activation::relu; }

struct Conv2d {
    std::size_t in_ch = 1, out_ch = 1, kernel = 3, stride = 1, pad = 1;
    Tensor weight, bias;
};

struct Dense {
    std::size_t in = 1, out = 1;
    Tensor weight, bias;
};

struct Act {
    Activation kind = Activation::identity;
};

struct Reshape {
    Shape sample_shape;
};

// Nearest-neighbour upsampling of (C, H, W) samples.
struct Upsample {
    std::size_t factor = 2;
};

using Layer = std::variant<Conv2d, Dense, Act, Reshape, Upsample>;

Layer conv(std::size_t in_ch, std::size_t out_ch, std::size_t stride = 1, std::size_t kernel = 3);
Layer dense(std::size_t in, std::size_t out);
Layer act(Activation a);
Layer reshape(Shape sample_shape);
Layer upsample(std::size_t factor = 2);

// Layer inputs recorded during a forward pass, consumed by backward().
struct Tape {
    std::vector<Tensor> inputs;
};

// One gradient tensor per parameter, in parameters() order.
using ParamGrads = std::vector<Tensor>;

// Feed-forward stack of layers. Forward and backward are const: all
// per-call state lives in the Tape, so a frozen network can be shared across
// threads.
class Network {
public:
    Network() = default;
    Network(Shape input_sample_shape, std::vector<Layer> layers);

    const Shape& input_shape() const { return input_shape_; }
    const Shape& output_shape() const { return output_shape_; }
    const std::vector<Layer>& layers() const { return layers_; }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const;
    // Returns dL/dinput (empty tensor when need_input_grad is false) and
    // accumulates dL/dparams into grads when it is non-null.
    Tensor backward(const Tape& tape, const Tensor& grad_out, ParamGrads* grads, bool need_input_grad = true) const;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    ParamGrads zero_grads() const;
    std::size_t parameter_count() const;

    // He-normal weights, zero biases.
    void init(Rng& rng);

    // Every activation layer swapped for the given kind.
    Network with_activations(Activation hidden) const;
    bool all_activations_smooth() const;

    nlohmann::json describe() const;
    static Network from_description(const nlohmann::json& j);

    bool operator==(const Network& other) const;

private:
    Shape input_shape_;
    Shape output_shape_;
    std::vector<Layer> layers_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
};

class Adam {
public:
    Adam(const Network& net, AdamConfig cfg);
    void step(Network& net, const ParamGrads& grads);
    AdamConfig& config() { return cfg_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::uint64_t t_ = 0;
};

struct LossAndGrad {
    double loss = 0.0;
    Tensor grad;  // d(loss)/d(prediction)
};

Tensor softmax(const Tensor& logits, double temperature = 1.0);
Tensor one_hot(std::span<const int> labels, std::size_t classes);
std::vector<int> argmax_rows(const Tensor& logits);

// Batch-mean cross-entropy against target distributions.
LossAndGrad cross_entropy(const Tensor& logits, const Tensor& targets);
// Batch-mean KL(teacher || student) on temperature-softened distributions,
// multiplied by temperature^2.
LossAndGrad distill_kl(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);
// Mean over all elements.
LossAndGrad mse(const Tensor& prediction, const Tensor& target);

}  // namespace nn
}  // namespace cfx
