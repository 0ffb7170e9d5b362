#include "cfx/nn.hpp"

#include <algorithm>
#include <cmath>

#include "cfx/kernels.hpp"

namespace cfx::nn {

namespace {

double apply(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::leaky_relu: return x > 0.0 ? x : kLeakySlope * x;
        case Activation::softplus: return x > 30.0 ? x : std::log1p(std::exp(x));
        case Activation::tanh: return std::tanh(x);
        case Activation::identity: return x;
    }
    return x;
}

double derivative(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::leaky_relu: return x > 0.0 ? 1.0 : kLeakySlope;
        case Activation::softplus: return 1.0 / (1.0 + std::exp(-x));
        case Activation::tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

Shape layer_output(const Layer& layer, const Shape& in) {
    return std::visit(
        [&](const auto& l) -> Shape {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Conv2d>) {
                if (in.size() != 3 || in[0] != l.in_ch)
                    throw ShapeError("conv expects (" + std::to_string(l.in_ch) + ", H, W), got " + cfx::to_string(in));
                kernels::ConvDims d{1, l.in_ch, in[1], in[2], l.out_ch, l.kernel, l.stride, l.pad};
                return {l.out_ch, d.out_h(), d.out_w()};
            } else if constexpr (std::is_same_v<T, Dense>) {
                if (numel(in) != l.in)
                    throw ShapeError("dense expects " + std::to_string(l.in) + " inputs, got " + cfx::to_string(in));
                return {l.out};
            } else if constexpr (std::is_same_v<T, Act>) {
                return in;
            } else if constexpr (std::is_same_v<T, Reshape>) {
                if (numel(l.sample_shape) != numel(in))
                    throw ShapeError("reshape " + cfx::to_string(in) + " to " + cfx::to_string(l.sample_shape));
                return l.sample_shape;
            } else {
                if (in.size() != 3) throw ShapeError("upsample expects (C, H, W)");
                return {in[0], in[1] * l.factor, in[2] * l.factor};
            }
        },
        layer);
}

Shape with_batch(std::size_t n, const Shape& s) {
    Shape out{n};
    out.insert(out.end(), s.begin(), s.end());
    return out;
}

}  // namespace

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::softplus: return "softplus";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Activation activation_from_string(const std::string& s) {
    for (auto a : {Activation::relu, Activation::leaky_relu, Activation::softplus, Activation::tanh,
                   Activation::identity})
        if (to_string(a) == s) return a;
    throw ConfigError("unknown activation '" + s + "'");
}

Layer conv(std::size_t in_ch, std::size_t out_ch, std::size_t stride, std::size_t kernel) {
    Conv2d c{in_ch, out_ch, kernel, stride, kernel / 2, Tensor({out_ch, in_ch, kernel, kernel}), Tensor({out_ch})};
    return c;
}

Layer dense(std::size_t in, std::size_t out) { return Dense{in, out, Tensor({out, in}), Tensor({out})}; }
Layer act(Activation a) { return Act{a}; }
Layer reshape(Shape sample_shape) { return Reshape{std::move(sample_shape)}; }
Layer upsample(std::size_t factor) { return Upsample{factor}; }

Network::Network(Shape input_sample_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_sample_shape)), layers_(std::move(layers)) {
    Shape s = input_shape_;
    for (const auto& l : layers_) s = layer_output(l, s);
    output_shape_ = s;
}

Tensor Network::forward(const Tensor& x, Tape* tape) const {
    if (x.sample_shape() != input_shape_ && numel(x.sample_shape()) != numel(input_shape_))
        throw ShapeError("network input " + cfx::to_string(x.shape) + " does not match expected sample shape " +
                         cfx::to_string(input_shape_));
    const std::size_t n = x.batch();
    Tensor cur = x.reshaped(with_batch(n, input_shape_));
    if (tape) tape->inputs.clear();
    for (const auto& layer : layers_) {
        Tensor next;
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, Conv2d>) {
                    kernels::ConvDims d{n, l.in_ch, cur.dim(2), cur.dim(3), l.out_ch, l.kernel, l.stride, l.pad};
                    next = Tensor({n, l.out_ch, d.out_h(), d.out_w()});
                    kernels::conv2d_forward(d, cur.data, l.weight.data, l.bias.data, next.data);
                } else if constexpr (std::is_same_v<T, Dense>) {
                    kernels::DenseDims d{n, l.in, l.out};
                    next = Tensor({n, l.out});
                    kernels::dense_forward(d, cur.data, l.weight.data, l.bias.data, next.data);
                } else if constexpr (std::is_same_v<T, Act>) {
                    next = cur;
                    for (auto& v : next.data) v = apply(l.kind, v);
                } else if constexpr (std::is_same_v<T, Reshape>) {
                    next = cur.reshaped(with_batch(n, l.sample_shape));
                } else {
                    const std::size_t c = cur.dim(1), h = cur.dim(2), w = cur.dim(3), f = l.factor;
                    next = Tensor({n, c, h * f, w * f});
                    for (std::size_t p = 0; p < n * c; ++p)
                        for (std::size_t y = 0; y < h * f; ++y)
                            for (std::size_t xx = 0; xx < w * f; ++xx)
                                next.data[(p * h * f + y) * w * f + xx] = cur.data[(p * h + y / f) * w + xx / f];
                }
            },
            layer);
        if (tape) tape->inputs.push_back(std::move(cur));
        cur = std::move(next);
    }
    return cur;
}

Tensor Network::backward(const Tape& tape, const Tensor& grad_out, ParamGrads* grads, bool need_input_grad) const {
    if (tape.inputs.size() != layers_.size()) throw ShapeError("tape does not match network depth");
    Tensor g = grad_out;
    std::size_t pidx = 0;
    std::vector<std::size_t> param_base(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        param_base[i] = pidx;
        if (std::holds_alternative<Conv2d>(layers_[i]) || std::holds_alternative<Dense>(layers_[i])) pidx += 2;
    }
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const Tensor& in = tape.inputs[li];
        const std::size_t n = in.batch();
        const bool want_input = need_input_grad || li > 0;
        Tensor gin;
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, Conv2d>) {
                    kernels::ConvDims d{n, l.in_ch, in.dim(2), in.dim(3), l.out_ch, l.kernel, l.stride, l.pad};
                    if (grads)
                        kernels::conv2d_backward_params(d, in.data, g.data, (*grads)[param_base[li]].data,
                                                        (*grads)[param_base[li] + 1].data);
                    if (want_input) {
                        gin = Tensor(in.shape);
                        kernels::conv2d_backward_input(d, g.data, l.weight.data, gin.data);
                    }
                } else if constexpr (std::is_same_v<T, Dense>) {
                    kernels::DenseDims d{n, l.in, l.out};
                    if (grads)
                        kernels::dense_backward_params(d, in.data, g.data, (*grads)[param_base[li]].data,
                                                       (*grads)[param_base[li] + 1].data);
                    if (want_input) {
                        gin = Tensor(in.shape);
                        kernels::dense_backward_input(d, g.data, l.weight.data, gin.data);
                    }
                } else if constexpr (std::is_same_v<T, Act>) {
                    gin = g.reshaped(in.shape);
                    for (std::size_t i = 0; i < gin.size(); ++i) gin.data[i] *= derivative(l.kind, in.data[i]);
                } else if constexpr (std::is_same_v<T, Reshape>) {
                    gin = g.reshaped(in.shape);
                } else {
                    const std::size_t c = in.dim(1), h = in.dim(2), w = in.dim(3), f = l.factor;
                    gin = Tensor(in.shape);
                    for (std::size_t p = 0; p < n * c; ++p)
                        for (std::size_t y = 0; y < h * f; ++y)
                            for (std::size_t xx = 0; xx < w * f; ++xx)
                                gin.data[(p * h + y / f) * w + xx / f] += g.data[(p * h * f + y) * w * f + xx];
                }
            },
            layers_[li]);
        g = std::move(gin);
        if (!want_input) break;
    }
    if (!need_input_grad) return {};
    return g;
}

std::vector<Tensor*> Network::parameters() {
    std::vector<Tensor*> out;
    for (auto& layer : layers_) {
        if (auto* c = std::get_if<Conv2d>(&layer)) {
            out.push_back(&c->weight);
            out.push_back(&c->bias);
        } else if (auto* d = std::get_if<Dense>(&layer)) {
            out.push_back(&d->weight);
            out.push_back(&d->bias);
        }
    }
    return out;
}

std::vector<const Tensor*> Network::parameters() const {
    std::vector<const Tensor*> out;
    for (auto* p : const_cast<Network*>(this)->parameters()) out.push_back(p);
    return out;
}

ParamGrads Network::zero_grads() const {
    ParamGrads g;
    for (const auto* p : parameters()) g.emplace_back(p->shape);
    return g;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
}

void Network::init(Rng& rng) {
    for (auto& layer : layers_) {
        auto fill = [&](Tensor& w, Tensor& b, std::size_t fan_in) {
            std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
            for (auto& v : w.data) v = nd(rng);
            std::fill(b.data.begin(), b.data.end(), 0.0);
        };
        if (auto* c = std::get_if<Conv2d>(&layer)) fill(c->weight, c->bias, c->in_ch * c->kernel * c->kernel);
        if (auto* d = std::get_if<Dense>(&layer)) fill(d->weight, d->bias, d->in);
    }
}

Network Network::with_activations(Activation hidden) const {
    Network out = *this;
    for (auto& layer : out.layers_)
        if (auto* a = std::get_if<Act>(&layer); a && a->kind != Activation::identity) a->kind = hidden;
    return out;
}

bool Network::all_activations_smooth() const {
    return std::all_of(layers_.begin(), layers_.end(), [](const Layer& l) {
        const auto* a = std::get_if<Act>(&l);
        return !a || is_smooth(a->kind);
    });
}

nlohmann::json Network::describe() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : layers_) {
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, Conv2d>)
                    layers.push_back({{"type", "conv"},
                                      {"in", l.in_ch},
                                      {"out", l.out_ch},
                                      {"kernel", l.kernel},
                                      {"stride", l.stride}});
                else if constexpr (std::is_same_v<T, Dense>)
                    layers.push_back({{"type", "dense"}, {"in", l.in}, {"out", l.out}});
                else if constexpr (std::is_same_v<T, Act>)
                    layers.push_back({{"type", "act"}, {"kind", to_string(l.kind)}});
                else if constexpr (std::is_same_v<T, Reshape>)
                    layers.push_back({{"type", "reshape"}, {"shape", l.sample_shape}});
                else
                    layers.push_back({{"type", "upsample"}, {"factor", l.factor}});
            },
            layer);
    }
    return {{"input", input_shape_}, {"layers", layers}};
}

Network Network::from_description(const nlohmann::json& j) {
    try {
        std::vector<Layer> layers;
        for (const auto& l : j.at("layers")) {
            const auto type = l.at("type").get<std::string>();
            if (type == "conv")
                layers.push_back(conv(l.at("in"), l.at("out"), l.at("stride"), l.at("kernel")));
            else if (type == "dense")
                layers.push_back(dense(l.at("in"), l.at("out")));
            else if (type == "act")
                layers.push_back(act(activation_from_string(l.at("kind"))));
            else if (type == "reshape")
                layers.push_back(reshape(l.at("shape").get<Shape>()));
            else if (type == "upsample")
                layers.push_back(upsample(l.at("factor")));
            else
                throw ConfigError("unknown layer type '" + type + "'");
        }
        return Network(j.at("input").get<Shape>(), std::move(layers));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed architecture descriptor: ") + e.what());
    }
}

bool Network::operator==(const Network& other) const {
    if (describe() != other.describe()) return false;
    auto a = parameters(), b = other.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
        if (*a[i] != *b[i]) return false;
    return true;
}

Adam::Adam(const Network& net, AdamConfig cfg) : cfg_(cfg) {
    for (const auto* p : net.parameters()) {
        m_.emplace_back(p->shape);
        v_.emplace_back(p->shape);
    }
}

void Adam::step(Network& net, const ParamGrads& grads) {
    auto params = net.parameters();
    if (params.size() != grads.size()) throw ShapeError("gradient count does not match parameters");
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) sq += dot(g.data, g.data);
        const double norm = std::sqrt(sq);
        if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k]->data;
        auto& m = m_[k].data;
        auto& v = v_[k].data;
        const auto& g = grads[k].data;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i] * scale;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        }
    }
}

Tensor softmax(const Tensor& logits, double temperature) {
    Tensor out = logits;
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out.data.data() + i * c;
        double mx = row[0] / temperature;
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j] / temperature);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += (row[j] = std::exp(row[j] / temperature - mx));
        for (std::size_t j = 0; j < c; ++j) row[j] /= s;
    }
    return out;
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
    Tensor out({labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
            throw DomainError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
        out.data[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data.data() + i * c;
        out[i] = static_cast<int>(std::max_element(row, row + c) - row);
    }
    return out;
}

LossAndGrad cross_entropy(const Tensor& logits, const Tensor& targets) {
    require_same_shape(logits, targets, "cross_entropy");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    Tensor p = softmax(logits);
    LossAndGrad r{0.0, Tensor(logits.shape)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = i * c + j;
            if (targets.data[k] > 0.0) r.loss -= targets.data[k] * std::log(std::max(p.data[k], 1e-300));
            r.grad.data[k] = (p.data[k] - targets.data[k]) / static_cast<double>(n);
        }
    r.loss /= static_cast<double>(n);
    return r;
}

LossAndGrad distill_kl(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
    require_same_shape(student_logits, teacher_logits, "distill_kl");
    const std::size_t n = student_logits.dim(0);
    Tensor ps = softmax(student_logits, temperature);
    Tensor pt = softmax(teacher_logits, temperature);
    LossAndGrad r{0.0, Tensor(student_logits.shape)};
    const double t2 = temperature * temperature;
    for (std::size_t k = 0; k < ps.size(); ++k) {
        if (pt.data[k] > 0.0)
            r.loss += pt.data[k] * (std::log(pt.data[k]) - std::log(std::max(ps.data[k], 1e-300)));
        r.grad.data[k] = t2 * (ps.data[k] - pt.data[k]) / (temperature * static_cast<double>(n));
    }
    r.loss *= t2 / static_cast<double>(n);
    return r;
}

LossAndGrad mse(const Tensor& prediction, const Tensor& target) {
    require_same_shape(prediction, target, "mse");
    LossAndGrad r{0.0, Tensor(prediction.shape)};
    const double inv = 1.0 / static_cast<double>(prediction.size());
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double d = prediction.data[i] - target.data[i];
        r.loss += d * d;
        r.grad.data[i] = 2.0 * d * inv;
    }
    r.loss *= inv;
    return r;
}

}  // namespace cfx::nn
