#include "cfx/classifiers.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "cfx/archive.hpp"
#include "cfx/filters.hpp"

namespace cfx {

namespace {

constexpr const char* kMagic = "CFXCLF1";

void reject_unknown(const nlohmann::json& j, const nlohmann::json& ref, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ConfigError(std::string("unknown ") + what + " key '" + k + "'");
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
    return 0.5 * base *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(total, 1))));
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

std::vector<int> gather_labels(std::span<const int> labels, std::span<const std::size_t> rows) {
    std::vector<int> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(labels[r]);
    return out;
}

}  // namespace

std::string to_string(ActivationFamily f) { return f == ActivationFamily::standard ? "standard" : "smooth"; }

nlohmann::json to_json(const ClassifierConfig& c) {
    return {{"width", c.width},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"seed", c.seed}};
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    reject_unknown(j, to_json(c), "classifier");
    try {
        c.width = j.value("width", c.width);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid classifier field: ") + e.what());
    }
    if (c.width == 0 || c.batch_size == 0 || !(c.learning_rate > 0.0))
        throw ConfigError("classifier width, batch_size and learning_rate must be positive");
    return c;
}

Classifier::Classifier(nn::Network net, std::size_t n_classes, ActivationFamily family)
    : net_(std::move(net)), n_classes_(n_classes), family_(family) {
    if (net_.output_shape() != Shape{n_classes}) throw ShapeError("classifier network must output one logit per class");
    if (family_ == ActivationFamily::smooth && !net_.all_activations_smooth())
        throw ConfigError("smooth classifier family admits no ReLU activations");
}

Classifier Classifier::create(const Shape& image_shape, std::size_t n_classes, ActivationFamily family,
                              std::size_t width, std::uint64_t seed) {
    if (image_shape.size() != 3) throw ShapeError("classifier input must be (C, H, W)");
    const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
    const std::size_t h2 = (h - 1) / 2 + 1, w2 = (w - 1) / 2 + 1;
    const std::size_t h4 = (h2 - 1) / 2 + 1, w4 = (w2 - 1) / 2 + 1;
    const auto a = family == ActivationFamily::standard ? nn::Activation::relu : nn::Activation::softplus;
    nn::Network net(image_shape, {nn::conv(c, width), nn::act(a), nn::conv(width, 2 * width, 2), nn::act(a),
                                  nn::conv(2 * width, 2 * width, 2), nn::act(a), nn::reshape({2 * width * h4 * w4}),
                                  nn::dense(2 * width * h4 * w4, n_classes)});
    Rng rng(seed);
    net.init(rng);
    return Classifier(std::move(net), n_classes, family);
}

Tensor Classifier::logits(const Tensor& x) const { return net_.forward(x); }
Tensor Classifier::probabilities(const Tensor& x) const { return nn::softmax(logits(x)); }
std::vector<int> Classifier::predict(const Tensor& x) const { return nn::argmax_rows(logits(x)); }

double Classifier::accuracy(const Tensor& x, std::span<const int> labels) const {
    if (labels.empty()) return 0.0;
    const auto p = predict(x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(p.size());
}

double Classifier::loss(const Tensor& x, std::span<const int> targets, Tensor* grad_x) const {
    if (targets.size() != x.batch()) throw ShapeError("one target per sample is required");
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= n_classes_)
            throw DomainError("target class " + std::to_string(t) + " out of range");
    return loss(x, nn::one_hot(targets, n_classes_), grad_x);
}

double Classifier::loss(const Tensor& x, const Tensor& target_dist, Tensor* grad_x) const {
    nn::Tape tape;
    const Tensor out = net_.forward(x, grad_x ? &tape : nullptr);
    auto ce = nn::cross_entropy(out, target_dist);
    const double n = static_cast<double>(x.batch());
    if (grad_x) {
        for (auto& g : ce.grad.data) g *= n;
        *grad_x = net_.backward(tape, ce.grad, nullptr, true);
        if (!all_finite(grad_x->data)) throw NumericError("classifier input gradient is not finite");
    }
    return ce.loss * n;
}

std::vector<std::uint8_t> Classifier::serialize() const {
    ArchiveWriter w(kMagic, {{"architecture", net_.describe()},
                             {"n_classes", n_classes_},
                             {"family", to_string(family_)},
                             {"curves", curves_},
                             {"metadata", metadata_}});
    const auto ps = net_.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) w.add("param." + std::to_string(i), *ps[i]);
    return w.bytes();
}

Classifier Classifier::deserialize(std::span<const std::uint8_t> bytes) {
    const auto r = ArchiveReader::parse(bytes, kMagic);
    Classifier c;
    try {
        const auto& h = r.header();
        const auto family = h.at("family").get<std::string>() == "smooth" ? ActivationFamily::smooth
                                                                          : ActivationFamily::standard;
        c = Classifier(nn::Network::from_description(h.at("architecture")), h.at("n_classes"), family);
        c.curves_ = h.at("curves").get<std::map<std::string, std::vector<double>>>();
        c.metadata_ = h.at("metadata");
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("classifier header incomplete: ") + e.what(), 0);
    }
    auto ps = c.net_.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = r.tensor("param." + std::to_string(i));
    return c;
}

void Classifier::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
Classifier Classifier::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

namespace {

// Cross-entropy epochs with a cosine schedule; `curve` receives the per-step
// loss and `after_epoch` runs at the end of each epoch.
template <class AfterEpoch>
void fit_cross_entropy(Classifier& clf, const Tensor& images, std::span<const int> labels, const ClassifierConfig& cfg,
                       Rng& rng, const std::string& curve, AfterEpoch after_epoch) {
    nn::Adam opt(clf.network(), {cfg.learning_rate, 0.9, 0.999, 1e-8, 5.0});
    const std::size_t n = labels.size();
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffled(n, rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const auto rows = std::span(order).subspan(start, std::min(cfg.batch_size, order.size() - start));
            const Tensor x = images.gather(rows);
            const auto y = gather_labels(labels, rows);
            nn::Tape tape;
            const Tensor out = clf.network().forward(x, &tape);
            const auto ce = nn::cross_entropy(out, nn::one_hot(y, clf.n_classes()));
            if (!std::isfinite(ce.loss)) throw TrainingError("classifier loss is not finite", step);
            clf.curves()[curve].push_back(ce.loss);
            auto grads = clf.network().zero_grads();
            clf.network().backward(tape, ce.grad, &grads, false);
            opt.config().lr = cosine_lr(cfg.learning_rate, step, per_epoch * cfg.epochs);
            opt.step(clf.network(), grads);
        }
        after_epoch();
    }
}

}  // namespace

Classifier train_base(const LabeledDataset& train, const LabeledDataset& val, const ClassifierConfig& cfg) {
    if (train.size() == 0) throw ConfigError("classifier training split is empty");
    auto clf = Classifier::create(train.images.sample_shape(), kNumClasses, ActivationFamily::standard, cfg.width,
                                  cfg.seed);
    Rng rng(cfg.seed + 1);
    fit_cross_entropy(clf, train.images, train.labels, cfg, rng, "loss", [&] {
        clf.curves()["train_accuracy"].push_back(clf.accuracy(train.images, train.labels));
        if (val.size() > 0) clf.curves()["val_accuracy"].push_back(clf.accuracy(val.images, val.labels));
    });
    clf.metadata()["config"] = to_json(cfg);
    if (val.size() > 0) clf.metadata()["val_accuracy"] = clf.accuracy(val.images, val.labels);
    return clf;
}

void fine_tune(Classifier& clf, const Tensor& images, std::span<const int> labels, const ClassifierConfig& cfg) {
    if (labels.empty()) throw ConfigError("fine-tuning set is empty");
    if (images.rank() != 4 || images.batch() != labels.size())
        throw ShapeError("fine-tuning images do not match the labels");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= clf.n_classes())
            throw DomainError("fine-tuning label " + std::to_string(y) + " out of range");
    Rng rng(cfg.seed + 2);
    fit_cross_entropy(clf, images, labels, cfg, rng, "fine_tune_loss", [] {});
}

std::string to_string(AdvNorm n) { return n == AdvNorm::l2 ? "l2" : "linf"; }

void SurrogateSpec::validate() const {
    for (double v : {lambda_mixup, lambda_ls, lambda_adv, adv_epsilon})
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("surrogate weights and budgets must be finite and >= 0");
    if (!(mixup_beta > 0.0)) throw ConfigError("mixup_beta must be > 0");
    if (!(ls_epsilon >= 0.0 && ls_epsilon < 1.0)) throw ConfigError("ls_epsilon must lie in [0, 1)");
    if (adv_steps < 1) throw ConfigError("adv_steps must be >= 1");
    if (!(distill_temperature > 0.0)) throw ConfigError("distill_temperature must be > 0");
}

nlohmann::json to_json(const SurrogateSpec& s) {
    return {{"lambda_mixup", s.lambda_mixup}, {"lambda_ls", s.lambda_ls},
            {"lambda_adv", s.lambda_adv},     {"mixup_beta", s.mixup_beta},
            {"ls_epsilon", s.ls_epsilon},     {"adv_epsilon", s.adv_epsilon},
            {"adv_norm", to_string(s.adv_norm)}, {"adv_steps", s.adv_steps},
            {"distill_temperature", s.distill_temperature}};
}

SurrogateSpec surrogate_spec_from_json(const nlohmann::json& j) {
    SurrogateSpec s;
    reject_unknown(j, to_json(s), "surrogate");
    try {
        s.lambda_mixup = j.value("lambda_mixup", s.lambda_mixup);
        s.lambda_ls = j.value("lambda_ls", s.lambda_ls);
        s.lambda_adv = j.value("lambda_adv", s.lambda_adv);
        s.mixup_beta = j.value("mixup_beta", s.mixup_beta);
        s.ls_epsilon = j.value("ls_epsilon", s.ls_epsilon);
        s.adv_epsilon = j.value("adv_epsilon", s.adv_epsilon);
        const std::string norm = j.value("adv_norm", to_string(s.adv_norm));
        if (norm != "l2" && norm != "linf") throw ConfigError("adv_norm must be 'l2' or 'linf'");
        s.adv_norm = norm == "l2" ? AdvNorm::l2 : AdvNorm::linf;
        s.adv_steps = j.value("adv_steps", s.adv_steps);
        s.distill_temperature = j.value("distill_temperature", s.distill_temperature);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid surrogate field: ") + e.what());
    }
    s.validate();
    return s;
}

double sample_beta(double a, double b, Rng& rng) {
    std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
    const double x = ga(rng), y = gb(rng);
    return x + y > 0.0 ? x / (x + y) : 0.5;
}

MixedBatch mixup_batch(const Tensor& x_i, const Tensor& y_i, const Tensor& x_j, const Tensor& y_j, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("mixup alpha must lie in [0, 1]");
    require_same_shape(x_i, x_j, "mixup inputs");
    require_same_shape(y_i, y_j, "mixup labels");
    MixedBatch m{Tensor(x_i.shape), Tensor(y_i.shape)};
    for (std::size_t k = 0; k < x_i.size(); ++k) m.x.data[k] = alpha * x_i.data[k] + (1.0 - alpha) * x_j.data[k];
    for (std::size_t k = 0; k < y_i.size(); ++k) m.y.data[k] = alpha * y_i.data[k] + (1.0 - alpha) * y_j.data[k];
    return m;
}

Tensor smooth_labels(const Tensor& y, double epsilon) {
    if (y.rank() != 2) throw ShapeError("labels must be (N, C)");
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw DomainError("smoothing epsilon must lie in [0, 1)");
    const double uniform = epsilon / static_cast<double>(y.dim(1));
    Tensor out(y.shape);
    for (std::size_t k = 0; k < y.size(); ++k) out.data[k] = (1.0 - epsilon) * y.data[k] + uniform;
    return out;
}

namespace {

std::vector<double> per_sample_loss(const Classifier& clf, const Tensor& x, std::span<const int> labels) {
    const Tensor p = nn::softmax(clf.logits(x));
    std::vector<double> out(x.batch());
    for (std::size_t n = 0; n < x.batch(); ++n)
        out[n] = -std::log(std::max(p.data[n * clf.n_classes() + static_cast<std::size_t>(labels[n])], 1e-300));
    return out;
}

// Projects delta rows into the ball and the result into [0, 1].
void project(const Tensor& x, Tensor& x_adv, const SurrogateSpec& spec) {
    const std::size_t ss = x.sample_size();
    for (std::size_t n = 0; n < x.batch(); ++n) {
        double* a = x_adv.data.data() + n * ss;
        const double* o = x.data.data() + n * ss;
        if (spec.adv_norm == AdvNorm::linf) {
            for (std::size_t i = 0; i < ss; ++i) a[i] = o[i] + std::clamp(a[i] - o[i], -spec.adv_epsilon, spec.adv_epsilon);
        } else {
            double norm = 0.0;
            for (std::size_t i = 0; i < ss; ++i) norm += (a[i] - o[i]) * (a[i] - o[i]);
            norm = std::sqrt(norm);
            if (norm > spec.adv_epsilon) {
                const double s = spec.adv_epsilon / norm;
                for (std::size_t i = 0; i < ss; ++i) a[i] = o[i] + s * (a[i] - o[i]);
            }
        }
        for (std::size_t i = 0; i < ss; ++i) a[i] = std::clamp(a[i], 0.0, 1.0);
    }
}

}  // namespace

Tensor adversarial_perturb(const Classifier& clf, const Tensor& x, std::span<const int> labels,
                           const SurrogateSpec& spec) {
    if (spec.adv_epsilon == 0.0) return x;
    if (!(spec.adv_epsilon > 0.0)) throw DomainError("adv_epsilon must be >= 0");
    const std::size_t ss = x.sample_size();
    const std::size_t batch = x.batch();
    Tensor cur = x;
    std::vector<double> step(batch, spec.adv_epsilon / static_cast<double>(spec.adv_steps));
    std::vector<double> cur_loss = per_sample_loss(clf, cur, labels);
    for (std::size_t s = 0; s < spec.adv_steps; ++s) {
        Tensor g;
        clf.loss(cur, labels, &g);
        if (!all_finite(g.data)) throw NumericError("adversarial gradient is not finite", s);
        // up to four halvings per step keep the ascent monotone
        std::vector<bool> done(batch, false);
        Tensor next = cur;
        for (int attempt = 0; attempt < 5; ++attempt) {
            for (std::size_t n = 0; n < batch; ++n) {
                if (done[n]) continue;
                const double* gr = g.data.data() + n * ss;
                double* nx = next.data.data() + n * ss;
                const double* cx = cur.data.data() + n * ss;
                if (spec.adv_norm == AdvNorm::linf) {
                    for (std::size_t i = 0; i < ss; ++i)
                        nx[i] = cx[i] + step[n] * (gr[i] > 0.0 ? 1.0 : (gr[i] < 0.0 ? -1.0 : 0.0));
                } else {
                    const double gn = l2_norm(std::span(gr, ss));
                    for (std::size_t i = 0; i < ss; ++i) nx[i] = cx[i] + (gn > 0.0 ? step[n] * gr[i] / gn : 0.0);
                }
            }
            project(x, next, spec);
            const auto next_loss = per_sample_loss(clf, next, labels);
            bool all_done = true;
            for (std::size_t n = 0; n < batch; ++n) {
                if (done[n]) continue;
                if (next_loss[n] >= cur_loss[n]) {
                    done[n] = true;
                    cur_loss[n] = next_loss[n];
                } else {
                    step[n] *= 0.5;
                    all_done = false;
                }
            }
            if (all_done) break;
        }
        for (std::size_t n = 0; n < batch; ++n)
            if (done[n]) std::copy_n(next.data.data() + n * ss, ss, cur.data.data() + n * ss);
    }
    return cur;
}

namespace {

struct TermAccumulator {
    const nn::Network& net;
    nn::ParamGrads& grads;

    // Adds weight * d(loss)/d(params) and returns the unweighted loss.
    template <class Objective>
    double add(const Tensor& x, double weight, Objective&& objective) {
        nn::Tape tape;
        const Tensor out = net.forward(x, &tape);
        auto lg = objective(out);
        if (weight != 0.0) {
            for (auto& g : lg.grad.data) g *= weight;
            net.backward(tape, lg.grad, &grads, false);
        }
        return lg.loss;
    }
};

}  // namespace

Classifier distill_surrogate(const Classifier& f, const LabeledDataset& train, const LabeledDataset& val,
                             const SurrogateSpec& spec, const ClassifierConfig& cfg) {
    spec.validate();
    if (train.size() == 0) throw ConfigError("surrogate training split is empty");
    if (f.input_shape() != train.images.sample_shape()) throw ShapeError("teacher input shape does not match data");
    auto student = Classifier::create(train.images.sample_shape(), f.n_classes(), ActivationFamily::smooth, cfg.width,
                                      cfg.seed);
    const std::size_t C = f.n_classes();
    Rng rng(cfg.seed + 1);
    nn::Adam opt(student.network(), {cfg.learning_rate, 0.9, 0.999, 1e-8, 5.0});
    const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffled(train.size(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const auto rows = std::span(order).subspan(start, std::min(cfg.batch_size, order.size() - start));
            const Tensor x = train.images.gather(rows);
            const Tensor teacher = f.logits(x);
            const auto y = nn::argmax_rows(teacher);
            const Tensor y1 = nn::one_hot(y, C);

            auto grads = student.network().zero_grads();
            TermAccumulator acc{student.network(), grads};
            const Tensor ys = smooth_labels(y1, spec.ls_epsilon);
            double kl = 0.0, ls = 0.0, mix = 0.0, adv = 0.0;
            // KL and label smoothing share one forward pass
            acc.add(x, 1.0, [&](const Tensor& out) {
                auto a = nn::distill_kl(out, teacher, spec.distill_temperature);
                kl = a.loss;
                if (spec.lambda_ls > 0.0) {
                    const auto b = nn::cross_entropy(out, ys);
                    ls = b.loss;
                    axpy(spec.lambda_ls, b.grad, a.grad);
                }
                return a;
            });
            if (spec.lambda_mixup > 0.0) {
                const auto perm = shuffled(rows.size(), rng);
                const double alpha = sample_beta(spec.mixup_beta, spec.mixup_beta, rng);
                const auto m = mixup_batch(x, y1, x.gather(perm), y1.gather(perm), alpha);
                mix = acc.add(m.x, spec.lambda_mixup, [&](const Tensor& out) { return nn::cross_entropy(out, m.y); });
            }
            if (spec.lambda_adv > 0.0 && spec.adv_epsilon > 0.0) {
                const Tensor xa = adversarial_perturb(student, x, y, spec);
                adv = acc.add(xa, spec.lambda_adv, [&](const Tensor& out) { return nn::cross_entropy(out, y1); });
            }
            const double total = kl + spec.lambda_mixup * mix + spec.lambda_ls * ls + spec.lambda_adv * adv;
            if (!std::isfinite(total)) throw TrainingError("surrogate loss is not finite", step);
            auto& curves = student.curves();
            curves["kl"].push_back(kl);
            curves["mixup"].push_back(mix);
            curves["ls"].push_back(ls);
            curves["adv"].push_back(adv);
            curves["total"].push_back(total);
            opt.config().lr = cosine_lr(cfg.learning_rate, step, per_epoch * cfg.epochs);
            opt.step(student.network(), grads);
        }
    }
    student.metadata()["config"] = to_json(cfg);
    student.metadata()["spec"] = to_json(spec);
    if (val.size() > 0) {
        const auto a = f.predict(val.images), b = student.predict(val.images);
        std::size_t same = 0;
        for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
        student.metadata()["val_agreement"] = static_cast<double>(same) / static_cast<double>(a.size());
        student.metadata()["val_accuracy"] = student.accuracy(val.images, val.labels);
    }
    return student;
}

double gradient_variation(const Classifier& clf, const Tensor& x, std::span<const int> labels, double delta_norm,
                          Rng& rng) {
    if (x.batch() == 0) throw DomainError("gradient probe needs at least one point");
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor delta(x.shape);
    for (auto& v : delta.data) v = nd(rng);
    const std::size_t ss = x.sample_size();
    for (std::size_t n = 0; n < x.batch(); ++n) {
        auto row = delta.sample(n);
        const double s = delta_norm / l2_norm(row);
        for (auto& v : row) v *= s;
    }
    Tensor g0, g1;
    clf.loss(x, labels, &g0);
    clf.loss(x + delta, labels, &g1);
    double total = 0.0;
    for (std::size_t n = 0; n < x.batch(); ++n) {
        double d = 0.0;
        for (std::size_t i = n * ss; i < (n + 1) * ss; ++i) d += (g0.data[i] - g1.data[i]) * (g0.data[i] - g1.data[i]);
        total += std::sqrt(d) / delta_norm;
    }
    return total / static_cast<double>(x.batch());
}

std::string to_string(GradientKind k) {
    switch (k) {
        case GradientKind::vanilla: return "vanilla";
        case GradientKind::smoothgrad: return "smoothgrad";
        case GradientKind::integrated_gradients: return "integrated_gradients";
        case GradientKind::surrogate: return "surrogate";
        case GradientKind::product: return "product";
    }
    return "?";
}

GradientKind gradient_kind_from_string(const std::string& s) {
    for (auto k : {GradientKind::vanilla, GradientKind::smoothgrad, GradientKind::integrated_gradients,
                   GradientKind::surrogate, GradientKind::product})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown gradient source '" + s + "'");
}

void GradientSourceSpec::validate() const {
    if (smoothgrad_samples < 1 || ig_steps < 1) throw ConfigError("gradient source sample and step counts must be >= 1");
    if (!(smoothgrad_sigma >= 0.0)) throw ConfigError("smoothgrad_sigma must be >= 0");
    if (!(ig_blur_sigma > 0.0)) throw ConfigError("ig_blur_sigma must be > 0");
    if (kind == GradientKind::product) {
        if (factors.size() != 2) throw ConfigError("product gradient source needs exactly two factors");
        for (const auto& f : factors) f.validate();
    } else if (!factors.empty()) {
        throw ConfigError("only the product gradient source takes factors");
    }
}

nlohmann::json to_json(const GradientSourceSpec& s) {
    nlohmann::json j = {{"kind", to_string(s.kind)},
                        {"smoothgrad_sigma", s.smoothgrad_sigma},
                        {"smoothgrad_samples", s.smoothgrad_samples},
                        {"ig_steps", s.ig_steps},
                        {"ig_baseline", s.ig_baseline == IgBaseline::zeros ? "zeros" : "blurred_input"},
                        {"ig_blur_sigma", s.ig_blur_sigma}};
    if (!s.factors.empty()) {
        j["factors"] = nlohmann::json::array();
        for (const auto& f : s.factors) j["factors"].push_back(to_json(f));
    }
    return j;
}

GradientSourceSpec gradient_source_from_json(const nlohmann::json& j) {
    GradientSourceSpec s;
    auto ref = to_json(s);
    ref["factors"] = nullptr;
    reject_unknown(j, ref, "gradient source");
    try {
        s.kind = gradient_kind_from_string(j.value("kind", to_string(s.kind)));
        s.smoothgrad_sigma = j.value("smoothgrad_sigma", s.smoothgrad_sigma);
        s.smoothgrad_samples = j.value("smoothgrad_samples", s.smoothgrad_samples);
        s.ig_steps = j.value("ig_steps", s.ig_steps);
        const std::string base = j.value("ig_baseline", std::string("zeros"));
        if (base != "zeros" && base != "blurred_input") throw ConfigError("ig_baseline must be zeros or blurred_input");
        s.ig_baseline = base == "zeros" ? IgBaseline::zeros : IgBaseline::blurred_input;
        s.ig_blur_sigma = j.value("ig_blur_sigma", s.ig_blur_sigma);
        if (j.contains("factors"))
            for (const auto& f : j.at("factors")) s.factors.push_back(gradient_source_from_json(f));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid gradient source field: ") + e.what());
    }
    s.validate();
    return s;
}

GradientSourceSpec gradient_source_from_name(const std::string& name) {
    GradientSourceSpec s;
    const auto star = name.find('*');
    if (star == std::string::npos) {
        s.kind = gradient_kind_from_string(name);
        if (s.kind == GradientKind::product) throw ConfigError("product sources are written as 'a*b'");
        return s;
    }
    s.kind = GradientKind::product;
    s.factors = {gradient_source_from_name(name.substr(0, star)), gradient_source_from_name(name.substr(star + 1))};
    s.validate();
    return s;
}

std::string name_of(const GradientSourceSpec& s) {
    if (s.kind != GradientKind::product) return to_string(s.kind);
    return name_of(s.factors.at(0)) + "*" + name_of(s.factors.at(1));
}

Tensor latent_loss_gradient(const Classifier& clf, const LatentCodec& codec, const Tensor& z,
                            std::span<const int> targets, double* loss) {
    Tensor gx;
    const double l = clf.loss(codec.decode(z), targets, &gx);
    if (loss) *loss = l;
    return codec.decode_vjp(z, gx);
}

GradientSource::GradientSource(GradientSourceSpec spec, const Classifier& f, const Classifier& f_hat)
    : spec_(std::move(spec)), f_(&f), f_hat_(&f_hat) {
    spec_.validate();
}

const Classifier& GradientSource::loss_classifier() const {
    return spec_.kind == GradientKind::surrogate ? *f_hat_ : *f_;
}

double GradientSource::loss(const LatentCodec& codec, const Tensor& z, std::span<const int> targets) const {
    return loss_classifier().loss(codec.decode(z), targets);
}

Tensor GradientSource::gradient(const LatentCodec& codec, const Tensor& z, std::span<const int> targets,
                                Rng& rng) const {
    return gradient(spec_, codec, z, targets, rng);
}

Tensor GradientSource::gradient(const GradientSourceSpec& s, const LatentCodec& codec, const Tensor& z,
                                std::span<const int> targets, Rng& rng) const {
    switch (s.kind) {
        case GradientKind::vanilla: return latent_loss_gradient(*f_, codec, z, targets);
        case GradientKind::surrogate: return latent_loss_gradient(*f_hat_, codec, z, targets);
        case GradientKind::smoothgrad: {
            if (s.smoothgrad_sigma == 0.0) return latent_loss_gradient(*f_, codec, z, targets);
            std::normal_distribution<double> nd(0.0, s.smoothgrad_sigma);
            Tensor sum(z.shape);
            for (std::size_t k = 0; k < s.smoothgrad_samples; ++k) {
                Tensor zn = z;
                for (auto& v : zn.data) v += nd(rng);
                sum += latent_loss_gradient(*f_, codec, zn, targets);
            }
            return (1.0 / static_cast<double>(s.smoothgrad_samples)) * sum;
        }
        case GradientKind::integrated_gradients: {
            const Tensor base = s.ig_baseline == IgBaseline::zeros ? Tensor(z.shape) : gaussian_blur(z, s.ig_blur_sigma);
            const Tensor diff = z - base;
            Tensor sum(z.shape);
            // midpoint rule along the straight path
            for (std::size_t k = 0; k < s.ig_steps; ++k) {
                const double a = (static_cast<double>(k) + 0.5) / static_cast<double>(s.ig_steps);
                Tensor zp = base;
                axpy(a, diff, zp);
                sum += latent_loss_gradient(*f_, codec, zp, targets);
            }
            Tensor out(z.shape);
            for (std::size_t i = 0; i < out.size(); ++i)
                out.data[i] = diff.data[i] * sum.data[i] / static_cast<double>(s.ig_steps);
            return out;
        }
        case GradientKind::product: {
            const Tensor a = gradient(s.factors.at(0), codec, z, targets, rng);
            const Tensor b = gradient(s.factors.at(1), codec, z, targets, rng);
            Tensor out(z.shape);
            for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] * b.data[i];
            return out;
        }
    }
    throw ConfigError("unknown gradient source kind");
}

}  // namespace cfx
