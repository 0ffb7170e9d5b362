#include "cfx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cfx/archive.hpp"

namespace cfx {

std::string to_string(EmbeddingKind k) { return k == EmbeddingKind::flat_pixels ? "flat_pixels" : "codec_latent"; }

EmbeddingKind embedding_kind_from_string(const std::string& s) {
    if (s == "flat_pixels") return EmbeddingKind::flat_pixels;
    if (s == "codec_latent") return EmbeddingKind::codec_latent;
    throw ConfigError("unknown embedding '" + s + "' (expected flat_pixels or codec_latent)");
}

std::vector<double> EmbeddingFn::operator()(const Tensor& x) const {
    if (kind_ == EmbeddingKind::flat_pixels) return x.data;
    const Tensor in = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
    return codec_->encode(in).data;
}

std::vector<double> embedding_delta(const Tensor& x, const Tensor& x_cf, const EmbeddingFn& e) {
    if (x.size() != x_cf.size()) throw ShapeError("factual and counterfactual differ in size");
    const auto a = e(x), b = e(x_cf);
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

double sparsity(std::span<const double> delta) {
    if (delta.empty()) throw DomainError("sparsity of an empty delta");
    const double mx = max_abs(delta);
    if (mx == 0.0) return 1.0;
    double s = 0.0;
    for (double v : delta) s += std::abs(v);
    return 1.0 - (s / static_cast<double>(delta.size())) / mx;
}

double sparsity(const Tensor& x, const Tensor& x_cf, const EmbeddingFn& e) { return sparsity(embedding_delta(x, x_cf, e)); }

std::optional<double> diversity(std::span<const double> d1, std::span<const double> d2) {
    if (d1.size() != d2.size()) throw ShapeError("diversity deltas differ in size");
    const double n1 = l2_norm(d1), n2 = l2_norm(d2);
    if (n1 == 0.0 || n2 == 0.0) return std::nullopt;
    const double cos = std::clamp(dot(d1, d2) / (n1 * n2), -1.0, 1.0);
    return 1.0 - cos;
}

double nafr(std::span<const int> f_hat_factual, std::span<const int> f_hat_cf) {
    if (f_hat_factual.empty()) throw DomainError("NAFR of an empty sample set");
    if (f_hat_factual.size() != f_hat_cf.size()) throw ShapeError("NAFR prediction lists differ in length");
    std::size_t flips = 0;
    for (std::size_t i = 0; i < f_hat_cf.size(); ++i) flips += f_hat_cf[i] != f_hat_factual[i] ? 1 : 0;
    return 100.0 * static_cast<double>(flips) / static_cast<double>(f_hat_cf.size());
}

NaRate na_rate(std::span<const int> f_factual, std::span<const int> f_cf, std::span<const int> f_hat_factual,
               std::span<const int> f_hat_cf) {
    const std::size_t n = f_factual.size();
    if (f_cf.size() != n || f_hat_factual.size() != n || f_hat_cf.size() != n)
        throw ShapeError("NA prediction lists differ in length");
    NaRate r;
    for (std::size_t i = 0; i < n; ++i) {
        if (f_cf[i] == f_factual[i]) continue;
        ++r.n_f_flipped;
        if (f_hat_cf[i] != f_hat_factual[i]) ++r.n_both;
    }
    if (r.n_f_flipped == 0)
        r.note = "no counterfactual changed the prediction of f";
    else
        r.value = 100.0 * static_cast<double>(r.n_both) / static_cast<double>(r.n_f_flipped);
    return r;
}

std::optional<double> gain(double acc_before, double acc_after) {
    const double err = 1.0 - acc_before;
    if (err <= 0.0) return std::nullopt;
    return 100.0 * (acc_after - acc_before) / err;
}

void DebiasConfig::validate() const {
    if (epochs < 1) throw ConfigError("debias.epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("debias.learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("debias.batch_size must be >= 1");
    if (cf_repeats < 1) throw ConfigError("debias.cf_repeats must be >= 1");
}

nlohmann::json to_json(const DebiasConfig& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"cf_repeats", c.cf_repeats},
            {"seed", c.seed}};
}

DebiasConfig debias_config_from_json(const nlohmann::json& j) {
    DebiasConfig c;
    if (!j.is_object()) throw ConfigError("debias must be an object");
    const auto ref = to_json(c);
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ConfigError("unknown debias key '" + k + "'");
    try {
        c.epochs = j.value("epochs", c.epochs);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.cf_repeats = j.value("cf_repeats", c.cf_repeats);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid debias field: ") + e.what());
    }
    c.validate();
    return c;
}

DebiasResult debias_and_gain(const Classifier& f, const LabeledDataset& train, const LabeledDataset& unpoisoned_test,
                             const Tensor& cf_images, std::span<const int> cf_labels, const DebiasConfig& cfg) {
    cfg.validate();
    if (unpoisoned_test.size() == 0) throw ConfigError("the unpoisoned test set is empty");
    if (cf_labels.empty()) throw ConfigError("no labeled counterfactuals to debias with");
    if (cf_images.rank() != 4 || cf_images.batch() != cf_labels.size())
        throw ShapeError("counterfactual images do not match their labels");

    std::vector<Tensor> parts{train.images};
    std::vector<int> labels = train.labels;
    for (std::size_t r = 0; r < cfg.cf_repeats; ++r) {
        parts.push_back(cf_images);
        labels.insert(labels.end(), cf_labels.begin(), cf_labels.end());
    }
    const Tensor images = concat_batch(parts);

    DebiasResult out;
    out.n_counterfactuals = cf_labels.size();
    out.acc_before = f.accuracy(unpoisoned_test.images, unpoisoned_test.labels);
    out.err_before = 1.0 - out.acc_before;
    out.f_after = f;
    ClassifierConfig cc;
    cc.epochs = cfg.epochs;
    cc.learning_rate = cfg.learning_rate;
    cc.batch_size = cfg.batch_size;
    cc.seed = cfg.seed;
    fine_tune(out.f_after, images, labels, cc);
    out.acc_after = out.f_after.accuracy(unpoisoned_test.images, unpoisoned_test.labels);
    out.gain = gain(out.acc_before, out.acc_after);
    if (!out.gain) out.gain_note = "f already classifies the unpoisoned test set perfectly";
    out.f_after.metadata()["debias"] = to_json(cfg);
    return out;
}

LabeledCounterfactuals collect_counterfactuals(const std::vector<RunRecord>& runs, bool primary_only) {
    LabeledCounterfactuals out;
    std::vector<Tensor> parts;
    for (const auto& run : runs) {
        if (run.label < 0) throw ConfigError("run " + run.id + " carries no factual label");
        const std::size_t n = primary_only ? std::min<std::size_t>(1, run.set.counterfactuals.size())
                                           : run.set.counterfactuals.size();
        for (std::size_t k = 0; k < n; ++k) {
            const auto& cf = run.set.counterfactuals[k];
            if (!cf.flipped) continue;
            parts.push_back(cf.image);
            out.labels.push_back(run.label);
        }
    }
    if (!parts.empty()) out.images = concat_batch(parts);
    return out;
}

namespace {

void check_configs(const std::vector<RunRecord>& runs) {
    const auto& ref = runs.front().config;
    for (const auto& run : runs) {
        if (run.config == ref) continue;
        std::vector<std::string> keys;
        if (ref.is_object() && run.config.is_object()) {
            for (const auto& [k, v] : ref.items())
                if (!run.config.contains(k) || run.config[k] != v) keys.push_back(k);
            for (const auto& [k, v] : run.config.items())
                if (!ref.contains(k)) keys.push_back(k);
        }
        std::string msg = "run " + run.id + " was produced by a different config than run " + runs.front().id;
        if (!keys.empty()) {
            msg += " (differs in:";
            for (const auto& k : keys) msg += " " + k;
            msg += ")";
        }
        throw ConfigError(msg);
    }
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

MetricsReport evaluate_run(const std::vector<RunRecord>& runs, const Classifier& f, const Classifier& f_hat,
                           const EmbeddingFn& e, std::optional<DebiasResult> debias) {
    if (runs.empty()) throw ConfigError("no runs to evaluate");
    check_configs(runs);
    MetricsReport r;
    r.embedding = to_string(e.kind());
    r.n_samples = runs.size();
    std::vector<int> f0, f1, h0, h1;
    std::vector<double> sp, div_clamped, div_raw;
    for (const auto& run : runs) {
        if (run.set.counterfactuals.empty()) throw ConfigError("run " + run.id + " holds no counterfactuals");
        SampleRow row;
        row.id = run.id;
        row.sample_index = run.sample_index;
        row.label = run.label;
        row.target = run.target;
        row.f_factual = f.predict(run.factual).at(0);
        row.f_hat_factual = f_hat.predict(run.factual).at(0);
        std::vector<std::vector<double>> deltas;
        for (const auto& cf : run.set.counterfactuals) {
            row.f_cf.push_back(f.predict(cf.image).at(0));
            row.f_hat_cf.push_back(f_hat.predict(cf.image).at(0));
            deltas.push_back(embedding_delta(run.factual, cf.image, e));
            row.sparsity.push_back(sparsity(deltas.back()));
            f0.push_back(row.f_factual);
            f1.push_back(row.f_cf.back());
            h0.push_back(row.f_hat_factual);
            h1.push_back(row.f_hat_cf.back());
            sp.push_back(row.sparsity.back());
        }
        if (deltas.size() >= 2) {
            row.diversity_raw = diversity(deltas[0], deltas[1]);
            if (row.diversity_raw) {
                div_raw.push_back(*row.diversity_raw);
                div_clamped.push_back(std::min(*row.diversity_raw, 1.0));
            }
        }
        r.rows.push_back(std::move(row));
    }
    r.n_counterfactuals = f0.size();
    for (std::size_t i = 0; i < f0.size(); ++i) r.n_flipped += f1[i] != f0[i] ? 1 : 0;
    r.flip_rate = 100.0 * static_cast<double>(r.n_flipped) / static_cast<double>(r.n_counterfactuals);
    r.nafr = nafr(h0, h1);
    const auto na = na_rate(f0, f1, h0, h1);
    r.na_rate = na.value;
    if (!na.value) r.absent["na_rate"] = na.note;
    r.sparsity = 100.0 * mean_of(sp);
    r.n_diversity = div_raw.size();
    if (!div_raw.empty()) {
        r.diversity = 100.0 * mean_of(div_clamped);
        r.diversity_raw = 100.0 * mean_of(div_raw);
    } else {
        r.absent["diversity"] = "no sample has two counterfactuals with nonzero edits";
    }
    r.debias = std::move(debias);
    if (!r.debias)
        r.absent["gain"] = "no debias run was supplied";
    else if (!r.debias->gain)
        r.absent["gain"] = r.debias->gain_note;
    return r;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["n_samples"] = r.n_samples;
    j["n_counterfactuals"] = r.n_counterfactuals;
    j["n_flipped"] = r.n_flipped;
    j["flip_rate"] = r.flip_rate;
    j["nafr"] = r.nafr;
    j["na_rate"] = opt(r.na_rate);
    j["sparsity"] = r.sparsity;
    j["diversity"] = opt(r.diversity);
    j["diversity_raw"] = opt(r.diversity_raw);
    j["embedding"] = r.embedding;
    j["denominators"] = {{"flip_rate", r.n_counterfactuals},
                         {"nafr", r.n_counterfactuals},
                         {"na_rate", r.n_flipped},
                         {"sparsity", r.n_counterfactuals},
                         {"diversity", r.n_diversity}};
    if (r.debias) {
        j["gain"] = opt(r.debias->gain);
        j["acc_before"] = r.debias->acc_before;
        j["acc_after"] = r.debias->acc_after;
        j["err_before"] = r.debias->err_before;
        j["debias_counterfactuals"] = r.debias->n_counterfactuals;
    } else {
        j["gain"] = nullptr;
    }
    j["absent"] = r.absent;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"id", row.id},
                        {"sample_index", row.sample_index},
                        {"label", row.label},
                        {"target", row.target},
                        {"f_factual", row.f_factual},
                        {"f_hat_factual", row.f_hat_factual},
                        {"f_cf", row.f_cf},
                        {"f_hat_cf", row.f_hat_cf},
                        {"sparsity", row.sparsity},
                        {"diversity_raw", opt(row.diversity_raw)}});
    j["samples"] = rows;
    return j;
}

std::string metrics_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << "id,sample_index,label,target,n_cf,flip_rate,nafr,na_rate,sparsity,diversity_raw\n";
    for (const auto& row : r.rows) {
        const std::size_t n = row.f_cf.size();
        std::vector<int> f0(n, row.f_factual), h0(n, row.f_hat_factual);
        std::size_t flips = 0;
        for (std::size_t k = 0; k < n; ++k) flips += row.f_cf[k] != row.f_factual ? 1 : 0;
        const auto na = na_rate(f0, row.f_cf, h0, row.f_hat_cf);
        os << row.id << ',' << row.sample_index << ',' << row.label << ',' << row.target << ',' << n << ','
           << fmt(100.0 * static_cast<double>(flips) / static_cast<double>(n)) << ',' << fmt(nafr(h0, row.f_hat_cf))
           << ',' << fmt(na.value) << ',' << fmt(100.0 * mean_of(row.sparsity)) << ','
           << fmt(row.diversity_raw ? std::optional<double>(100.0 * *row.diversity_raw) : std::nullopt) << '\n';
    }
    os << "summary,," << ",," << r.n_counterfactuals << ',' << fmt(r.flip_rate) << ',' << fmt(r.nafr) << ','
       << fmt(r.na_rate) << ',' << fmt(r.sparsity) << ',' << fmt(r.diversity_raw) << '\n';
    return os.str();
}

void write_report(const std::filesystem::path& dir, const MetricsReport& r) {
    std::filesystem::create_directories(dir);
    write_text_atomic(dir / "metrics.csv", metrics_csv(r));
    write_text_atomic(dir / "report.json", to_json(r).dump(2) + "\n");
}

}  // namespace cfx
