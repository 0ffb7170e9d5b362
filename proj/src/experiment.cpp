#include "cfx/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>

#include "cfx/archive.hpp"

namespace cfx {

namespace {

using nlohmann::json;

// Every key of `ref` must be present in `j` and nothing else.
void require_exact_keys(const json& j, const json& ref, const std::string& section) {
    if (!j.is_object()) throw ConfigError("'" + section + "' must be an object");
    for (const auto& [k, v] : ref.items())
        if (!j.contains(k)) throw ConfigError("missing required field '" + section + "." + k + "'");
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ConfigError("unknown field '" + section + "." + k + "'");
}

template <class T>
T field(const json& j, const char* key, const std::string& section) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("invalid field '" + section + "." + key + "': " + e.what());
    }
}

// Parses a section, prefixing errors with its name.
template <class F>
auto section(const json& j, const char* key, F parse) {
    try {
        return parse(j.at(key));
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("in '") + key + "': " + e.what());
    }
}

json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

void require_file(const std::filesystem::path& p, const std::string& what, const std::string& stage) {
    if (!std::filesystem::exists(p))
        throw ConfigError("missing " + what + " (" + p.string() + "); run `" + stage + "` first");
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

json to_json(const ExperimentConfig& c) {
    return {{"version", c.version},
            {"seed", c.seed},
            {"dataset", to_json(c.dataset)},
            {"splits", c.splits},
            {"codec", {{"kind", to_string(c.codec.kind)}, {"autoencoder", to_json(c.codec.autoencoder)}}},
            {"schedule", {{"kind", to_string(c.schedule.kind)}, {"steps", c.schedule.steps}}},
            {"generator", to_json(c.generator)},
            {"classifier", to_json(c.classifier)},
            {"surrogate", to_json(c.surrogate)},
            {"eval_surrogate_seed_offset", c.eval_surrogate_seed_offset},
            {"guidance", to_json(c.guidance)},
            {"gradient_source", to_json(c.gradient_source)},
            {"explain",
             {{"split", to_string(c.explain.split)},
              {"first", c.explain.first},
              {"count", c.explain.count},
              {"target", c.explain.target}}},
            {"embedding", to_string(c.embedding)},
            {"debias", to_json(c.debias)},
            {"unpoisoned",
             {{"n_samples", c.unpoisoned.n_samples},
              {"correlation", c.unpoisoned.correlation},
              {"seed_offset", c.unpoisoned.seed_offset}}},
            {"ablate_sources", c.ablate_sources}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig d;
    const json ref = to_json(d);
    require_exact_keys(j, ref, "config");
    ExperimentConfig c;
    c.version = field<int>(j, "version", "config");
    if (c.version != kConfigVersion)
        throw ConfigError("config version " + std::to_string(c.version) + " is not supported (expected " +
                          std::to_string(kConfigVersion) + ")");
    c.seed = field<std::uint64_t>(j, "seed", "config");
    require_exact_keys(j.at("dataset"), ref.at("dataset"), "dataset");
    c.dataset = section(j, "dataset", dataset_spec_from_json);
    c.splits = field<std::array<double, 3>>(j, "splits", "config");

    const auto& codec = j.at("codec");
    require_exact_keys(codec, ref.at("codec"), "codec");
    c.codec.kind = section(codec, "kind", [](const json& v) { return codec_kind_from_string(v.get<std::string>()); });
    require_exact_keys(codec.at("autoencoder"), ref.at("codec").at("autoencoder"), "codec.autoencoder");
    c.codec.autoencoder = section(codec, "autoencoder", autoencoder_config_from_json);

    const auto& sched = j.at("schedule");
    require_exact_keys(sched, ref.at("schedule"), "schedule");
    c.schedule.kind = schedule_kind_from_string(field<std::string>(sched, "kind", "schedule"));
    c.schedule.steps = field<std::size_t>(sched, "steps", "schedule");
    if (c.schedule.steps < 1) throw ConfigError("schedule.steps must be >= 1");

    for (const char* key : {"generator", "classifier", "surrogate", "guidance", "debias"})
        require_exact_keys(j.at(key), ref.at(key), key);
    c.generator = section(j, "generator", generator_config_from_json);
    c.classifier = section(j, "classifier", classifier_config_from_json);
    c.surrogate = section(j, "surrogate", surrogate_spec_from_json);
    c.eval_surrogate_seed_offset = field<std::uint64_t>(j, "eval_surrogate_seed_offset", "config");
    if (c.eval_surrogate_seed_offset == 0)
        throw ConfigError("eval_surrogate_seed_offset must be nonzero so the evaluation surrogate is independent");
    c.guidance = section(j, "guidance", guidance_config_from_json);
    c.gradient_source = section(j, "gradient_source", gradient_source_from_json);

    const auto& ex = j.at("explain");
    require_exact_keys(ex, ref.at("explain"), "explain");
    c.explain.split = split_from_string(field<std::string>(ex, "split", "explain"));
    c.explain.first = field<std::size_t>(ex, "first", "explain");
    c.explain.count = field<std::size_t>(ex, "count", "explain");
    c.explain.target = field<int>(ex, "target", "explain");
    if (c.explain.count < 1) throw ConfigError("explain.count must be >= 1");
    if (c.explain.split == Split::all) throw ConfigError("explain.split must be train, val or test");

    c.embedding = embedding_kind_from_string(field<std::string>(j, "embedding", "config"));
    c.debias = section(j, "debias", debias_config_from_json);

    const auto& un = j.at("unpoisoned");
    require_exact_keys(un, ref.at("unpoisoned"), "unpoisoned");
    c.unpoisoned.n_samples = field<std::size_t>(un, "n_samples", "unpoisoned");
    c.unpoisoned.correlation = field<double>(un, "correlation", "unpoisoned");
    c.unpoisoned.seed_offset = field<std::uint64_t>(un, "seed_offset", "unpoisoned");
    if (c.unpoisoned.n_samples < 1) throw ConfigError("unpoisoned.n_samples must be >= 1");

    c.ablate_sources = field<std::vector<std::string>>(j, "ablate_sources", "config");
    for (const auto& s : c.ablate_sources) gradient_source_from_name(s);
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    return experiment_config_from_json(read_json(path));
}

ExperimentConfig with_seed(ExperimentConfig c, std::uint64_t seed) {
    c.seed = seed;
    c.dataset.seed = seed;
    c.codec.autoencoder.seed = seed;
    c.generator.seed = seed;
    c.classifier.seed = seed;
    c.debias.seed = seed;
    return c;
}

std::uint64_t sample_seed(std::uint64_t master, std::size_t sample_index) {
    return master * 1000003ULL + sample_index;
}

void write_curves_csv(const std::filesystem::path& path, const std::map<std::string, std::vector<double>>& curves) {
    std::ostringstream os;
    std::size_t rows = 0;
    bool first = true;
    for (const auto& [name, v] : curves) {
        os << (first ? "" : ",") << name;
        first = false;
        rows = std::max(rows, v.size());
    }
    os << '\n';
    for (std::size_t r = 0; r < rows; ++r) {
        first = true;
        for (const auto& [name, v] : curves) {
            if (!first) os << ',';
            first = false;
            if (r < v.size()) {
                char buf[40];
                std::snprintf(buf, sizeof buf, "%.17g", v[r]);
                os << buf;
            }
        }
        os << '\n';
    }
    write_text_atomic(path, os.str());
}

Workspace::Workspace(ExperimentConfig cfg, std::filesystem::path out) : cfg_(std::move(cfg)), out_(std::move(out)) {}

void Workspace::snapshot() const {
    std::filesystem::create_directories(out_);
    write_text_atomic(path("config.json"), to_json(cfg_).dump(2) + "\n");
}

LabeledDataset Workspace::synth() const {
    snapshot();
    auto ds = synthesize(cfg_.dataset);
    save(ds, path("dataset.cfxds"));
    return ds;
}

LabeledDataset Workspace::dataset() const {
    require_file(path("dataset.cfxds"), "dataset", "synth");
    return load_dataset(path("dataset.cfxds"));
}

DatasetSplits Workspace::splits() const { return split(dataset(), cfg_.splits); }

void Workspace::train_codec() const {
    snapshot();
    if (cfg_.codec.kind == CodecKind::identity) {
        LatentCodec::identity({cfg_.dataset.channels, cfg_.dataset.image_size, cfg_.dataset.image_size})
            .save(path("codec.cfxae"));
        return;
    }
    const auto sp = splits();
    const auto codec = fit_autoencoder(sp.train, sp.val, cfg_.codec.autoencoder);
    codec.save(path("codec.cfxae"));
    write_curves_csv(path("codec_loss.csv"), {{"loss", codec.loss_history()}});
}

LatentCodec Workspace::codec() const {
    if (cfg_.codec.kind == CodecKind::identity && !std::filesystem::exists(path("codec.cfxae")))
        return LatentCodec::identity({cfg_.dataset.channels, cfg_.dataset.image_size, cfg_.dataset.image_size});
    require_file(path("codec.cfxae"), "codec checkpoint", "train codec");
    auto c = LatentCodec::load(path("codec.cfxae"));
    if (c.kind() != cfg_.codec.kind) throw ConfigError("codec checkpoint kind does not match the config");
    return c;
}

namespace {

TrajectorySchedule make_schedule(const ScheduleChoice& s) {
    return s.kind == ScheduleKind::rectified_flow ? TrajectorySchedule::rectified_flow(s.steps)
                                                  : TrajectorySchedule::ddpm(s.steps);
}

}  // namespace

void Workspace::train_generator() const {
    snapshot();
    const auto sp = splits();
    const auto c = codec();
    const auto model = cfx::train_generator(c.encode(sp.train.images), make_schedule(cfg_.schedule), cfg_.generator);
    model.save(path("generator.cfxgen"));
    write_curves_csv(path("generator_loss.csv"), {{"loss", model.loss_history()}});
}

VelocityModel Workspace::generator() const {
    require_file(path("generator.cfxgen"), "generator checkpoint", "train generator");
    return VelocityModel::load(path("generator.cfxgen"));
}

void Workspace::train_classifier() const {
    snapshot();
    const auto sp = splits();
    const auto f = train_base(sp.train, sp.val, cfg_.classifier);
    f.save(path("f.cfxclf"));
    write_curves_csv(path("f_curves.csv"), f.curves());
}

void Workspace::train_surrogate() const {
    require_file(path("f.cfxclf"), "base classifier checkpoint", "train classifier");
    snapshot();
    const auto sp = splits();
    const auto base = f();
    const auto fh = distill_surrogate(base, sp.train, sp.val, cfg_.surrogate, cfg_.classifier);
    fh.save(path("f_hat.cfxclf"));
    write_curves_csv(path("f_hat_curves.csv"), fh.curves());
    ClassifierConfig eval_cfg = cfg_.classifier;
    eval_cfg.seed += cfg_.eval_surrogate_seed_offset;
    const auto fe = distill_surrogate(base, sp.train, sp.val, cfg_.surrogate, eval_cfg);
    fe.save(path("f_hat_eval.cfxclf"));
    write_curves_csv(path("f_hat_eval_curves.csv"), fe.curves());
}

Classifier Workspace::f() const {
    require_file(path("f.cfxclf"), "base classifier checkpoint", "train classifier");
    return Classifier::load(path("f.cfxclf"));
}

Classifier Workspace::f_hat() const {
    require_file(path("f_hat.cfxclf"), "surrogate checkpoint", "train surrogate");
    return Classifier::load(path("f_hat.cfxclf"));
}

Classifier Workspace::f_hat_eval() const {
    require_file(path("f_hat_eval.cfxclf"), "evaluation surrogate checkpoint", "train surrogate");
    return Classifier::load(path("f_hat_eval.cfxclf"));
}

LabeledDataset Workspace::unpoisoned_test() const {
    DatasetSpec s = cfg_.dataset;
    s.correlation = cfg_.unpoisoned.correlation;
    s.n_samples = cfg_.unpoisoned.n_samples;
    s.seed = cfg_.dataset.seed + cfg_.unpoisoned.seed_offset;
    return synthesize(s);
}

std::vector<RunRecord> Workspace::explain(const GradientSourceSpec& source, const std::filesystem::path& runs_dir,
                                          std::size_t jobs) const {
    cfg_.guidance.validate();
    source.validate();
    const auto sp = splits();
    const LabeledDataset& pool = cfg_.explain.split == Split::train ? sp.train
                                 : cfg_.explain.split == Split::val ? sp.val
                                                                    : sp.test;
    if (cfg_.explain.first + cfg_.explain.count > pool.size())
        throw ConfigError("explain selects samples " + std::to_string(cfg_.explain.first) + ".." +
                          std::to_string(cfg_.explain.first + cfg_.explain.count - 1) + " but the " +
                          to_string(cfg_.explain.split) + " split has " + std::to_string(pool.size()));
    const auto c = codec();
    const auto gen = generator();
    const auto base = f();
    const auto fh = f_hat();
    if (gen.latent_shape() != c.latent_shape()) throw ConfigError("generator was trained for a different codec");
    if (cfg_.explain.target >= static_cast<int>(base.n_classes()) || cfg_.explain.target < -1)
        throw DomainError("explain.target " + std::to_string(cfg_.explain.target) + " is not a class");
    const auto sched = gen.schedule();
    const GradientSource src(source, base, fh);
    const Models models{gen, sched, c, base, fh, src};

    ExperimentConfig run_cfg = cfg_;
    run_cfg.gradient_source = source;
    const json snapshot_json = to_json(run_cfg);

    const std::size_t n = cfg_.explain.count;
    std::vector<RunRecord> runs(n);
    std::vector<std::exception_ptr> errors(n);
    std::filesystem::create_directories(runs_dir);
#pragma omp parallel for schedule(dynamic) num_threads(static_cast<int>(std::max<std::size_t>(jobs, 1)))
    for (std::size_t i = 0; i < n; ++i) {
        try {
            const std::size_t idx = cfg_.explain.first + i;
            RunRecord r;
            char id[64];
            std::snprintf(id, sizeof id, "%s_%04zu", to_string(cfg_.explain.split).c_str(), idx);
            r.id = id;
            r.sample_index = idx;
            r.label = pool.labels[idx];
            r.factual = pool.image(idx);
            r.f_factual = base.predict(r.factual).at(0);
            r.f_hat_factual = fh.predict(r.factual).at(0);
            r.target = cfg_.explain.target >= 0 ? cfg_.explain.target : 1 - r.f_factual;
            r.seed = sample_seed(cfg_.seed, idx);
            r.source = name_of(source);
            r.set = generate_diverse_set(r.factual, r.target, models, cfg_.guidance, cfg_.guidance.max_counterfactuals,
                                         r.seed);
            write_run(runs_dir / r.id, r, snapshot_json);
            runs[i] = std::move(r);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return runs;
}

std::vector<RunRecord> read_runs(const std::filesystem::path& runs_dir) {
    if (!std::filesystem::is_directory(runs_dir)) throw ConfigError("no run directory at " + runs_dir.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(runs_dir))
        if (e.is_directory() && std::filesystem::exists(e.path() / "result.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw ConfigError("no runs found under " + runs_dir.string());
    std::vector<RunRecord> runs;
    for (const auto& d : dirs) runs.push_back(read_run(d));
    return runs;
}

MetricsReport Workspace::evaluate(const std::filesystem::path& runs_dir, const std::filesystem::path& dest) const {
    const auto runs = read_runs(runs_dir);
    const auto base = f();
    const auto fe = f_hat_eval();
    const auto c = codec();
    const auto e = cfg_.embedding == EmbeddingKind::flat_pixels ? EmbeddingFn::flat_pixels() : EmbeddingFn::codec_latent(c);
    std::optional<DebiasResult> debias;
    if (std::filesystem::exists(path("debias.json"))) {
        const auto j = read_json(path("debias.json"));
        DebiasResult d;
        d.acc_before = j.at("acc_before");
        d.acc_after = j.at("acc_after");
        d.err_before = j.at("err_before");
        if (!j.at("gain").is_null()) d.gain = j.at("gain").get<double>();
        d.gain_note = j.at("gain_note");
        d.n_counterfactuals = j.at("n_counterfactuals");
        debias = d;
    }
    auto report = evaluate_run(runs, base, fe, e, debias);
    write_report(dest, report);
    return report;
}

DebiasResult Workspace::debias(const std::filesystem::path& runs_dir) const {
    const auto runs = read_runs(runs_dir);
    const auto cfs = collect_counterfactuals(runs);
    if (cfs.labels.empty()) throw ConfigError("the runs hold no flipped counterfactuals to debias with");
    const auto sp = splits();
    auto r = debias_and_gain(f(), sp.train, unpoisoned_test(), cfs.images, cfs.labels, cfg_.debias);
    r.f_after.save(path("f_debiased.cfxclf"));
    const json j = {{"acc_before", r.acc_before},
                    {"acc_after", r.acc_after},
                    {"err_before", r.err_before},
                    {"gain", r.gain ? json(*r.gain) : json(nullptr)},
                    {"gain_note", r.gain_note},
                    {"n_counterfactuals", r.n_counterfactuals},
                    {"debias", to_json(cfg_.debias)}};
    write_text_atomic(path("debias.json"), j.dump(2) + "\n");
    return r;
}

std::string Workspace::ablate(std::size_t jobs) const {
    std::ostringstream os;
    os << "source,nafr,na_rate,sparsity,diversity,flip_rate\n";
    for (const auto& name : cfg_.ablate_sources) {
        const auto dir = path("ablate") / name;
        explain(gradient_source_from_name(name), dir / "runs", jobs);
        const auto r = evaluate(dir / "runs", dir);
        os << name << ',' << fmt(r.nafr) << ',' << fmt(r.na_rate) << ',' << fmt(r.sparsity) << ','
           << fmt(r.diversity) << ',' << fmt(r.flip_rate) << '\n';
    }
    write_text_atomic(path("ablation.csv"), os.str());
    return os.str();
}

std::string Workspace::report() const {
    std::ostringstream os;
    os << "# Experiment report\n\nOutput directory: `" << out_.string() << "`\n\n";
    auto num = [](const json& v) { return v.is_null() ? std::string("absent") : fmt(v.get<double>()); };
    if (std::filesystem::exists(path("report.json"))) {
        const auto j = read_json(path("report.json"));
        os << "## Metrics\n\n| metric | value | denominator |\n|---|---|---|\n";
        for (const char* k : {"flip_rate", "nafr", "na_rate", "sparsity", "diversity"})
            os << "| " << k << " | " << num(j.at(k)) << " | " << j.at("denominators").at(k).dump() << " |\n";
        os << "| gain | " << num(j.at("gain")) << " | |\n";
        for (const auto& [k, v] : j.at("absent").items()) os << "\n- " << k << " absent: " << v.get<std::string>();
        os << "\n\n";
    }
    if (std::filesystem::exists(path("debias.json"))) {
        const auto j = read_json(path("debias.json"));
        os << "## Debias\n\n- accuracy before: " << fmt(j.at("acc_before").get<double>())
           << "\n- accuracy after: " << fmt(j.at("acc_after").get<double>()) << "\n- gain: " << num(j.at("gain"))
           << "\n- counterfactuals used: " << j.at("n_counterfactuals").dump() << "\n\n";
    }
    if (std::filesystem::exists(path("ablation.csv"))) {
        std::ifstream in(path("ablation.csv"));
        std::string line;
        bool header = true;
        os << "## Gradient-source ablation\n\n";
        while (std::getline(in, line)) {
            std::string row = "| ";
            for (char ch : line) row += ch == ',' ? std::string(" | ") : std::string(1, ch);
            os << row << " |\n";
            if (header) {
                os << "|---|---|---|---|---|---|\n";
                header = false;
            }
        }
        os << '\n';
    }
    const std::string text = os.str();
    write_text_atomic(path("report.md"), text);
    return text;
}

}  // namespace cfx
