// Command-line front end for the counterfactual lab.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "cfx/experiment.hpp"

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t jobs = 1;
};

cfx::Workspace workspace(const Globals& g) {
    auto cfg = g.config.empty() ? cfx::ExperimentConfig{} : cfx::load_experiment_config(g.config);
    if (g.seed) cfg = cfx::with_seed(cfg, *g.seed);
    std::filesystem::path out = g.out;
    if (out.empty()) {
        const char* env = std::getenv("CFX_OUT");
        out = env && *env ? env : "cfx_out";
    }
    return cfx::Workspace(std::move(cfg), out);
}

void print_dataset_summary(const cfx::LabeledDataset& ds, const std::filesystem::path& path) {
    std::size_t ones = 0, agree = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ones += ds.labels[i] == 1 ? 1 : 0;
        agree += ds.confound_flags[i] ? 1 : 0;
    }
    std::cout << "wrote " << path.string() << "\n"
              << "  samples: " << ds.size() << "\n"
              << "  class balance: " << ds.size() - ones << " / " << ones << "\n"
              << "  confound correlation: " << static_cast<double>(agree) / static_cast<double>(ds.size()) << "\n";
}

void print_report(const cfx::MetricsReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("absent"); };
    std::cout << "  samples: " << r.n_samples << ", counterfactuals: " << r.n_counterfactuals << "\n"
              << "  flip rate: " << r.flip_rate << "\n"
              << "  NAFR: " << r.nafr << "\n"
              << "  NA: " << opt(r.na_rate) << "\n"
              << "  sparsity: " << r.sparsity << "\n"
              << "  diversity: " << opt(r.diversity) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Counterfactual explanations with smooth-surrogate guidance on a planted-confound image task"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Experiment config (JSON); built-in defaults when omitted")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Overrides the master seed and every component seed");
    app.add_option("--out", g.out, "Output directory (default: $CFX_OUT, else ./cfx_out)");
    app.add_option("--jobs", g.jobs, "Samples explained concurrently")->check(CLI::PositiveNumber);

    auto* config_cmd = app.add_subcommand("config", "Print the effective config as JSON");
    auto* synth = app.add_subcommand("synth", "Synthesize the planted-confound dataset");

    auto* train = app.add_subcommand("train", "Train one component");
    std::string component;
    train->add_option("component", component, "codec | generator | classifier | surrogate")
        ->required()
        ->check(CLI::IsMember({"codec", "generator", "classifier", "surrogate"}));

    auto* explain = app.add_subcommand("explain", "Generate counterfactual sets into <out>/runs");
    std::string source_name;
    std::optional<std::size_t> first, count, k;
    std::optional<int> target;
    explain->add_option("--gradient-source", source_name, "vanilla | smoothgrad | integrated_gradients | surrogate | a*b");
    explain->add_option("--first", first, "First sample index in the explained split");
    explain->add_option("--count", count, "Number of samples");
    explain->add_option("--k", k, "Counterfactuals per sample");
    explain->add_option("--target", target, "Target class (default: the class f does not predict)");

    std::string runs_dir;
    auto* evaluate = app.add_subcommand("evaluate", "Score runs into metrics.csv and report.json");
    evaluate->add_option("--runs", runs_dir, "Run directory (default: <out>/runs)");
    auto* ablate = app.add_subcommand("ablate", "Explain and evaluate once per gradient source");
    auto* debias = app.add_subcommand("debias", "Fine-tune f on the labeled counterfactuals and report the gain");
    debias->add_option("--runs", runs_dir, "Run directory (default: <out>/runs)");
    auto* report = app.add_subcommand("report", "Summarize the output directory into report.md");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        auto ws = workspace(g);
        const auto runs = runs_dir.empty() ? ws.path("runs") : std::filesystem::path(runs_dir);
        if (config_cmd->parsed()) {
            std::cout << to_json(ws.config()).dump(2) << "\n";
        } else if (synth->parsed()) {
            const auto ds = ws.synth();
            print_dataset_summary(ds, ws.path("dataset.cfxds"));
        } else if (train->parsed()) {
            if (component == "codec") ws.train_codec();
            if (component == "generator") ws.train_generator();
            if (component == "classifier") ws.train_classifier();
            if (component == "surrogate") ws.train_surrogate();
            std::cout << "trained " << component << " into " << ws.out().string() << "\n";
        } else if (explain->parsed()) {
            auto cfg = ws.config();
            if (first) cfg.explain.first = *first;
            if (count) cfg.explain.count = *count;
            if (k) cfg.guidance.max_counterfactuals = *k;
            if (target) cfg.explain.target = *target;
            if (!source_name.empty()) cfg.gradient_source = cfx::gradient_source_from_name(source_name);
            cfx::Workspace w(cfg, ws.out());
            const auto rs = w.explain(g.jobs);
            std::size_t flipped = 0, total = 0;
            for (const auto& r : rs)
                for (const auto& cf : r.set.counterfactuals) {
                    flipped += cf.flipped ? 1 : 0;
                    ++total;
                }
            std::cout << "explained " << rs.size() << " samples into " << w.path("runs").string() << " ("
                      << flipped << " of " << total << " counterfactuals flipped f)\n";
        } else if (evaluate->parsed()) {
            const auto r = ws.evaluate(runs, ws.out());
            std::cout << "wrote " << ws.path("metrics.csv").string() << " and " << ws.path("report.json").string()
                      << "\n";
            print_report(r);
        } else if (ablate->parsed()) {
            std::cout << ws.ablate(g.jobs);
        } else if (debias->parsed()) {
            const auto r = ws.debias(runs);
            std::cout << "accuracy before: " << r.acc_before << "\naccuracy after: " << r.acc_after
                      << "\nerror before: " << r.err_before << "\ngain: "
                      << (r.gain ? std::to_string(*r.gain) : "absent (" + r.gain_note + ")") << "\n";
        } else if (report->parsed()) {
            std::cout << ws.report();
        }
    } catch (const cfx::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
