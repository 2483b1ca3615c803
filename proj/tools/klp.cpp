#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "klp/pipeline.hpp"
#include "klp/synth.hpp"

namespace {

constexpr int kValidationExit = 1;
constexpr int kRuntimeExit = 2;

void apply_overrides(klp::pipeline::PipelineConfig& cfg, std::optional<unsigned> workers,
                     std::optional<std::uint64_t> seed) {
    if (workers) {
        cfg.workers = *workers;
        cfg.entries["run.workers"] = std::to_string(*workers);
    }
    if (seed) {
        cfg.seed = *seed;
        cfg.train.seed = *seed;
        cfg.entries["run.seed"] = std::to_string(*seed);
    }
    cfg.validate();
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_st("klp"));
    spdlog::set_pattern("[%H:%M:%S.%e] [%l] %v");

    CLI::App app{"klp: content-first keyword landing page pipeline"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "debug logging");

    std::string config_path;
    bool force = false;
    std::optional<unsigned> workers;
    std::optional<std::uint64_t> seed;
    std::vector<CLI::App*> stage_commands;
    auto add_stage = [&](const std::string& name, const std::string& help) {
        auto* cmd = app.add_subcommand(name, help);
        cmd->add_option("--config", config_path, "pipeline config file")->required();
        cmd->add_flag("--force", force, "rerun even when inputs are unchanged");
        cmd->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
        cmd->add_option("--seed", seed, "override run.seed");
        stage_commands.push_back(cmd);
    };
    add_stage("ingest", "load the catalog and attribute annotations");
    add_stage("curate", "build the attribute vocabulary");
    add_stage("train", "fit the projection heads");
    add_stage("match", "assign attributes to every product");
    add_stage("querygen", "enumerate combinations and generate queries");
    add_stage("feedgen", "build collection feeds");
    add_stage("eval", "recall, precision and alignment reports");
    add_stage("related", "related collections");
    add_stage("all", "every stage in order");

    auto* synth = app.add_subcommand("synth", "write a planted-attribute dataset");
    klp::SynthSpec spec;
    std::string synth_out;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--products", spec.n_products, "product count");
    synth->add_option("--seed", spec.seed, "generator seed");
    synth->add_option("--noise", spec.noise, "noise rate in [0, 1)");
    synth->add_option("--exponent", spec.exponent, "power-law exponent");
    synth->add_option("--dimension", spec.base_dimension, "base embedding dimension");
    synth->add_option("--min-attributes", spec.min_attributes, "attributes per product, lower bound");
    synth->add_option("--max-attributes", spec.max_attributes, "attributes per product, upper bound");
    synth->add_option("--damping", spec.popularity_damping, "popularity damping of mixture coefficients");

    auto* config = app.add_subcommand("config", "inspect configuration");
    auto* show = config->add_subcommand("show", "print a configuration");
    config->require_subcommand(1);
    bool defaults = false;
    std::string show_path;
    show->add_flag("--defaults", defaults, "print every default");
    show->add_option("--config", show_path, "print the effective values of this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kValidationExit;
    }
    if (verbose) spdlog::set_level(spdlog::level::debug);

    try {
        if (synth->parsed()) {
            const auto paths = klp::write_dataset(klp::generate(spec), synth_out);
            spdlog::info("wrote {}, {}, {}", paths.catalog.string(), paths.annotations.string(),
                         paths.embeddings.string());
            return 0;
        }
        if (show->parsed()) {
            if (defaults || show_path.empty()) {
                std::cout << klp::pipeline::default_config_text();
            } else {
                const auto cfg = klp::pipeline::load_config(show_path);
                for (const auto& [k, v] : cfg.entries) std::cout << k << " = " << v << "\n";
            }
            return 0;
        }
        for (auto* cmd : stage_commands) {
            if (!cmd->parsed()) continue;
            auto cfg = klp::pipeline::load_config(config_path);
            apply_overrides(cfg, workers, seed);
            klp::pipeline::RunOptions opts;
            opts.force = force;
            klp::pipeline::run_stage(cmd->get_name(), cfg, opts);
        }
        return 0;
    } catch (const klp::pipeline::StageError& e) {
        spdlog::error("{}", e.what());
        return e.exit_code();
    } catch (const klp::ValidationError& e) {
        spdlog::error("{}", e.what());
        return kValidationExit;
    } catch (const klp::ParseError& e) {
        spdlog::error("{}", e.what());
        return kValidationExit;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kRuntimeExit;
    }
}
