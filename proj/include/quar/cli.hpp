/*
 * Copyright 2026 The QuarFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef QUAR_CLI_HPP
#define QUAR_CLI_HPP

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "experiments.hpp"

namespace quar {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumerical = 2 };

namespace detail {

inline ExperimentConfig config_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed)
{
    auto cfg = load_config(path);
    if (seed) {
        cfg.seed = *seed;
        cfg.train.seed = *seed;
    }
    return cfg;
}

/// Polyak model when the file has one, unless `live` is requested.
inline FlowChain pick_model(ModelFile& mf, bool live) { return (!live && mf.polyak) ? *mf.polyak : mf.model; }

inline void write_text(const std::string& path, const std::string& text) { write_file_atomic(path, text); }

inline void print_report(std::ostream& out, const GradCheckReport& rep)
{
    for (const auto& g : rep.groups)
        out << g.name << " max_rel_error=" << format_double(g.max_rel_error) << " count=" << g.count << '\n';
    out << "overall max_rel_error=" << format_double(rep.max_rel_error) << " step=" << format_double(rep.step)
        << '\n';
}

} // namespace detail

/// Entry point for the quarflow tool. Returns 0 on success, 1 on usage or
/// input errors and 2 on numerical failure.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"QuAR flow density estimation"};
    app.require_subcommand(1);
    std::optional<std::uint64_t> seed;
    app.add_option("--seed", seed, "Override the seed used everywhere");

    // train
    std::string config_path, model_out, metrics_out;
    std::optional<std::size_t> updates;
    bool quiet = false;
    auto* train = app.add_subcommand("train", "Train a model from a config file");
    train->add_option("--config", config_path, "Experiment config (JSON)")->required();
    train->add_option("--out", model_out, "Model file to write")->required();
    train->add_option("--metrics", metrics_out, "Metrics file (default: <out>.metrics.json)");
    train->add_option("--updates", updates, "Override the number of updates");
    train->add_option("--seed", seed, "Override the seed used everywhere");
    train->add_flag("--quiet", quiet, "Suppress progress output");

    // commands reading a model file
    std::string model_path, out_path;
    bool live = false;
    auto add_model_opts = [&](CLI::App* sub) {
        sub->add_option("--model", model_path, "Model file")->required();
        sub->add_option("--seed", seed, "Override the seed used everywhere");
        sub->add_flag("--live", live, "Use live parameters instead of the Polyak average");
    };
    auto* eval = app.add_subcommand("eval", "Held-out NLL and bits per dimension");
    add_model_opts(eval);
    eval->add_option("--out", out_path, "Write the report as JSON");

    std::size_t n_samples = 16;
    auto* sample = app.add_subcommand("sample", "Draw samples (CSV for vectors, PGM files for images)");
    add_model_opts(sample);
    sample->add_option("--n", n_samples, "Number of samples");
    sample->add_option("--out", out_path, "CSV path, or output directory for images")->required();

    std::vector<double> bounds{-6.0, 6.0, -6.0, 6.0};
    std::size_t res = 200;
    auto* grid = app.add_subcommand("grid", "Log-density on a regular 2D grid");
    add_model_opts(grid);
    grid->add_option("--bounds", bounds, "xmin xmax ymin ymax")->expected(4);
    grid->add_option("--res", res, "Cells per axis");
    grid->add_option("--out", out_path, "CSV output")->required();

    std::size_t points = 20;
    auto* trace = app.add_subcommand("trace", "Latent trajectories of labelled points through every step");
    add_model_opts(trace);
    trace->add_option("--points", points, "Points per mixture mode");
    trace->add_option("--out", out_path, "CSV output")->required();

    std::size_t gc_flows = 2, gc_multiplier = 2, gc_batch = 4;
    double gc_tol = 1e-4;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of a reduced model from a config");
    gradcheck->add_option("--config", config_path, "Experiment config (JSON)")->required();
    gradcheck->add_option("--seed", seed, "Override the seed used everywhere");
    gradcheck->add_option("--flows", gc_flows, "Flows in the reduced model");
    gradcheck->add_option("--multiplier", gc_multiplier, "Hidden units per input dimension");
    gradcheck->add_option("--batch", gc_batch, "Batch size");
    gradcheck->add_option("--tol", gc_tol, "Maximum relative error accepted");

    std::size_t b_batch = 64, b_terms = 20, b_reps = 5;
    auto* bench = app.add_subcommand("bench", "Pass counts and timing: QuAR vs series-estimator residual flow");
    bench->add_option("--config", config_path, "Experiment config (architecture and data)")->required();
    bench->add_option("--seed", seed, "Override the seed used everywhere");
    bench->add_option("--batch", b_batch, "Batch size");
    bench->add_option("--terms", b_terms, "Truncated series terms for the residual baseline");
    bench->add_option("--reps", b_reps, "Timed repetitions");
    bench->add_option("--out", out_path, "Write the report as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (train->parsed()) {
            auto cfg = detail::config_with_seed(config_path, seed);
            if (updates)
                cfg.train.updates = *updates;
            const std::size_t every = std::max<std::size_t>(1, cfg.train.updates / 20);
            auto res_exp = run_experiment(cfg, [&](std::size_t k, double loss) {
                if (!quiet && (k % every == 0 || k + 1 == cfg.train.updates))
                    err << "update " << k << " loss " << loss << '\n';
            });
            save_model(model_out, to_json(cfg), res_exp.train.live, &res_exp.train.polyak);
            const auto metrics = metrics_json(cfg, res_exp);
            detail::write_text(metrics_out.empty() ? model_out + ".metrics.json" : metrics_out, metrics.dump(2) + "\n");
            out << "heldout_nll live=" << format_double(res_exp.live.nll)
                << " polyak=" << format_double(res_exp.polyak.nll) << '\n';
            return kExitOk;
        }
        if (eval->parsed()) {
            auto mf = load_model(model_path);
            auto cfg = config_from_json(mf.config);
            if (seed)
                cfg.seed = *seed;
            const auto rep = evaluate(detail::pick_model(mf, live), make_heldout(cfg));
            json j = eval_json(rep);
            j["pass_counts"] = {{"residual_forward", rep.residual_forward}, {"vjp", rep.vjp}};
            j["version"] = kVersion;
            if (!out_path.empty())
                detail::write_text(out_path, j.dump(2) + "\n");
            out << j.dump() << '\n';
            return kExitOk;
        }
        if (sample->parsed()) {
            auto mf = load_model(model_path);
            const auto cfg = config_from_json(mf.config);
            const auto model = detail::pick_model(mf, live);
            Rng rng(seed.value_or(cfg.seed), 6);
            const auto xs = chain_sample(model, rng, n_samples);
            if (cfg.dataset.kind == DatasetKind::ToyImages) {
                std::filesystem::create_directories(out_path);
                std::string index;
                for (std::size_t i = 0; i < xs.rows; ++i) {
                    const std::string name = "sample_" + std::to_string(i) + ".pgm";
                    detail::write_text((std::filesystem::path(out_path) / name).string(),
                                       pgm_bytes(xs.row(i), cfg.dataset.side, cfg.dataset.side, cfg.dataset.levels));
                    index += name + "\n";
                }
                detail::write_text((std::filesystem::path(out_path) / "index.txt").string(), index);
            } else {
                std::ostringstream csv;
                for (std::size_t d = 0; d < xs.cols; ++d)
                    csv << (d ? "," : "") << "x" << d;
                csv << '\n';
                for (std::size_t i = 0; i < xs.rows; ++i) {
                    for (std::size_t d = 0; d < xs.cols; ++d)
                        csv << (d ? "," : "") << format_double(xs(i, d));
                    csv << '\n';
                }
                detail::write_text(out_path, csv.str());
            }
            out << "wrote " << xs.rows << " samples to " << out_path << '\n';
            return kExitOk;
        }
        if (grid->parsed()) {
            auto mf = load_model(model_path);
            const auto g = density_grid(detail::pick_model(mf, live), {bounds[0], bounds[1], bounds[2], bounds[3]},
                                        res, res);
            detail::write_text(out_path, grid_csv(g));
            out << "integral=" << format_double(g.integral()) << " failed_cells=" << g.failed_count() << '\n';
            return kExitOk;
        }
        if (trace->parsed()) {
            auto mf = load_model(model_path);
            const auto cfg = config_from_json(mf.config);
            Rng rng(seed.value_or(cfg.seed), 8);
            const auto t = latent_trace(detail::pick_model(mf, live), cfg.dataset, points, rng);
            detail::write_text(out_path, trace_csv(t));
            out << "wrote " << t.steps.size() << " steps for " << t.labels.size() << " points\n";
            return kExitOk;
        }
        if (gradcheck->parsed()) {
            auto cfg = detail::config_with_seed(config_path, seed);
            const std::size_t dim = cfg.dataset.shape().size();
            cfg.model.flows = gc_flows;
            for (auto& w : cfg.model.hidden)
                w = dim * gc_multiplier;
            cfg.model.conv_multiplier = gc_multiplier;
            auto model = build_model(cfg);
            Rng rng(cfg.seed, 1);
            const auto sampler = make_sampler(cfg);
            actnorm_data_init(model, sampler(rng, std::max<std::size_t>(gc_batch, 16)));
            const auto rep = grad_check(model, sampler(rng, gc_batch));
            detail::print_report(out, rep);
            if (!(rep.max_rel_error < gc_tol)) {
                err << "gradient check failed: " << format_double(rep.max_rel_error) << " >= " << gc_tol << '\n';
                return kExitNumerical;
            }
            return kExitOk;
        }
        if (bench->parsed()) {
            auto cfg = detail::config_with_seed(config_path, seed);
            if (cfg.dataset.kind == DatasetKind::ToyImages)
                throw ConfigError("bench: needs a vector dataset");
            Rng rng(cfg.seed, 0);
            const Shape shape = cfg.dataset.shape();
            ModelSpec q = cfg.model;
            q.kind = ModelKind::Quar;
            ModelSpec r = cfg.model;
            r.kind = ModelKind::Residual;
            const auto quar = build_model(q, shape, false, rng);
            SeriesEstimatorConfig series;
            series.terms = b_terms;
            const auto residual = with_series(build_model(r, shape, false, rng), series);
            Rng data(cfg.seed, 1);
            const auto batch = make_sampler(cfg)(data, b_batch);
            const auto rep = bench_passes(quar, residual, batch, b_reps, data);
            const json j = bench_json(rep);
            if (!out_path.empty())
                detail::write_text(out_path, j.dump(2) + "\n");
            out << j.dump() << '\n';
            return kExitOk;
        }
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}

} // namespace quar

#endif // QUAR_CLI_HPP
