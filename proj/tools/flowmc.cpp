#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowmc/bench.hpp"
#include "flowmc/checkpoint.hpp"
#include "flowmc/common.hpp"
#include "flowmc/config.hpp"
#include "flowmc/flow.hpp"
#include "flowmc/image_io.hpp"
#include "flowmc/mis.hpp"
#include "flowmc/training.hpp"

namespace {

using namespace flowmc;

constexpr int kExitError = 1;
constexpr int kExitRejectedSteps = 2;

struct CommonArgs {
    std::string config;
    std::string out;
    std::int64_t seed = -1;  // negative: use the config's seed
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "run configuration file")->required();
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out, "output directory (overrides the config)");
    cmd->add_flag("--quiet", args.quiet, "suppress progress output");
}

// FLOWMC_THREADS caps data-parallel width. The numeric engine is
// single-threaded, so any valid value resolves to 1; garbage still fails
// loudly.
int thread_cap() {
    const char* env = std::getenv("FLOWMC_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1)
        throw ConfigError(strfmt("FLOWMC_THREADS='%s' is not a positive integer", env));
    return 1;
}

std::vector<int> parse_hidden(const std::string& csv) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        const std::string tok = csv.substr(pos, comma - pos);
        char* end = nullptr;
        const long v = std::strtol(tok.c_str(), &end, 10);
        if (end == tok.c_str() || *end != '\0' || v < 1)
            throw ConfigError(strfmt("bad hidden width '%s'", tok.c_str()));
        out.push_back(static_cast<int>(v));
        pos = comma + 1;
    }
    return out;
}

FlowConfig parse_flow_section(const ConfigFile& cfg) {
    FlowConfig fc;
    const ConfigFile::Section* sec = cfg.find("flow");
    if (!sec) return fc;
    fc.dim = static_cast<int>(sec->get_int("dim", fc.dim));
    fc.layers = static_cast<int>(sec->get_int("layers", fc.layers));
    fc.kind = transform_from_name(sec->get_str("transform", transform_name(fc.kind)));
    fc.bins = static_cast<int>(sec->get_int("bins", fc.bins));
    fc.partition = partition_from_name(sec->get_str("partition", partition_name(fc.partition)));
    fc.one_blob = sec->get_bool("one_blob", fc.one_blob);
    fc.blob_k = static_cast<int>(sec->get_int("blob_k", fc.blob_k));
    if (sec->has("net_hidden")) {
        fc.net.hidden = parse_hidden(sec->get_str("net_hidden"));
        fc.net.ushape = false;
    }
    fc.net.ushape = sec->get_bool("net_ushape", fc.net.ushape);
    fc.net.outermost = static_cast<int>(sec->get_int("net_outermost", fc.net.outermost));
    fc.net.levels = static_cast<int>(sec->get_int("net_levels", fc.net.levels));
    return fc;
}

struct TrainSection {
    TrainConfig train;
    std::int64_t budget = 65535;
    std::int64_t steps = 0;
    std::int64_t buffer = 65536;
    int chunk = 4096;
    double fail_threshold = 0.01;
    bool timings = false;
    int density_res = 64;
    bool density_per_iteration = true;
    ProposalKind proposal = ProposalKind::Uniform;
};

TrainSection parse_train_section(const ConfigFile& cfg) {
    TrainSection ts;
    const ConfigFile::Section* sec = cfg.find("train");
    if (!sec) return ts;
    ts.train.loss = loss_from_name(sec->get_str("loss", loss_name(ts.train.loss)));
    ts.train.batch = static_cast<int>(sec->get_int("batch", ts.train.batch));
    ts.train.adam.lr = sec->get_num("lr", ts.train.adam.lr);
    ts.train.clip_norm = sec->get_num("clip", ts.train.clip_norm);
    ts.train.f32 = sec->get_bool("f32", ts.train.f32);
    ts.budget = sec->get_int("budget", ts.budget);
    ts.steps = sec->get_int("steps", ts.steps);
    ts.buffer = sec->get_int("buffer", ts.buffer);
    ts.chunk = static_cast<int>(sec->get_int("chunk", ts.chunk));
    ts.fail_threshold = sec->get_num("fail_threshold", ts.fail_threshold);
    ts.timings = sec->get_bool("timings", ts.timings);
    ts.density_res = static_cast<int>(sec->get_int("density_res", ts.density_res));
    ts.density_per_iteration = sec->get_bool("density_per_iteration", ts.density_per_iteration);
    const std::string prop = sec->get_str("proposal", "uniform");
    if (prop == "uniform") {
        ts.proposal = ProposalKind::Uniform;
    } else if (prop == "flow") {
        ts.proposal = ProposalKind::Flow;
    } else {
        throw ConfigError(strfmt("unknown proposal '%s' (expected uniform or flow)", prop.c_str()));
    }
    return ts;
}

std::uint64_t resolve_seed(const CommonArgs& args, const ConfigFile& cfg,
                           std::uint64_t fallback = 1) {
    if (args.seed >= 0) return static_cast<std::uint64_t>(args.seed);
    const ConfigFile::Section* run = cfg.find("run");
    if (run && run->has("seed")) return static_cast<std::uint64_t>(run->get_int("seed"));
    return fallback;
}

std::string resolve_out(const CommonArgs& args, const ConfigFile& cfg) {
    if (!args.out.empty()) return args.out;
    const ConfigFile::Section* run = cfg.find("run");
    const std::string out = run ? run->get_str("out", "out") : "out";
    return out;
}

void consume_run_section(const ConfigFile& cfg) {
    const ConfigFile::Section* run = cfg.find("run");
    if (!run) return;
    run->get_int("seed", 0);
    run->get_str("out", "");
}

int finish(const CommonArgs& args, double rejected_fraction, double threshold) {
    if (rejected_fraction > threshold) {
        std::fprintf(stderr, "rejected training steps: %.4g%% exceeds the %.4g%% threshold\n",
                     100.0 * rejected_fraction, 100.0 * threshold);
        return kExitRejectedSteps;
    }
    if (!args.quiet) std::printf("done\n");
    return 0;
}

int cmd_train_image(const CommonArgs& args) {
    const ConfigFile cfg = ConfigFile::parse_file(args.config);
    consume_run_section(cfg);
    const std::uint64_t seed = resolve_seed(args, cfg);
    const std::filesystem::path out_dir = resolve_out(args, cfg);

    const ConfigFile::Section* tgt = cfg.find("target");
    if (!tgt) throw ConfigError("train-image needs a [target] section");
    Image target_img;
    const std::string kind = tgt->get_str("kind", "builtin");
    if (kind == "builtin") {
        target_img = make_target(tgt->get_str("name"),
                                 static_cast<int>(tgt->get_int("res", 64)),
                                 static_cast<int>(tgt->get_int("res", 64)));
    } else if (kind == "pgm") {
        target_img = read_pgm(tgt->get_str("path"));
    } else {
        throw ConfigError(strfmt("unknown target kind '%s' (expected builtin or pgm)",
                                 kind.c_str()));
    }
    const ImageTarget target(std::move(target_img));

    FlowConfig fc = parse_flow_section(cfg);
    if (fc.dim != 2) throw ConfigError("train-image requires a 2D flow");
    TrainSection ts = parse_train_section(cfg);
    cfg.check_consumed();

    std::filesystem::create_directories(out_dir);
    NormalizingFlow flow = build_flow(fc, seed);
    FlowOptimizer opt;
    opt.init_like(flow);
    ReplayBuffer buffer(static_cast<std::size_t>(ts.buffer));
    Rng sampler(seed, kStreamSampler), trainer(seed, kStreamTrainer);

    LoopConfig lc;
    lc.budget = ts.budget;
    lc.train_steps = ts.steps;
    lc.proposal = ts.proposal;
    lc.train = ts.train;
    lc.chunk = ts.chunk;
    lc.record_timings = ts.timings;

    const auto on_iteration = [&](int iter, const NormalizingFlow& snapshot) {
        if (ts.density_per_iteration) {
            const Image grid = density_grid(snapshot, ts.density_res);
            write_pfm(grid, (out_dir / strfmt("density_iter%02d.pfm", iter)).string());
        }
        if (!args.quiet) std::printf("iteration %d done\n", iter);
    };

    const ExperimentReport report = online_loop(
        flow, opt, buffer, [&](const double* x) { return target.eval(x); }, lc, sampler, trainer,
        on_iteration);

    write_report_csv(report, (out_dir / "metrics.csv").string());
    const Image final_grid = density_grid(flow, ts.density_res);
    write_pfm(final_grid, (out_dir / "density.pfm").string());
    save_flow(flow, (out_dir / "flow.ckpt").string());

    if (report.aborted) {
        std::fprintf(stderr, "error: target evaluation failed: %s\n", report.error.c_str());
        return kExitError;
    }

    // Summary metrics: the learned density against the target normalized to
    // unit integral (mean 1 on the grid).
    Image ref(ts.density_res, ts.density_res);
    double mean_p = 0.0;
    for (int y = 0; y < ts.density_res; ++y)
        for (int x = 0; x < ts.density_res; ++x)
            mean_p += target.eval((x + 0.5) / ts.density_res, (y + 0.5) / ts.density_res);
    mean_p /= static_cast<double>(ts.density_res) * ts.density_res;
    for (int y = 0; y < ts.density_res; ++y)
        for (int x = 0; x < ts.density_res; ++x)
            ref.at(x, y) =
                target.eval((x + 0.5) / ts.density_res, (y + 0.5) / ts.density_res) / mean_p;
    const double final_mape = mape(final_grid, ref);
    const double ce = cross_entropy_grid(flow, target, ts.density_res);
    Rng eval_rng(seed, kStreamEval);
    const auto [est_mean, est_var] = estimator_variance(
        flow, [&](const double* x) { return target.eval(x); }, 65536, eval_rng);

    {
        std::FILE* fp = std::fopen((out_dir / "summary.csv").string().c_str(), "wb");
        if (!fp) throw Error("cannot write summary.csv");
        std::fputs(
            "cross_entropy,mape,estimate,variance,combined_estimate,train_steps,rejected_steps,"
            "clamped\n",
            fp);
        std::fprintf(fp, "%.17g,%.17g,%.17g,%.17g,%.17g,%lld,%lld,%lld\n", ce, final_mape,
                     est_mean, est_var, report.combined_estimate,
                     static_cast<long long>(report.train_steps),
                     static_cast<long long>(report.rejected_steps),
                     static_cast<long long>(report.clamped));
        std::fclose(fp);
    }
    if (!args.quiet) {
        std::printf("cross_entropy %.6g  mape %.6g  estimate %.6g  variance %.6g\n", ce,
                    final_mape, est_mean, est_var);
    }
    return finish(args, report.rejected_fraction(), ts.fail_threshold);
}

int cmd_guiding_bench(const CommonArgs& args) {
    const ConfigFile cfg = ConfigFile::parse_file(args.config);
    consume_run_section(cfg);
    const ConfigFile::Section* gd = cfg.find("guiding");
    if (!gd) throw ConfigError("guiding-bench needs a [guiding] section");
    const std::string scenario_path = gd->get_str("scenario");
    GuidingScenario scenario = load_scenario(scenario_path);
    const std::uint64_t seed = resolve_seed(args, cfg, scenario.seed);
    const std::filesystem::path out_dir = resolve_out(args, cfg);

    FlowConfig fc = parse_flow_section(cfg);
    fc.dim = 2;
    fc.conditioning = guiding_conditioning();

    GuidingLoopConfig lc;
    lc.train.loss = loss_from_name(gd->get_str("loss", loss_name(lc.train.loss)));
    lc.train.batch = static_cast<int>(gd->get_int("batch", lc.train.batch));
    lc.train.adam.lr = gd->get_num("lr", lc.train.adam.lr);
    lc.train.clip_norm = gd->get_num("clip", lc.train.clip_norm);
    lc.train_steps = gd->get_int("steps", lc.train_steps);
    lc.chunk = static_cast<int>(gd->get_int("chunk", lc.chunk));
    lc.record_timings = gd->get_bool("timings", lc.record_timings);
    const double fail_threshold = gd->get_num("fail_threshold", 0.01);
    const std::int64_t buffer_cap = gd->get_int("buffer", 65536);
    cfg.check_consumed();

    std::filesystem::create_directories(out_dir);
    static const LobeTechnique lobe;
    MisSetup setup = build_mis_setup(fc, fc.net, &lobe, seed);
    MisOptimizer opt;
    opt.init_like(setup);
    ReplayBuffer buffer(static_cast<std::size_t>(buffer_cap));
    Rng sampler(seed, kStreamSampler), trainer(seed, kStreamTrainer);
    Rng select(seed, kStreamSelection), eval(seed, kStreamEval);

    const GuidingReport report =
        guiding_loop(setup, opt, buffer, scenario, lc, sampler, trainer, select, eval);

    write_guiding_csv(report, (out_dir / "guiding.csv").string());
    save_flow(setup.flow, (out_dir / "flow.ckpt").string());
    {
        TensorFile tf;
        add_mlp_tensors(tf, "selection", setup.selection);
        save_tensors(tf, (out_dir / "selection.ckpt").string());
    }
    if (!args.quiet) {
        for (const GuidingRow& r : report.rows) {
            std::printf(
                "iter %2d  c %.3f  var flow %.4g  analytic %.4g  mis(0.5) %.4g  mis(c) %.4g\n",
                r.iteration, r.c_mean, r.var_flow, r.var_analytic, r.var_mis_fixed,
                r.var_mis_learned);
        }
        std::printf("final selection probability: %.4f (scenario '%s')\n", report.c_final,
                    scenario.name.c_str());
    }
    return finish(args, report.rejected_fraction(), fail_threshold);
}

int cmd_diagnose_width_gradients(const CommonArgs& args) {
    const ConfigFile cfg = ConfigFile::parse_file(args.config);
    consume_run_section(cfg);
    const std::filesystem::path out_dir = resolve_out(args, cfg);
    double q1 = 1.0, q2 = 3.0;
    std::string target_name = "uniform";
    if (const ConfigFile::Section* sec = cfg.find("width_diagnostic")) {
        q1 = sec->get_num("q1", q1);
        q2 = sec->get_num("q2", q2);
        target_name = sec->get_str("target", target_name);
    }
    cfg.check_consumed();

    std::function<double(double)> p;
    if (target_name == "uniform") {
        p = [](double) { return 1.0; };
    } else if (target_name == "step") {
        p = [](double x) { return x < 0.5 ? 2.0 : 0.0; };
    } else {
        throw ConfigError(strfmt("unknown diagnostic target '%s' (expected uniform or step)",
                                 target_name.c_str()));
    }

    std::filesystem::create_directories(out_dir);
    const std::string path = (out_dir / "width_gradients.csv").string();
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw Error(strfmt("cannot open '%s' for writing", path.c_str()));
    std::fputs("theta,density_normalized,mass_normalized\n", fp);
    for (int i = 1; i <= 99; ++i) {
        const double theta = i / 100.0;
        const WidthGradients g = broken_width_gradients(theta, q1, q2, p);
        std::fprintf(fp, "%.17g,%.17g,%.17g\n", theta, g.density_norm, g.mass_norm);
    }
    if (std::fclose(fp) != 0) throw Error(strfmt("error closing '%s'", path.c_str()));
    if (!args.quiet) std::printf("wrote %s\n", path.c_str());
    return 0;
}

int cmd_pss_bench(const CommonArgs& args) {
    const ConfigFile cfg = ConfigFile::parse_file(args.config);
    consume_run_section(cfg);
    const std::uint64_t seed = resolve_seed(args, cfg);
    const std::filesystem::path out_dir = resolve_out(args, cfg);

    FlowConfig fc = parse_flow_section(cfg);
    TrainSection ts = parse_train_section(cfg);
    ts.proposal = ProposalKind::Flow;
    std::int64_t eval_samples = 262144;
    if (const ConfigFile::Section* sec = cfg.find("pss")) {
        eval_samples = sec->get_int("eval_samples", eval_samples);
    }
    cfg.check_consumed();

    const PssTarget target = pss_synthetic_target(fc.dim);
    std::filesystem::create_directories(out_dir);
    NormalizingFlow flow = build_flow(fc, seed);
    FlowOptimizer opt;
    opt.init_like(flow);
    ReplayBuffer buffer(static_cast<std::size_t>(ts.buffer));
    Rng sampler(seed, kStreamSampler), trainer(seed, kStreamTrainer);

    LoopConfig lc;
    lc.budget = ts.budget;
    lc.train_steps = ts.steps;
    lc.proposal = ProposalKind::Flow;
    lc.train = ts.train;
    lc.chunk = ts.chunk;
    lc.record_timings = ts.timings;

    const ExperimentReport report = online_loop(
        flow, opt, buffer, [&](const double* x) { return target.eval(x); }, lc, sampler, trainer);
    write_report_csv(report, (out_dir / "metrics.csv").string());
    save_flow(flow, (out_dir / "flow.ckpt").string());
    if (report.aborted) {
        std::fprintf(stderr, "error: target evaluation failed: %s\n", report.error.c_str());
        return kExitError;
    }

    // Variance of the trained-flow estimator vs plain uniform sampling.
    Rng eval_rng(seed, kStreamEval);
    const auto [flow_mean, flow_var] = estimator_variance(
        flow, [&](const double* x) { return target.eval(x); }, eval_samples, eval_rng);
    double uni_mean = 0.0, uni_m2 = 0.0;
    std::vector<double> x(static_cast<std::size_t>(fc.dim));
    for (std::int64_t i = 0; i < eval_samples; ++i) {
        for (double& v : x) v = eval_rng.uniform();
        const double f = target.eval(x.data());
        const double d = f - uni_mean;
        uni_mean += d / static_cast<double>(i + 1);
        uni_m2 += d * (f - uni_mean);
    }
    const double uni_var = uni_m2 / static_cast<double>(eval_samples - 1);

    const std::string path = (out_dir / "pss.csv").string();
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw Error(strfmt("cannot open '%s' for writing", path.c_str()));
    std::fputs("strategy,mean,variance\n", fp);
    std::fprintf(fp, "uniform,%.17g,%.17g\n", uni_mean, uni_var);
    std::fprintf(fp, "flow,%.17g,%.17g\n", flow_mean, flow_var);
    if (std::fclose(fp) != 0) throw Error(strfmt("error closing '%s'", path.c_str()));

    if (!args.quiet) {
        std::printf("normalization %.6g  uniform var %.6g  flow var %.6g  reduction %.2fx\n",
                    target.normalization(), uni_var, flow_var,
                    flow_var > 0.0 ? uni_var / flow_var : 0.0);
    }
    return finish(args, report.rejected_fraction(), 0.01);
}

int cmd_gen_target(const std::string& name, const std::string& out, int res) {
    const Image img = make_target(name, res, res);
    // Normalize peaks into [0, 1] for the 16-bit container.
    Image scaled = img;
    double peak = 0.0;
    for (double v : img.pix) peak = std::max(peak, v);
    for (double& v : scaled.pix) v /= peak;
    write_pgm(scaled, out, 65535);
    std::printf("wrote %s (%dx%d, peak %.4g scaled to 1)\n", out.c_str(), res, res, peak);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learned importance sampling for Monte Carlo integration"};
    app.require_subcommand(1);

    CommonArgs train_args, guide_args, diag_args, pss_args;
    CLI::App* train = app.add_subcommand(
        "train-image", "fit a flow to a grayscale image treated as an unnormalized density");
    add_common(train, train_args);
    CLI::App* guide = app.add_subcommand(
        "guiding-bench", "one-sample mixture benchmark with a learned selection probability");
    add_common(guide, guide_args);
    CLI::App* diag = app.add_subcommand(
        "diagnose-width-gradients",
        "evaluate the broken learned-bin-width gradient formulations on a theta grid");
    add_common(diag, diag_args);
    CLI::App* pss = app.add_subcommand(
        "pss-bench", "train on the high-dimensional synthetic mixture and compare variances");
    add_common(pss, pss_args);

    std::string gen_name = "wedge", gen_out = "target.pgm";
    int gen_res = 64;
    CLI::App* gen = app.add_subcommand("gen-target", "write a benchmark target as a 16-bit PGM");
    gen->add_option("--name", gen_name, "wedge | rings | filaments | constant");
    gen->add_option("--out", gen_out, "output path")->required();
    gen->add_option("--res", gen_res, "resolution");

    CLI11_PARSE(app, argc, argv);

    try {
        thread_cap();
        if (train->parsed()) return cmd_train_image(train_args);
        if (guide->parsed()) return cmd_guiding_bench(guide_args);
        if (diag->parsed()) return cmd_diagnose_width_gradients(diag_args);
        if (pss->parsed()) return cmd_pss_bench(pss_args);
        if (gen->parsed()) return cmd_gen_target(gen_name, gen_out, gen_res);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
    return kExitError;
}
