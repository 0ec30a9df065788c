#include "flowmc/mis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "flowmc/common.hpp"
#include "flowmc/encoding.hpp"

namespace flowmc {

namespace {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double accurate_normal_cdf(double z) { return 0.5 * std::erfc(-z / kSqrt2); }

}  // namespace

TruncGauss1::TruncGauss1(double mu_, double sigma_) : mu(mu_), sigma(sigma_) {
    if (!(sigma > 0.0)) throw ParamError("truncated Gaussian: sigma must be positive");
    cdf_lo = accurate_normal_cdf((0.0 - mu) / sigma);
    cdf_hi = accurate_normal_cdf((1.0 - mu) / sigma);
    if (!(cdf_hi - cdf_lo > 0.0))
        throw DegenerateDensityError("truncated Gaussian: no mass inside [0, 1]");
}

double TruncGauss1::pdf(double x) const {
    if (x < 0.0 || x > 1.0) return 0.0;
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * kSqrt2Pi * (cdf_hi - cdf_lo));
}

double TruncGauss1::sample(double u) const {
    const double p = cdf_lo + u * (cdf_hi - cdf_lo);
    const double x = mu + sigma * inverse_normal_cdf(p);
    // Quantile rounding can land a hair outside the truncation window.
    return std::clamp(x, 0.0, kBelowOne);
}

EnvMixture EnvMixture::standard() {
    EnvMixture env;
    env.blobs = {
        {1.0, 0.15, 0.65, 0.20, 0.15},  // straddles the cyclic seam
        {0.8, 0.60, 0.30, 0.10, 0.10},
    };
    env.floor = 0.05;
    return env;
}

EnvMixture EnvMixture::from_config(const ConfigFile::Section* sec) {
    EnvMixture env = standard();
    if (!sec) return env;
    env.floor = sec->get_num("floor", env.floor);
    const char* prefix[] = {"a", "b"};
    for (std::size_t i = 0; i < 2; ++i) {
        Blob& blob = env.blobs[i];
        blob.amp = sec->get_num(std::string(prefix[i]) + "_amp", blob.amp);
        blob.u = sec->get_num(std::string(prefix[i]) + "_u", blob.u);
        blob.v = sec->get_num(std::string(prefix[i]) + "_v", blob.v);
        blob.sigma_u = sec->get_num(std::string(prefix[i]) + "_sigma_u", blob.sigma_u);
        blob.sigma_v = sec->get_num(std::string(prefix[i]) + "_sigma_v", blob.sigma_v);
        if (!(blob.sigma_u > 0.0 && blob.sigma_v > 0.0))
            throw ConfigError("environment blob widths must be positive");
    }
    if (!(env.floor >= 0.0)) throw ConfigError("environment floor must be nonnegative");
    return env;
}

double EnvMixture::eval(double u, double v) const {
    double f = floor;
    for (const Blob& b : blobs) {
        double du = u - b.u;
        du -= std::rint(du);  // cyclic first coordinate
        const double dv = v - b.v;
        const double zu = du / b.sigma_u, zv = dv / b.sigma_v;
        f += b.amp * std::exp(-0.5 * (zu * zu + zv * zv));
    }
    return f;
}

ConditioningSpec guiding_conditioning() {
    ConditioningSpec spec;
    spec.features = {{"lobe_u", 0.0, 1.0},
                     {"lobe_v", 0.0, 1.0},
                     {"sigma", 0.005, 0.5},
                     {"scene_id", 0.0, 3.0}};
    return spec;
}

AnalyticTechnique::Draw LobeTechnique::sample(const double* u2, const GuidingContext& ctx) const {
    const ProductLobe lobe(ctx.lobe_u, ctx.lobe_v, ctx.sigma);
    Draw d;
    lobe.sample(u2, d.x.data());
    d.density = lobe.pdf(d.x.data());
    d.atom = false;
    return d;
}

double LobeTechnique::pdf(const double* x, const GuidingContext& ctx) const {
    return ProductLobe(ctx.lobe_u, ctx.lobe_v, ctx.sigma).pdf(x);
}

MisSetup build_mis_setup(const FlowConfig& flow_cfg, const NetShape& selection_shape,
                         const AnalyticTechnique* technique, std::uint64_t seed) {
    if (flow_cfg.dim != 2)
        throw ConfigError("the guiding benchmark is two-dimensional; flow dim must be 2");
    if (flow_cfg.conditioning.count() == 0)
        throw ConfigError("mixture-aware training needs conditioning features");
    if (!technique) throw ConfigError("an analytic technique is required");

    MisSetup setup;
    setup.flow = build_flow(flow_cfg, seed);
    const MlpSpec spec = net_spec_for(selection_shape, setup.flow.cond_enc_width(), 1);
    Rng rng(seed, kStreamInit + 999);  // distinct from every coupling net stream
    setup.selection = make_mlp(spec, rng);
    setup.technique = technique;
    return setup;
}

double effective_pdf(double q, double analytic, double c) {
    if (!(q >= 0.0) || !(analytic >= 0.0))
        throw ParamError("effective_pdf: densities must be nonnegative");
    if (!(c >= 0.0 && c <= 1.0))
        throw ParamError(strfmt("effective_pdf: c = %.17g outside [0, 1]", c));
    return c * q + (1.0 - c) * analytic;
}

double blend_beta(double tau) {
    if (!(tau >= 0.0 && tau <= 1.0))
        throw DomainError(strfmt("blend_beta: tau = %.17g outside [0, 1]", tau));
    return 0.5 * std::pow(1.0 / 3.0, 5.0 * tau);
}

double selection_prob(const MisSetup& setup, const GuidingContext& ctx) {
    const std::vector<double> feat = ctx.features();
    Matrix raw(1, feat.size());
    std::copy(feat.begin(), feat.end(), raw.row(0));
    Matrix enc, out;
    encode_conditioning(setup.flow, raw, enc);
    mlp_forward(setup.selection, enc, out);
    return logistic(out.at(0, 0));
}

OneSampleResult one_sample_estimate(const MisSetup& setup, double u_select, const double* u2,
                                    const GuidingContext& ctx,
                                    const std::function<double(const double*, const GuidingContext&)>& f,
                                    const double* c_override) {
    const double c = c_override ? *c_override : selection_prob(setup, ctx);
    if (!(c >= 0.0 && c <= 1.0))
        throw ParamError(strfmt("one_sample_estimate: c = %.17g outside [0, 1]", c));

    OneSampleResult res;
    TrainRecord& rec = res.record;
    rec.cond = ctx.features();
    rec.x.resize(2);
    double q;
    if (u_select < c) {
        Matrix u(1, 2), cond(1, rec.cond.size()), x;
        u.row(0)[0] = u2[0];
        u.row(0)[1] = u2[1];
        std::copy(rec.cond.begin(), rec.cond.end(), cond.row(0));
        std::vector<double> logq;
        flow_sample(setup.flow, u, cond, x, &logq);
        rec.x[0] = x.at(0, 0);
        rec.x[1] = x.at(0, 1);
        q = std::exp(logq[0]);
        rec.analytic_pdf = setup.technique->pdf(rec.x.data(), ctx);
        rec.atom = false;
    } else {
        const AnalyticTechnique::Draw d = setup.technique->sample(u2, ctx);
        rec.x[0] = d.x[0];
        rec.x[1] = d.x[1];
        rec.analytic_pdf = d.density;
        rec.atom = d.atom;
        // The flow has no mass on a discrete atom.
        q = d.atom ? 0.0 : flow_pdf1(setup.flow, rec.x.data(), rec.cond.data());
    }

    const double qp = effective_pdf(q, rec.analytic_pdf, c);
    if (!(qp > 0.0))
        throw DegenerateDensityError(
            strfmt("one-sample mixture density vanished at (%g, %g)", rec.x[0], rec.x[1]));
    rec.f = f(rec.x.data(), ctx);
    rec.proposal_pdf = qp;
    res.value = rec.f / qp;
    return res;
}

void MisOptimizer::init_like(const MisSetup& setup) {
    flow.init_like(setup.flow);
    selection.init_like(setup.selection);
}

StepStats mis_train_step(MisSetup& setup, MisOptimizer& opt, const ReplayBuffer& buffer,
                         Rng& trainer_rng, double tau, const MisTrainConfig& cfg) {
    if (cfg.batch <= 0) throw ConfigError("train batch size must be positive");
    const double beta = blend_beta(tau);
    const std::vector<TrainRecord> batch =
        buffer.sample_batch(trainer_rng, static_cast<std::size_t>(cfg.batch));
    const std::size_t n = batch.size();
    const std::int64_t dim = setup.flow.cfg.dim;
    const std::int64_t cond_dim = setup.flow.cfg.conditioning.count();

    Matrix x(n, static_cast<std::size_t>(dim));
    Matrix cond(n, static_cast<std::size_t>(cond_dim));
    for (std::size_t i = 0; i < n; ++i) {
        const TrainRecord& rec = batch[i];
        if (static_cast<std::int64_t>(rec.x.size()) != dim ||
            static_cast<std::int64_t>(rec.cond.size()) != cond_dim)
            throw ShapeError("train record does not match the flow's shape");
        std::copy(rec.x.begin(), rec.x.end(), x.row(i));
        std::copy(rec.cond.begin(), rec.cond.end(), cond.row(i));
    }

    FlowCache cache;
    std::vector<double> logq;
    flow_log_pdf(setup.flow, x, cond, logq, &cache);

    Matrix enc, sel_out;
    MlpCache sel_cache;
    encode_conditioning(setup.flow, cond, enc);
    mlp_forward(setup.selection, enc, sel_out, &sel_cache);

    StepStats stats;
    std::vector<double> coeff(n, 0.0);
    Matrix g_sel(n, 1);
    g_sel.zero();
    double loss_sum = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const TrainRecord& rec = batch[i];
        const double c = logistic(sel_out.at(i, 0));
        const double q = rec.atom ? 0.0 : std::exp(logq[i]);
        const double qp = effective_pdf(q, rec.analytic_pdf, c);
        if (!(qp > 0.0)) {
            stats.rejected = true;
            return stats;
        }
        if (rec.f == 0.0) continue;
        const double w_qp = loss_weight(cfg.loss, rec.f, rec.proposal_pdf, qp);
        double w_q = 0.0;
        if (!rec.atom) {
            w_q = loss_weight(cfg.loss, rec.f, rec.proposal_pdf, q);
            loss_sum += beta * -w_q * logq[i];
        }
        loss_sum += (1.0 - beta) * -w_qp * std::log(qp);
        // d log q' / d log q = c q / q'; d log q' / d s = (q - p) c (1 - c) / q'.
        coeff[i] = -(beta * w_q + (1.0 - beta) * w_qp * c * q / qp) * inv_n;
        g_sel.at(i, 0) =
            -(1.0 - beta) * w_qp * (q - rec.analytic_pdf) * c * (1.0 - c) / qp * inv_n;
    }
    stats.loss = loss_sum * inv_n;
    if (!finite(stats.loss)) {
        stats.rejected = true;
        return stats;
    }

    FlowGrad fgrad;
    fgrad.init_like(setup.flow);
    flow_backward(setup.flow, cache, coeff, fgrad);
    MlpGrad sgrad;
    sgrad.init_like(setup.selection);
    mlp_backward(setup.selection, sel_cache, g_sel, sgrad);

    const double sq = fgrad.sq_norm() + grad_sq_norm(sgrad);
    if (!finite(sq)) {
        stats.rejected = true;
        return stats;
    }
    stats.grad_norm = std::sqrt(sq);
    const double clip = cfg.effective_clip();
    if (clip > 0.0 && stats.grad_norm > clip) {
        const double s = clip / stats.grad_norm;
        fgrad.scale(s);
        sgrad.scale(s);
        stats.grad_norm = clip;
        stats.clipped = true;
    }

    // Finiteness was established above, so neither update can throw midway.
    opt.flow.adam = cfg.adam;
    flow_adam_step(setup.flow, fgrad, opt.flow);
    adam_step(setup.selection, sgrad, opt.selection, cfg.adam);
    return stats;
}

GuidingScenario parse_scenario(const ConfigFile& cfg) {
    GuidingScenario sc;
    const ConfigFile::Section* head = cfg.find("scenario");
    if (!head) throw ConfigError(strfmt("%s: missing [scenario] section", cfg.origin().c_str()));
    sc.name = head->get_str("name", "unnamed");
    sc.budget = head->get_int("budget", sc.budget);
    sc.eval_samples = static_cast<int>(head->get_int("eval_samples", sc.eval_samples));
    sc.seed = static_cast<std::uint64_t>(head->get_int("seed", 1));
    if (sc.budget < 1) throw ConfigError("scenario budget must be positive");
    if (sc.eval_samples < 2) throw ConfigError("scenario eval_samples must be at least 2");

    const ConditioningSpec spec = guiding_conditioning();
    for (const ConfigFile::Section* s : cfg.find_all("context")) {
        GuidingContext ctx;
        ctx.lobe_u = s->get_num("lobe_u");
        ctx.lobe_v = s->get_num("lobe_v");
        ctx.sigma = s->get_num("sigma");
        ctx.scene_id = s->get_num("scene_id", 0.0);
        if (!(ctx.lobe_u >= 0.0 && ctx.lobe_u <= 1.0 && ctx.lobe_v >= 0.0 && ctx.lobe_v <= 1.0))
            throw ConfigError("context lobe center must lie in the unit square");
        if (!(ctx.sigma >= spec.features[2].lo && ctx.sigma <= spec.features[2].hi))
            throw ConfigError(strfmt("context sigma %g outside [%g, %g]", ctx.sigma,
                                     spec.features[2].lo, spec.features[2].hi));
        sc.contexts.push_back(ctx);
    }
    if (sc.contexts.empty())
        throw ConfigError(strfmt("%s: at least one [context] section required",
                                 cfg.origin().c_str()));
    sc.env = EnvMixture::from_config(cfg.find("environment"));
    return sc;
}

GuidingScenario load_scenario(const std::string& path) {
    const ConfigFile cfg = ConfigFile::parse_file(path);
    GuidingScenario sc = parse_scenario(cfg);
    cfg.check_consumed();
    return sc;
}

namespace {

struct VarianceAccum {
    double mean = 0.0, m2 = 0.0;
    std::int64_t n = 0;

    void add(double w) {
        ++n;
        const double d = w - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (w - mean);
    }
    double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : INFINITY; }
};

}  // namespace

GuidingReport guiding_loop(MisSetup& setup, MisOptimizer& opt, ReplayBuffer& buffer,
                           const GuidingScenario& scenario, const GuidingLoopConfig& cfg,
                           Rng& sampler_rng, Rng& trainer_rng, Rng& select_rng, Rng& eval_rng) {
    if (cfg.chunk <= 0) throw ConfigError("sampling chunk size must be positive");
    const std::vector<std::int64_t> schedule = power_of_two_schedule(scenario.budget);
    const std::int64_t total_steps =
        cfg.train_steps > 0 ? cfg.train_steps
                            : (scenario.budget + cfg.train.batch - 1) / cfg.train.batch;
    const std::size_t nctx = scenario.contexts.size();
    const auto target = [&](const double* xp, const GuidingContext& ctx) {
        return scenario.env.eval(xp) *
               ProductLobe(ctx.lobe_u, ctx.lobe_v, ctx.sigma).pdf(xp);
    };

    GuidingReport report;
    std::int64_t samples_done = 0;
    std::int64_t steps_done = 0;
    std::size_t ctx_cursor = 0;

    for (std::size_t iter = 0; iter < schedule.size(); ++iter) {
        const auto t0 = std::chrono::steady_clock::now();
        GuidingRow row;
        row.iteration = static_cast<int>(iter + 1);
        row.samples = schedule[iter];
        double loss_sum = 0.0;
        std::int64_t loss_count = 0;

        std::int64_t remaining = schedule[iter];
        while (remaining > 0) {
            const std::int64_t chunk = std::min<std::int64_t>(remaining, cfg.chunk);
            for (std::int64_t i = 0; i < chunk; ++i) {
                const GuidingContext& ctx = scenario.contexts[ctx_cursor];
                ctx_cursor = (ctx_cursor + 1) % nctx;
                const double u_sel = select_rng.uniform();
                const double u2[2] = {sampler_rng.uniform(), sampler_rng.uniform()};
                OneSampleResult res = one_sample_estimate(setup, u_sel, u2, ctx, target);
                buffer.push(std::move(res.record));
            }
            samples_done += chunk;
            remaining -= chunk;

            const std::int64_t step_target = static_cast<std::int64_t>(
                (static_cast<long double>(total_steps) * samples_done) / scenario.budget);
            while (steps_done < step_target) {
                const double tau =
                    static_cast<double>(samples_done) / static_cast<double>(scenario.budget);
                StepStats s = mis_train_step(setup, opt, buffer, trainer_rng, tau, cfg.train);
                ++steps_done;
                ++report.train_steps;
                if (s.rejected) {
                    ++report.rejected_steps;
                } else {
                    loss_sum += s.loss;
                    ++loss_count;
                }
            }
        }
        row.loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;

        // Held-out variance of each strategy under the current snapshot.
        VarianceAccum flow_only, analytic_only, mis_fixed, mis_learned;
        for (int j = 0; j < scenario.eval_samples; ++j) {
            const GuidingContext& ctx = scenario.contexts[static_cast<std::size_t>(j) % nctx];
            const std::vector<double> feat = ctx.features();
            {
                double xp[2], pdf;
                flow_sample1(setup.flow, eval_rng, feat.data(), xp, &pdf);
                flow_only.add(target(xp, ctx) / pdf);
            }
            {
                const double u2[2] = {eval_rng.uniform(), eval_rng.uniform()};
                const AnalyticTechnique::Draw d = setup.technique->sample(u2, ctx);
                analytic_only.add(target(d.x.data(), ctx) / d.density);
            }
            {
                const double u_sel = eval_rng.uniform();
                const double u2[2] = {eval_rng.uniform(), eval_rng.uniform()};
                const double half = 0.5;
                mis_fixed.add(one_sample_estimate(setup, u_sel, u2, ctx, target, &half).value);
            }
            {
                const double u_sel = eval_rng.uniform();
                const double u2[2] = {eval_rng.uniform(), eval_rng.uniform()};
                mis_learned.add(one_sample_estimate(setup, u_sel, u2, ctx, target).value);
            }
        }
        row.var_flow = flow_only.variance();
        row.var_analytic = analytic_only.variance();
        row.var_mis_fixed = mis_fixed.variance();
        row.var_mis_learned = mis_learned.variance();

        double c_sum = 0.0;
        for (const GuidingContext& ctx : scenario.contexts) c_sum += selection_prob(setup, ctx);
        row.c_mean = c_sum / static_cast<double>(nctx);

        if (cfg.record_timings) {
            row.wallclock_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
        }
        report.rows.push_back(row);
    }

    report.c_final = report.rows.empty() ? 0.5 : report.rows.back().c_mean;
    return report;
}

void write_guiding_csv(const GuidingReport& report, const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw Error(strfmt("cannot open '%s' for writing", path.c_str()));
    std::fputs(
        "iteration,samples,loss,c_mean,var_flow,var_analytic,var_mis_fixed,var_mis_learned,"
        "wallclock_ms\n",
        fp);
    for (const GuidingRow& r : report.rows) {
        std::fprintf(fp, "%d,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration,
                     static_cast<long long>(r.samples), r.loss, r.c_mean, r.var_flow,
                     r.var_analytic, r.var_mis_fixed, r.var_mis_learned, r.wallclock_ms);
    }
    if (std::fclose(fp) != 0) throw Error(strfmt("error closing '%s'", path.c_str()));
}

}  // namespace flowmc
