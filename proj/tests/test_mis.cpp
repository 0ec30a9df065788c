#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "flowmc/common.hpp"
#include "flowmc/encoding.hpp"
#include "flowmc/flow.hpp"
#include "flowmc/mis.hpp"
#include "flowmc/mlp.hpp"
#include "flowmc/rng.hpp"

using namespace flowmc;

namespace {

// Composite Simpson, accurate far beyond the tolerances used here for the
// smooth densities under test.
double integrate(const std::function<double(double)>& f, double a, double b, int n = 2048) {
    const double h = (b - a) / n;
    double acc = f(a) + f(b);
    for (int i = 1; i < n; ++i) acc += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

double integrate2(const std::function<double(double, double)>& f) {
    return integrate([&](double u) { return integrate([&](double v) { return f(u, v); }, 0.0, 1.0, 1024); },
                     0.0, 1.0, 1024);
}

FlowConfig mis_flow_config(Transform kind = Transform::Pwq) {
    FlowConfig cfg;
    cfg.dim = 2;
    cfg.layers = 2;
    cfg.kind = kind;
    cfg.bins = 4;
    cfg.one_blob = true;
    cfg.blob_k = 4;
    cfg.net.hidden = {8};
    cfg.net.ushape = false;
    cfg.conditioning = guiding_conditioning();
    return cfg;
}

NetShape small_selection() {
    NetShape shape;
    shape.hidden = {8};
    shape.ushape = false;
    return shape;
}

// Two discrete atoms and no continuous part, the shape of a point light in
// a scene: the flow can never match it.
class AtomPairTechnique : public AnalyticTechnique {
public:
    Draw sample(const double* u2, const GuidingContext&) const override {
        Draw d;
        d.atom = true;
        if (u2[0] < 0.4) {
            d.x = {0.25, 0.25};
            d.density = 0.4;
        } else {
            d.x = {0.75, 0.75};
            d.density = 0.6;
        }
        return d;
    }
    double pdf(const double*, const GuidingContext&) const override { return 0.0; }
};

}  // namespace

TEST_SUITE("mis") {
    TEST_CASE("truncated gaussian is normalized and quantile sampling inverts its cdf") {
        for (const auto& [mu, sigma] : {std::pair{0.5, 0.1}, {0.05, 0.3}, {1.2, 0.5}}) {
            const TruncGauss1 g(mu, sigma);
            CHECK(integrate([&](double x) { return g.pdf(x); }, 0.0, 1.0) ==
                  doctest::Approx(1.0).epsilon(1e-9));
            for (double u : {1e-6, 0.25, 0.5, 0.9, 0.999}) {
                const double x = g.sample(u);
                CHECK(x >= 0.0);
                CHECK(x < 1.0);
                CHECK(integrate([&](double t) { return g.pdf(t); }, 0.0, x) ==
                      doctest::Approx(u).epsilon(1e-7));
            }
        }
        CHECK(TruncGauss1(0.5, 0.1).pdf(-0.01) == 0.0);
        CHECK(TruncGauss1(0.5, 0.1).pdf(1.01) == 0.0);
        CHECK_THROWS_AS(TruncGauss1(0.5, 0.0), ParamError);
        CHECK_THROWS_AS(TruncGauss1(1000.0, 1.0), DegenerateDensityError);

        const ProductLobe lobe(0.3, 0.7, 0.2);
        const double x[2] = {0.5, 0.5};
        CHECK(lobe.pdf(x) == doctest::Approx(lobe.gu.pdf(0.5) * lobe.gv.pdf(0.5)));
    }

    TEST_CASE("environment field wraps its first coordinate") {
        const EnvMixture env = EnvMixture::standard();
        // The first blob sits at u = 0.15; seen from u = 0.95 the wrapped
        // offset is -0.20, not +0.80.
        const double direct = env.eval(0.95, 0.65);
        double oracle = env.floor;
        oracle += 1.0 * std::exp(-0.5 * ((0.2 / 0.2) * (0.2 / 0.2)));  // wrapped du
        oracle += 0.8 * std::exp(-0.5 * (((0.95 - 0.6) / 0.1) * ((0.95 - 0.6) / 0.1) +
                                         ((0.65 - 0.3) / 0.1) * ((0.65 - 0.3) / 0.1)));
        CHECK(direct == doctest::Approx(oracle).epsilon(1e-12));
        CHECK(env.eval(0.95, 0.65) == doctest::Approx(env.eval(1.95, 0.65)).epsilon(1e-12));
        for (double u : {0.0, 0.33, 0.77}) CHECK(env.eval(u, 0.5) >= env.floor);

        CHECK(EnvMixture::from_config(nullptr).blobs[0].u == env.blobs[0].u);
        const ConfigFile cfg = ConfigFile::parse_string(
            "[environment]\nfloor = 0.2\na_amp = 2.0\na_sigma_u = 0.3\n");
        const EnvMixture tweaked = EnvMixture::from_config(cfg.find("environment"));
        CHECK(tweaked.floor == 0.2);
        CHECK(tweaked.blobs[0].amp == 2.0);
        CHECK(tweaked.blobs[0].sigma_u == 0.3);
        CHECK(tweaked.blobs[1].amp == env.blobs[1].amp);
        const ConfigFile bad = ConfigFile::parse_string("[environment]\na_sigma_u = 0\n");
        CHECK_THROWS_AS(EnvMixture::from_config(bad.find("environment")), ConfigError);
    }

    TEST_CASE("lobe technique reports the density it draws from") {
        GuidingContext ctx;
        ctx.lobe_u = 0.3;
        ctx.lobe_v = 0.8;
        ctx.sigma = 0.07;
        const LobeTechnique tech;
        const ProductLobe lobe(ctx.lobe_u, ctx.lobe_v, ctx.sigma);
        Rng rng(21, kStreamEval);
        for (int i = 0; i < 50; ++i) {
            const double u2[2] = {rng.uniform(), rng.uniform()};
            const auto d = tech.sample(u2, ctx);
            CHECK_FALSE(d.atom);
            CHECK(d.density == doctest::Approx(lobe.pdf(d.x.data())).epsilon(1e-12));
            CHECK(tech.pdf(d.x.data(), ctx) == doctest::Approx(d.density).epsilon(1e-12));
        }
    }

    TEST_CASE("mixture density and blend schedule") {
        CHECK(effective_pdf(2.0, 4.0, 0.25) == doctest::Approx(3.5));
        CHECK(effective_pdf(2.0, 4.0, 0.0) == 4.0);
        CHECK(effective_pdf(2.0, 4.0, 1.0) == 2.0);
        CHECK_THROWS_AS(effective_pdf(-1.0, 4.0, 0.5), ParamError);
        CHECK_THROWS_AS(effective_pdf(1.0, 4.0, 1.5), ParamError);

        CHECK(blend_beta(0.0) == doctest::Approx(0.5));
        CHECK(blend_beta(0.2) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
        CHECK(blend_beta(1.0) == doctest::Approx(1.0 / 486.0).epsilon(1e-12));
        CHECK_THROWS_AS(blend_beta(-0.1), DomainError);
        CHECK_THROWS_AS(blend_beta(1.1), DomainError);
    }

    TEST_CASE("fresh setup splits between techniques evenly") {
        const LobeTechnique tech;
        const MisSetup setup = build_mis_setup(mis_flow_config(), small_selection(), &tech, 5);
        GuidingContext ctx;
        CHECK(selection_prob(setup, ctx) == 0.5);  // zero-headed selection net
        ctx.lobe_u = 0.9;
        ctx.sigma = 0.02;
        CHECK(selection_prob(setup, ctx) == 0.5);

        FlowConfig bad = mis_flow_config();
        bad.dim = 3;
        CHECK_THROWS_AS(build_mis_setup(bad, small_selection(), &tech, 5), ConfigError);
        bad = mis_flow_config();
        bad.conditioning = ConditioningSpec{};
        CHECK_THROWS_AS(build_mis_setup(bad, small_selection(), &tech, 5), ConfigError);
        CHECK_THROWS_AS(build_mis_setup(mis_flow_config(), small_selection(), nullptr, 5),
                        ConfigError);
    }

    TEST_CASE("one-sample mixture estimator is unbiased against quadrature") {
        const LobeTechnique tech;
        const MisSetup setup = build_mis_setup(mis_flow_config(), small_selection(), &tech, 7);
        const EnvMixture env = EnvMixture::standard();
        GuidingContext ctx;
        ctx.lobe_u = 0.3;
        ctx.lobe_v = 0.7;
        ctx.sigma = 0.15;
        const auto f = [&](const double* xp, const GuidingContext&) { return env.eval(xp); };
        const double truth = integrate2([&](double u, double v) { return env.eval(u, v); });

        const double c = 0.5;
        Rng rng(11, kStreamEval);
        const int n = 50000;
        double mean = 0.0, m2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double u_sel = rng.uniform();
            const double u2[2] = {rng.uniform(), rng.uniform()};
            const OneSampleResult res = one_sample_estimate(setup, u_sel, u2, ctx, f, &c);
            const double d = res.value - mean;
            mean += d / (i + 1);
            m2 += d * (res.value - mean);
        }
        const double se = std::sqrt(m2 / (n - 1.0) / n);
        CHECK(std::abs(mean - truth) < 4.0 * se + 1e-12);

        // A fresh flow is the identity, so the flow branch echoes the latent
        // point and the record carries the mixture density it was drawn with.
        const double u2[2] = {0.37, 0.81};
        const OneSampleResult res = one_sample_estimate(setup, 0.1, u2, ctx, f, &c);
        CHECK_FALSE(res.record.atom);
        CHECK(res.record.x[0] == doctest::Approx(0.37).epsilon(1e-9));
        CHECK(res.record.x[1] == doctest::Approx(0.81).epsilon(1e-9));
        const double p = tech.pdf(res.record.x.data(), ctx);
        CHECK(res.record.proposal_pdf == doctest::Approx(effective_pdf(1.0, p, c)).epsilon(1e-9));
        CHECK(res.value == doctest::Approx(f(res.record.x.data(), ctx) / res.record.proposal_pdf));
    }

    TEST_CASE("discrete atoms weight by their mass") {
        const AtomPairTechnique tech;
        const MisSetup setup = build_mis_setup(mis_flow_config(), small_selection(), &tech, 9);
        const auto one = [](const double*, const GuidingContext&) { return 1.0; };
        GuidingContext ctx;

        // Analytic side only: each atom contributes f(x_i), so the constant
        // integrand sums to the atom count.
        const double c0 = 0.0;
        Rng rng(13, kStreamEval);
        double mean = 0.0;
        const int n = 20000;
        for (int i = 0; i < n; ++i) {
            const double u_sel = rng.uniform();
            const double u2[2] = {rng.uniform(), rng.uniform()};
            const OneSampleResult res = one_sample_estimate(setup, u_sel, u2, ctx, one, &c0);
            CHECK(res.record.atom);
            mean += res.value;
        }
        mean /= n;
        CHECK(mean == doctest::Approx(2.0).epsilon(0.02));

        // Balanced mixture with an identity flow: expectation is the
        // continuous integral plus the atom sum, 1 + 2.
        const double chalf = 0.5;
        double mean2 = 0.0, m2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double u_sel = rng.uniform();
            const double u2[2] = {rng.uniform(), rng.uniform()};
            const double v = one_sample_estimate(setup, u_sel, u2, ctx, one, &chalf).value;
            const double d = v - mean2;
            mean2 += d / (i + 1);
            m2 += d * (v - mean2);
        }
        const double se = std::sqrt(m2 / (n - 1.0) / n);
        CHECK(std::abs(mean2 - 3.0) < 4.0 * se + 1e-12);

        // Atom records zero out the flow density.
        const double u2[2] = {0.1, 0.5};
        const OneSampleResult res = one_sample_estimate(setup, 0.9, u2, ctx, one, &chalf);
        CHECK(res.record.atom);
        CHECK(res.record.analytic_pdf == 0.4);
        CHECK(res.record.proposal_pdf == doctest::Approx(0.5 * 0.4));
    }

    TEST_CASE("mixture log-density derivatives match finite differences") {
        const auto logistic = [](double s) { return 1.0 / (1.0 + std::exp(-s)); };
        for (double q : {0.0, 0.3, 2.0}) {
            for (double p : {0.1, 1.5}) {
                for (double s : {-1.2, 0.0, 0.7}) {
                    const double c = logistic(s);
                    const double qp = c * q + (1.0 - c) * p;
                    // d log q' / d s
                    const double analytic_s = (q - p) * c * (1.0 - c) / qp;
                    const double h = 1e-6;
                    const auto at = [&](double sv) {
                        const double cv = logistic(sv);
                        return std::log(cv * q + (1.0 - cv) * p);
                    };
                    const double fd_s = (at(s + h) - at(s - h)) / (2.0 * h);
                    CHECK(analytic_s == doctest::Approx(fd_s).epsilon(1e-7));
                    // d log q' / d log q (continuous records only)
                    if (q > 0.0) {
                        const double t = std::log(q);
                        const auto atq = [&](double tv) {
                            return std::log(c * std::exp(tv) + (1.0 - c) * p);
                        };
                        const double fd_t = (atq(t + h) - atq(t - h)) / (2.0 * h);
                        CHECK(c * q / qp == doctest::Approx(fd_t).epsilon(1e-7));
                    }
                }
            }
        }
    }

    TEST_CASE("blended training step matches frozen-weight finite differences") {
        const LobeTechnique tech;
        MisSetup setup = build_mis_setup(mis_flow_config(), small_selection(), &tech, 31);
        // Perturb every final layer so densities are nonuniform and the
        // selection output varies with its input.
        Rng prng(77, kStreamInit);
        for (CouplingLayer& layer : setup.flow.layers)
            for (double& w : layer.net.w.back().a) w += 0.3 * (prng.uniform() - 0.5);
        for (double& w : setup.selection.w.back().a) w += 0.5 * (prng.uniform() - 0.5);
        for (double& b : setup.selection.b.back()) b += 0.2;

        GuidingContext ctx_a, ctx_b;
        ctx_a.lobe_u = 0.3;
        ctx_a.lobe_v = 0.7;
        ctx_a.sigma = 0.1;
        ctx_b.lobe_u = 0.8;
        ctx_b.lobe_v = 0.2;
        ctx_b.sigma = 0.05;
        ctx_b.scene_id = 1.0;
        const EnvMixture env = EnvMixture::standard();

        ReplayBuffer buffer(64);
        Rng fill(5, kStreamSampler);
        for (int i = 0; i < 48; ++i) {
            const GuidingContext& ctx = i % 2 ? ctx_b : ctx_a;
            const double u_sel = fill.uniform();
            const double u2[2] = {fill.uniform(), fill.uniform()};
            buffer.push(one_sample_estimate(
                            setup, u_sel, u2, ctx,
                            [&](const double* xp, const GuidingContext&) { return env.eval(xp); })
                            .record);
        }
        const AtomPairTechnique atoms;
        for (int i = 0; i < 16; ++i) {
            const double u2[2] = {fill.uniform(), fill.uniform()};
            const auto d = atoms.sample(u2, ctx_a);
            TrainRecord rec;
            rec.x = {d.x[0], d.x[1]};
            rec.cond = ctx_a.features();
            rec.f = 1.0;
            rec.analytic_pdf = d.density;
            rec.proposal_pdf = 0.5 * d.density;
            rec.atom = true;
            buffer.push(rec);
        }

        const double tau = 0.3;
        const double beta = blend_beta(tau);
        MisTrainConfig cfg;
        cfg.loss = Loss::KL;
        cfg.batch = 32;
        cfg.clip_norm = 0.0;

        // Pre-draw the batch the step will sample.
        Rng trainer(41, kStreamTrainer);
        Rng trainer_clone = trainer;
        const std::vector<TrainRecord> batch =
            buffer.sample_batch(trainer_clone, static_cast<std::size_t>(cfg.batch));
        const std::size_t n = batch.size();

        Matrix x(n, 2), cond(n, 4);
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(batch[i].x.begin(), batch[i].x.end(), x.row(i));
            std::copy(batch[i].cond.begin(), batch[i].cond.end(), cond.row(i));
        }

        // Frozen per-record weights at the base point.
        const auto logistic = [](double s) { return 1.0 / (1.0 + std::exp(-s)); };
        std::vector<double> w_q(n, 0.0), w_qp(n, 0.0);
        {
            std::vector<double> logq;
            flow_log_pdf(setup.flow, x, cond, logq);
            Matrix enc, sel;
            encode_conditioning(setup.flow, cond, enc);
            mlp_forward(setup.selection, enc, sel);
            for (std::size_t i = 0; i < n; ++i) {
                if (batch[i].f == 0.0) continue;
                const double c = logistic(sel.at(i, 0));
                const double q = batch[i].atom ? 0.0 : std::exp(logq[i]);
                const double qp = effective_pdf(q, batch[i].analytic_pdf, c);
                w_qp[i] = loss_weight(cfg.loss, batch[i].f, batch[i].proposal_pdf, qp);
                if (!batch[i].atom)
                    w_q[i] = loss_weight(cfg.loss, batch[i].f, batch[i].proposal_pdf, q);
            }
        }

        // The surrogate whose gradient the step must follow: frozen weights,
        // live densities.
        const auto surrogate = [&]() {
            std::vector<double> logq;
            flow_log_pdf(setup.flow, x, cond, logq);
            Matrix enc, sel;
            encode_conditioning(setup.flow, cond, enc);
            mlp_forward(setup.selection, enc, sel);
            double loss = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (batch[i].f == 0.0) continue;
                const double c = logistic(sel.at(i, 0));
                const double q = batch[i].atom ? 0.0 : std::exp(logq[i]);
                const double qp = effective_pdf(q, batch[i].analytic_pdf, c);
                if (!batch[i].atom) loss += beta * -w_q[i] * logq[i];
                loss += (1.0 - beta) * -w_qp[i] * std::log(qp);
            }
            return loss / static_cast<double>(n);
        };

        // Analytic gradient assembled from the published per-record pieces.
        FlowGrad fgrad;
        fgrad.init_like(setup.flow);
        MlpGrad sgrad;
        sgrad.init_like(setup.selection);
        {
            FlowCache cache;
            std::vector<double> logq;
            flow_log_pdf(setup.flow, x, cond, logq, &cache);
            Matrix enc, sel;
            MlpCache sel_cache;
            encode_conditioning(setup.flow, cond, enc);
            mlp_forward(setup.selection, enc, sel, &sel_cache);
            std::vector<double> coeff(n, 0.0);
            Matrix g_sel(n, 1);
            g_sel.zero();
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (batch[i].f == 0.0) continue;
                const double c = logistic(sel.at(i, 0));
                const double q = batch[i].atom ? 0.0 : std::exp(logq[i]);
                const double qp = effective_pdf(q, batch[i].analytic_pdf, c);
                coeff[i] = -(beta * w_q[i] + (1.0 - beta) * w_qp[i] * c * q / qp) * inv_n;
                g_sel.at(i, 0) = -(1.0 - beta) * w_qp[i] * (q - batch[i].analytic_pdf) * c *
                                 (1.0 - c) / qp * inv_n;
            }
            flow_backward(setup.flow, cache, coeff, fgrad);
            mlp_backward(setup.selection, sel_cache, g_sel, sgrad);
        }

        const double h = 1e-5;
        int checked = 0;
        const auto probe = [&](double& param, double analytic) {
            const double save = param;
            param = save + h;
            const double lp = surrogate();
            param = save - h;
            const double lm = surrogate();
            param = save;
            const double fd = (lp - lm) / (2.0 * h);
            if (std::abs(fd) < 1e-8) return;
            CHECK(analytic == doctest::Approx(fd).epsilon(2e-4));
            ++checked;
        };
        for (std::size_t l = 0; l < setup.flow.layers.size(); ++l) {
            Mlp& net = setup.flow.layers[l].net;
            for (std::size_t m = 0; m < net.w.size(); ++m)
                for (std::size_t k = 0; k < net.w[m].a.size(); k += 13)
                    probe(net.w[m].a[k], fgrad.layers[l].w[m].a[k]);
        }
        for (std::size_t m = 0; m < setup.selection.w.size(); ++m) {
            for (std::size_t k = 0; k < setup.selection.w[m].a.size(); k += 7)
                probe(setup.selection.w[m].a[k], sgrad.w[m].a[k]);
            for (std::size_t k = 0; k < setup.selection.b[m].size(); k += 3)
                probe(setup.selection.b[m][k], sgrad.b[m][k]);
        }
        CHECK(checked >= 25);

        // The step itself must be exactly Adam on that gradient.
        MisSetup manual = setup;
        {
            FlowOptimizer fopt;
            fopt.init_like(manual.flow);
            fopt.adam = cfg.adam;
            AdamState sopt;
            sopt.init_like(manual.selection);
            flow_adam_step(manual.flow, fgrad, fopt);
            adam_step(manual.selection, sgrad, sopt, cfg.adam);
        }
        MisOptimizer opt;
        opt.init_like(setup);
        const StepStats st = mis_train_step(setup, opt, buffer, trainer, tau, cfg);
        REQUIRE_FALSE(st.rejected);
        CHECK_FALSE(st.clipped);
        CHECK(st.grad_norm ==
              doctest::Approx(std::sqrt(fgrad.sq_norm() + grad_sq_norm(sgrad))).epsilon(1e-12));
        for (std::size_t l = 0; l < setup.flow.layers.size(); ++l)
            for (std::size_t m = 0; m < setup.flow.layers[l].net.w.size(); ++m)
                CHECK(setup.flow.layers[l].net.w[m].a == manual.flow.layers[l].net.w[m].a);
        for (std::size_t m = 0; m < setup.selection.w.size(); ++m) {
            CHECK(setup.selection.w[m].a == manual.selection.w[m].a);
            CHECK(setup.selection.b[m] == manual.selection.b[m]);
        }
    }

    TEST_CASE("atom-only data drives selection toward the analytic technique") {
        const AtomPairTechnique tech;
        MisSetup setup = build_mis_setup(mis_flow_config(), small_selection(), &tech, 17);
        GuidingContext ctx;
        ReplayBuffer buffer(64);
        Rng fill(3, kStreamSampler);
        for (int i = 0; i < 64; ++i) {
            const double u2[2] = {fill.uniform(), fill.uniform()};
            const double chalf = 0.5;
            buffer.push(one_sample_estimate(setup, 0.9, u2, ctx,
                                            [](const double*, const GuidingContext&) { return 1.0; },
                                            &chalf)
                            .record);
        }
        const std::vector<std::vector<double>> before = [&] {
            std::vector<std::vector<double>> ws;
            for (const CouplingLayer& layer : setup.flow.layers)
                for (const Matrix& w : layer.net.w) ws.push_back(w.a);
            return ws;
        }();
        MisOptimizer opt;
        opt.init_like(setup);
        MisTrainConfig cfg;
        cfg.batch = 32;
        cfg.adam.lr = 5e-3;
        Rng trainer(19, kStreamTrainer);
        for (int s = 0; s < 50; ++s) {
            const StepStats st = mis_train_step(setup, opt, buffer, trainer, 0.5, cfg);
            REQUIRE_FALSE(st.rejected);
        }
        CHECK(selection_prob(setup, ctx) < 0.4);
        // Atom records carry no flow-density gradient, so the coupling nets
        // never move.
        std::size_t idx = 0;
        for (const CouplingLayer& layer : setup.flow.layers)
            for (const Matrix& w : layer.net.w) CHECK(w.a == before[idx++]);
    }

    TEST_CASE("scenario parsing validates context and environment") {
        const char* text =
            "[scenario]\n"
            "name = desk\n"
            "budget = 4095\n"
            "eval_samples = 128\n"
            "seed = 7\n"
            "[context]\n"
            "lobe_u = 0.3\n"
            "lobe_v = 0.7\n"
            "sigma = 0.1\n"
            "[context]\n"
            "lobe_u = 0.8\n"
            "lobe_v = 0.2\n"
            "sigma = 0.05\n"
            "scene_id = 1\n"
            "[environment]\n"
            "floor = 0.1\n";
        const GuidingScenario sc = parse_scenario(ConfigFile::parse_string(text));
        CHECK(sc.name == "desk");
        CHECK(sc.budget == 4095);
        CHECK(sc.eval_samples == 128);
        CHECK(sc.seed == 7);
        REQUIRE(sc.contexts.size() == 2);
        CHECK(sc.contexts[1].scene_id == 1.0);
        CHECK(sc.env.floor == 0.1);

        CHECK_THROWS_AS(parse_scenario(ConfigFile::parse_string("[context]\nlobe_u = 0.5\n")),
                        ConfigError);
        CHECK_THROWS_AS(
            parse_scenario(ConfigFile::parse_string("[scenario]\nname = x\nbudget = 16\n")),
            ConfigError);
        CHECK_THROWS_AS(parse_scenario(ConfigFile::parse_string(
                            "[scenario]\nname = x\n[context]\nlobe_u = 0.5\nlobe_v = 0.5\n"
                            "sigma = 0.9\n")),
                        ConfigError);
        CHECK_THROWS_AS(parse_scenario(ConfigFile::parse_string(
                            "[scenario]\nname = x\n[context]\nlobe_u = 1.5\nlobe_v = 0.5\n"
                            "sigma = 0.1\n")),
                        ConfigError);
    }

    TEST_CASE("guiding loop runs the schedule and tracks selection") {
        const LobeTechnique tech;
        MisSetup setup = build_mis_setup(mis_flow_config(), small_selection(), &tech, 23);
        MisOptimizer opt;
        opt.init_like(setup);
        ReplayBuffer buffer(1024);

        GuidingScenario sc;
        sc.name = "tiny";
        sc.budget = 255;
        sc.eval_samples = 64;
        GuidingContext ctx;
        ctx.lobe_u = 0.3;
        ctx.lobe_v = 0.7;
        ctx.sigma = 0.1;
        sc.contexts.push_back(ctx);
        sc.env = EnvMixture::standard();

        GuidingLoopConfig cfg;
        cfg.train.batch = 32;
        cfg.chunk = 64;
        Rng sampler(sc.seed, kStreamSampler), trainer(sc.seed, kStreamTrainer);
        Rng selector(sc.seed, kStreamSelection), eval(sc.seed, kStreamEval);
        const GuidingReport report =
            guiding_loop(setup, opt, buffer, sc, cfg, sampler, trainer, selector, eval);
        REQUIRE(report.rows.size() == 8);
        CHECK(report.train_steps == (255 + 31) / 32);
        CHECK(report.rejected_steps == 0);
        CHECK(report.c_final == report.rows.back().c_mean);
        std::int64_t total = 0;
        for (const GuidingRow& row : report.rows) {
            total += row.samples;
            CHECK(row.c_mean > 0.0);
            CHECK(row.c_mean < 1.0);
            CHECK(flowmc::finite(row.var_flow));
            CHECK(flowmc::finite(row.var_analytic));
            CHECK(flowmc::finite(row.var_mis_fixed));
            CHECK(flowmc::finite(row.var_mis_learned));
            CHECK(row.wallclock_ms == 0.0);
        }
        CHECK(total == 255);
        CHECK(buffer.size() == 255);
    }

    TEST_CASE("guiding csv format is stable") {
        GuidingReport report;
        GuidingRow row;
        row.iteration = 1;
        row.samples = 4;
        row.loss = 0.25;
        row.c_mean = 0.5;
        row.var_flow = 2.0;
        row.var_analytic = 1.0;
        row.var_mis_fixed = 0.75;
        row.var_mis_learned = 0.5;
        report.rows.push_back(row);
        const std::string path =
            (std::filesystem::temp_directory_path() / "flowmc_guiding_test.csv").string();
        write_guiding_csv(report, path);
        std::ifstream in(path);
        std::stringstream ss;
        ss << in.rdbuf();
        CHECK(ss.str() ==
              "iteration,samples,loss,c_mean,var_flow,var_analytic,var_mis_fixed,var_mis_learned,"
              "wallclock_ms\n"
              "1,4,0.25,0.5,2,1,0.75,0.5,0\n");
        std::filesystem::remove(path);
    }
}
