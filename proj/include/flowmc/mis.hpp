#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flowmc/config.hpp"
#include "flowmc/flow.hpp"
#include "flowmc/rng.hpp"
#include "flowmc/training.hpp"

namespace flowmc {

// 1D Gaussian restricted to [0, 1], exactly normalized, with inverse-CDF
// sampling.
struct TruncGauss1 {
    double mu = 0.5;
    double sigma = 0.1;
    double cdf_lo = 0.0, cdf_hi = 1.0;  // normal CDF at the domain edges

    TruncGauss1() = default;
    TruncGauss1(double mu_, double sigma_);

    double pdf(double x) const;
    double sample(double u) const;
};

// Separable product of two truncated Gaussians on the unit square.
struct ProductLobe {
    TruncGauss1 gu, gv;

    ProductLobe() = default;
    ProductLobe(double mu_u, double mu_v, double sigma) : gu(mu_u, sigma), gv(mu_v, sigma) {}

    double pdf(const double* x) const { return gu.pdf(x[0]) * gv.pdf(x[1]); }
    void sample(const double* u2, double* x) const {
        x[0] = gu.sample(u2[0]);
        x[1] = gv.sample(u2[1]);
    }
};

// Smooth fixed "radiance" field on the square: Gaussian blobs over a
// uniform floor. The first coordinate is cyclic, so a blob near the seam
// spills over to the other side.
struct EnvMixture {
    struct Blob {
        double amp, u, v, sigma_u, sigma_v;
    };
    std::vector<Blob> blobs;
    double floor = 0.05;

    static EnvMixture standard();
    // Reads blob parameters from an [environment] section; null or missing
    // keys fall back to the standard field.
    static EnvMixture from_config(const ConfigFile::Section* sec);

    double eval(double u, double v) const;
    double eval(const double* x) const { return eval(x[0], x[1]); }
};

// Per-sample state the guiding benchmark conditions on: the analytic
// lobe's center and sharpness plus a scene tag. Fed to the coupling nets
// and the selection net after range normalization and one-blob encoding.
struct GuidingContext {
    double lobe_u = 0.5;
    double lobe_v = 0.5;
    double sigma = 0.1;
    double scene_id = 0.0;

    std::vector<double> features() const { return {lobe_u, lobe_v, sigma, scene_id}; }
};

// Feature ranges for GuidingContext conditioning.
ConditioningSpec guiding_conditioning();

// The analytic technique the flow competes against (2D). `density` is a
// pdf for continuous draws and a probability mass when `atom` is set.
class AnalyticTechnique {
public:
    struct Draw {
        std::array<double, 2> x{};
        double density = 0.0;
        bool atom = false;
    };

    virtual ~AnalyticTechnique() = default;
    virtual Draw sample(const double* u2, const GuidingContext& ctx) const = 0;
    // Continuous density at x (the atom component, if any, excluded).
    virtual double pdf(const double* x, const GuidingContext& ctx) const = 0;
};

// Product lobe positioned by the context.
class LobeTechnique : public AnalyticTechnique {
public:
    Draw sample(const double* u2, const GuidingContext& ctx) const override;
    double pdf(const double* x, const GuidingContext& ctx) const override;
};

struct MisSetup {
    NormalizingFlow flow;
    Mlp selection;  // scalar logit; logistic(output) is the flow-pick probability
    const AnalyticTechnique* technique = nullptr;  // non-owning
};

// Conditional 2D flow plus a zero-headed selection net (fresh selection
// probability is exactly 0.5).
MisSetup build_mis_setup(const FlowConfig& flow_cfg, const NetShape& selection_shape,
                         const AnalyticTechnique* technique, std::uint64_t seed);

// Balance-heuristic mixture density c * q + (1 - c) * analytic.
double effective_pdf(double q, double analytic, double c);

// Weight of the raw-flow divergence term as training progresses; tau is
// the exhausted fraction of the budget. Starts at 1/2, decays to 1/486.
double blend_beta(double tau);

double selection_prob(const MisSetup& setup, const GuidingContext& ctx);

struct OneSampleResult {
    double value = 0.0;
    TrainRecord record;
};

// One draw of the one-sample mixture estimator: picks the flow with
// probability c (or c_override if given), the analytic technique
// otherwise, and weights by the effective pdf. Atom draws zero out the
// flow density and disable the flow loss for that record.
OneSampleResult one_sample_estimate(const MisSetup& setup, double u_select, const double* u2,
                                    const GuidingContext& ctx,
                                    const std::function<double(const double*, const GuidingContext&)>& f,
                                    const double* c_override = nullptr);

struct MisTrainConfig {
    Loss loss = Loss::KL;
    int batch = 4096;
    AdamConfig adam;
    double clip_norm = -1.0;  // as in TrainConfig: negative = loss default

    double effective_clip() const {
        if (clip_norm >= 0.0) return clip_norm;
        return loss == Loss::Chi2 ? 50.0 : 0.0;
    }
};

struct MisOptimizer {
    FlowOptimizer flow;
    AdamState selection;

    void init_like(const MisSetup& setup);
};

// One step on the blended objective beta * D(p||q) + (1 - beta) * D(p||q').
// Gradients reach the coupling nets through both terms and the selection
// net through q'; atoms train only the selection. Rejection leaves every
// parameter untouched.
StepStats mis_train_step(MisSetup& setup, MisOptimizer& opt, const ReplayBuffer& buffer,
                         Rng& trainer_rng, double tau, const MisTrainConfig& cfg);

struct GuidingScenario {
    std::string name;
    std::vector<GuidingContext> contexts;
    EnvMixture env;
    std::int64_t budget = 65535;
    int eval_samples = 4096;
    std::uint64_t seed = 1;
};

GuidingScenario parse_scenario(const ConfigFile& cfg);
GuidingScenario load_scenario(const std::string& path);

struct GuidingRow {
    int iteration = 0;
    std::int64_t samples = 0;
    double loss = 0.0;
    double c_mean = 0.0;
    double var_flow = 0.0;
    double var_analytic = 0.0;
    double var_mis_fixed = 0.0;    // c pinned to 0.5
    double var_mis_learned = 0.0;
    double wallclock_ms = 0.0;
};

struct GuidingReport {
    std::vector<GuidingRow> rows;
    std::int64_t train_steps = 0;
    std::int64_t rejected_steps = 0;
    double c_final = 0.0;

    double rejected_fraction() const {
        return train_steps > 0 ? static_cast<double>(rejected_steps) / train_steps : 0.0;
    }
};

struct GuidingLoopConfig {
    MisTrainConfig train;
    std::int64_t train_steps = 0;  // 0: one step per batch of new samples
    int chunk = 4096;
    bool record_timings = false;
};

// Online loop over the scenario: draws one-sample estimates (contexts
// round-robin), trains on the blended loss with tau advancing along the
// budget, and measures per-iteration estimator variances for the four
// strategies {flow only, analytic only, mixture with c = 0.5, mixture with
// learned c} on held-out draws.
GuidingReport guiding_loop(MisSetup& setup, MisOptimizer& opt, ReplayBuffer& buffer,
                           const GuidingScenario& scenario, const GuidingLoopConfig& cfg,
                           Rng& sampler_rng, Rng& trainer_rng, Rng& select_rng, Rng& eval_rng);

void write_guiding_csv(const GuidingReport& report, const std::string& path);

}  // namespace flowmc
