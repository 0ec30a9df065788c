#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "flowmc/flow.hpp"
#include "flowmc/rng.hpp"

namespace flowmc {

// One observation of the integrand: where it was probed, under which
// conditioning, the estimated integrand value, and the density the sample
// was actually drawn with. Atom records come from discrete analytic
// techniques; the flow density is treated as zero for them.
struct TrainRecord {
    std::vector<double> x;
    std::vector<double> cond;
    double f = 0.0;
    double proposal_pdf = 1.0;
    // Density of the analytic technique at x (atom records store the atom's
    // discrete probability). Only the mixture-aware trainer reads this.
    double analytic_pdf = 0.0;
    bool atom = false;
};

// Fixed-capacity FIFO. Pushes overwrite the oldest record once full.
// Push and sample are serialized by an internal mutex so a sampler thread
// and a trainer thread can share the buffer.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity);

    void push(TrainRecord rec);
    // push() without the per-record allocations: writes the fields straight
    // into the ring slot, reusing its vectors' capacity.
    void push_fill(const double* x, std::int64_t dim, const double* cond, std::int64_t cond_dim,
                   double f, double proposal_pdf, double analytic_pdf = 0.0, bool atom = false);
    std::size_t size() const;
    std::size_t capacity() const { return capacity_; }
    // n records drawn uniformly with replacement.
    std::vector<TrainRecord> sample_batch(Rng& rng, std::size_t n) const;
    // sample_batch into a reused vector; draws the identical record sequence.
    void sample_into(Rng& rng, std::size_t n, std::vector<TrainRecord>& out) const;

private:
    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<TrainRecord> ring_;
    mutable std::mutex mu_;
};

enum class Loss { KL, Chi2 };

const char* loss_name(Loss l);
Loss loss_from_name(const std::string& name);

// Per-record gradient weight. With samples from a proposal density r and
// current flow density q: KL uses f / r, the chi-square objective uses
// f^2 / (r * q). The weight is a detached scalar; no gradient flows
// through it.
double loss_weight(Loss loss, double f, double r, double q);

struct TrainConfig {
    Loss loss = Loss::KL;
    int batch = 4096;
    AdamConfig adam;
    // Gradient clipping by global norm: negative means the loss default
    // (50 for chi-square, none for KL), 0 disables, positive is explicit.
    double clip_norm = -1.0;
    bool f32 = false;  // emulate single-precision parameters/activations

    double effective_clip() const {
        if (clip_norm >= 0.0) return clip_norm;
        return loss == Loss::Chi2 ? 50.0 : 0.0;
    }
};

struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;
    bool clipped = false;
    bool rejected = false;
};

// One optimization step on a uniform minibatch from the buffer. The
// surrogate loss is mean(-w * log q); its gradient matches the chosen
// divergence. Non-finite losses or gradients reject the step without
// touching parameters.
StepStats train_step(NormalizingFlow& flow, FlowOptimizer& opt, const ReplayBuffer& buffer,
                     Rng& trainer_rng, const TrainConfig& cfg);

// Iteration sample counts 2^0 .. 2^(M-1) with M = floor(log2(N+1)); any
// remainder is folded into the last iteration.
std::vector<std::int64_t> power_of_two_schedule(std::int64_t n);

struct IterationRow {
    int iteration = 0;
    std::int64_t samples = 0;
    double loss = 0.0;        // mean training loss during the iteration
    double estimate = 0.0;    // mean of f / r over the iteration's draws
    double variance = 0.0;    // variance of that mean
    double weight_p9999 = 0.0;
    double wallclock_ms = 0.0;
};

struct ExperimentReport {
    std::vector<IterationRow> rows;
    bool aborted = false;
    std::string error;
    std::int64_t train_steps = 0;
    std::int64_t rejected_steps = 0;
    long long clamped = 0;
    double combined_estimate = 0.0;

    double rejected_fraction() const {
        return train_steps > 0 ? static_cast<double>(rejected_steps) / train_steps : 0.0;
    }
};

enum class ProposalKind { Uniform, Flow };

struct LoopConfig {
    std::int64_t budget = 0;           // total samples drawn
    std::int64_t train_steps = 0;      // 0: one step per batch of new samples
    ProposalKind proposal = ProposalKind::Flow;
    TrainConfig train;
    int chunk = 4096;          // draws between interleaved training bursts
    bool train_enabled = true;
    bool record_timings = false;  // off by default so reruns are byte-identical
};

using TargetFn = std::function<double(const double*)>;

// Alternates sampling and training on the power-of-two schedule. Samples
// are drawn in chunks, pushed into the buffer, and training steps run so
// that progress stays proportional to the consumed budget; drawn samples
// are immediately available to training and vice versa. A throwing target
// aborts the loop and returns the partial report.
ExperimentReport online_loop(NormalizingFlow& flow, FlowOptimizer& opt, ReplayBuffer& buffer,
                             const TargetFn& target, const LoopConfig& cfg, Rng& sampler_rng,
                             Rng& trainer_rng,
                             const std::function<void(int, const NormalizingFlow&)>& on_iteration =
                                 nullptr);

// Inverse-variance weighted combination. Weights are 1 / variance capped
// at 1e12; iterations with unusable variance (infinite or NaN) get weight
// zero. If every weight is zero the plain mean is returned.
double combine_iterations(const std::vector<std::pair<double, double>>& estimates);

void write_report_csv(const ExperimentReport& report, const std::string& path);

}  // namespace flowmc
