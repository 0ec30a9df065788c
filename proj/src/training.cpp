#include "flowmc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "flowmc/common.hpp"

namespace flowmc {

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
    ring_.reserve(capacity);
}

void ReplayBuffer::push(TrainRecord rec) {
    std::lock_guard<std::mutex> lock(mu_);
    if (ring_.size() < capacity_) {
        ring_.push_back(std::move(rec));
    } else {
        ring_[next_] = std::move(rec);
    }
    next_ = (next_ + 1) % capacity_;
}

std::size_t ReplayBuffer::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return ring_.size();
}

void ReplayBuffer::push_fill(const double* x, std::int64_t dim, const double* cond,
                             std::int64_t cond_dim, double f, double proposal_pdf,
                             double analytic_pdf, bool atom) {
    std::lock_guard<std::mutex> lock(mu_);
    if (ring_.size() < capacity_) ring_.emplace_back();
    TrainRecord& slot = ring_[next_];
    slot.x.assign(x, x + dim);
    if (cond_dim > 0)
        slot.cond.assign(cond, cond + cond_dim);
    else
        slot.cond.clear();
    slot.f = f;
    slot.proposal_pdf = proposal_pdf;
    slot.analytic_pdf = analytic_pdf;
    slot.atom = atom;
    next_ = (next_ + 1) % capacity_;
}

std::vector<TrainRecord> ReplayBuffer::sample_batch(Rng& rng, std::size_t n) const {
    std::vector<TrainRecord> out;
    sample_into(rng, n, out);
    return out;
}

void ReplayBuffer::sample_into(Rng& rng, std::size_t n, std::vector<TrainRecord>& out) const {
    std::lock_guard<std::mutex> lock(mu_);
    if (ring_.empty()) throw Error("sample_batch: replay buffer is empty");
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const TrainRecord& src =
            ring_[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(ring_.size())))];
        TrainRecord& dst = out[i];
        dst.x.assign(src.x.begin(), src.x.end());
        dst.cond.assign(src.cond.begin(), src.cond.end());
        dst.f = src.f;
        dst.proposal_pdf = src.proposal_pdf;
        dst.analytic_pdf = src.analytic_pdf;
        dst.atom = src.atom;
    }
}

const char* loss_name(Loss l) { return l == Loss::KL ? "kl" : "chi2"; }

Loss loss_from_name(const std::string& name) {
    if (name == "kl") return Loss::KL;
    if (name == "chi2") return Loss::Chi2;
    throw ConfigError(strfmt("unknown loss '%s' (expected kl or chi2)", name.c_str()));
}

double loss_weight(Loss loss, double f, double r, double q) {
    if (!(r > 0.0)) throw ParamError("loss_weight: proposal density must be positive");
    if (f == 0.0) return 0.0;
    if (loss == Loss::KL) return f / r;
    return f * f / (r * q);
}

StepStats train_step(NormalizingFlow& flow, FlowOptimizer& opt, const ReplayBuffer& buffer,
                     Rng& trainer_rng, const TrainConfig& cfg) {
    if (cfg.batch <= 0) throw ConfigError("train batch size must be positive");
    // Step-sized scratch is recycled per thread; at a few thousand samples a
    // step the allocations would otherwise dominate the optimizer math.
    thread_local std::vector<TrainRecord> batch;
    thread_local Matrix x, cond;
    thread_local FlowCache cache;
    thread_local std::vector<double> logq, coeff;

    buffer.sample_into(trainer_rng, static_cast<std::size_t>(cfg.batch), batch);
    const std::size_t n = batch.size();
    const std::int64_t dim = flow.cfg.dim;
    const std::int64_t cond_dim = flow.cfg.conditioning.count();

    if (cfg.f32) {
        for (auto& layer : flow.layers) {
            layer.net.emulate_f32 = true;
            quantize_f32(layer.net);
        }
    }

    x.resize(static_cast<std::int64_t>(n), dim);
    cond.resize(static_cast<std::int64_t>(n), cond_dim);
    for (std::size_t i = 0; i < n; ++i) {
        const TrainRecord& rec = batch[i];
        if (static_cast<std::int64_t>(rec.x.size()) != dim)
            throw ShapeError(strfmt("train record has %zu coordinates, flow expects %lld",
                                    rec.x.size(), static_cast<long long>(dim)));
        if (static_cast<std::int64_t>(rec.cond.size()) != cond_dim)
            throw ShapeError(strfmt("train record has %zu conditioning values, flow expects %lld",
                                    rec.cond.size(), static_cast<long long>(cond_dim)));
        std::copy(rec.x.begin(), rec.x.end(), x.row(static_cast<std::int64_t>(i)));
        std::copy(rec.cond.begin(), rec.cond.end(), cond.row(static_cast<std::int64_t>(i)));
    }

    flow_log_pdf(flow, x, cond, logq, &cache);

    StepStats stats;
    coeff.assign(n, 0.0);
    double loss_sum = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const TrainRecord& rec = batch[i];
        if (rec.atom) continue;  // no flow density is defined at discrete atoms
        const double q = std::exp(logq[i]);
        const double w = loss_weight(cfg.loss, rec.f, rec.proposal_pdf, q);
        if (w == 0.0) continue;
        loss_sum += -w * logq[i];
        coeff[i] = -w * inv_n;
    }
    stats.loss = loss_sum * inv_n;
    if (!finite(stats.loss)) {
        stats.rejected = true;
        return stats;
    }

    thread_local FlowGrad grad;
    grad.init_like(flow);
    flow_backward(flow, cache, coeff, grad);

    const double sq = grad.sq_norm();
    if (!finite(sq)) {
        stats.rejected = true;
        return stats;
    }
    stats.grad_norm = std::sqrt(sq);
    const double clip = cfg.effective_clip();
    if (clip > 0.0 && stats.grad_norm > clip) {
        grad.scale(clip / stats.grad_norm);
        stats.grad_norm = clip;
        stats.clipped = true;
    }

    opt.adam = cfg.adam;
    try {
        flow_adam_step(flow, grad, opt);
    } catch (const NonFiniteGradientError&) {
        stats.rejected = true;
        return stats;
    }
    if (cfg.f32) {
        for (auto& layer : flow.layers) quantize_f32(layer.net);
    }
    return stats;
}

std::vector<std::int64_t> power_of_two_schedule(std::int64_t n) {
    if (n <= 0) throw ConfigError("sample budget must be positive");
    int m = 0;
    while ((std::int64_t{1} << (m + 1)) - 1 <= n) ++m;
    std::vector<std::int64_t> counts;
    counts.reserve(static_cast<std::size_t>(m));
    std::int64_t used = 0;
    for (int i = 0; i < m; ++i) {
        counts.push_back(std::int64_t{1} << i);
        used += counts.back();
    }
    counts.back() += n - used;  // leftover budget extends the largest iteration
    return counts;
}

double combine_iterations(const std::vector<std::pair<double, double>>& estimates) {
    if (estimates.empty()) return 0.0;
    constexpr double kMaxWeight = 1e12;
    double wsum = 0.0, vsum = 0.0;
    for (const auto& [value, variance] : estimates) {
        if (!finite(value) || !finite(variance) || variance < 0.0) continue;
        const double w = std::min(variance > 0.0 ? 1.0 / variance : kMaxWeight, kMaxWeight);
        wsum += w;
        vsum += w * value;
    }
    if (wsum > 0.0) return vsum / wsum;
    double mean = 0.0;
    for (const auto& [value, variance] : estimates) mean += value;
    return mean / static_cast<double>(estimates.size());
}

namespace {

double percentile_9999(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double rank = std::ceil(0.9999 * static_cast<double>(values.size())) - 1.0;
    const std::size_t idx = static_cast<std::size_t>(
        std::clamp(rank, 0.0, static_cast<double>(values.size() - 1)));
    return values[idx];
}

}  // namespace

ExperimentReport online_loop(NormalizingFlow& flow, FlowOptimizer& opt, ReplayBuffer& buffer,
                             const TargetFn& target, const LoopConfig& cfg, Rng& sampler_rng,
                             Rng& trainer_rng,
                             const std::function<void(int, const NormalizingFlow&)>& on_iteration) {
    if (cfg.chunk <= 0) throw ConfigError("sampling chunk size must be positive");
    const std::vector<std::int64_t> schedule = power_of_two_schedule(cfg.budget);
    const std::int64_t total_steps =
        !cfg.train_enabled ? 0
        : cfg.train_steps > 0
            ? cfg.train_steps
            : (cfg.budget + cfg.train.batch - 1) / cfg.train.batch;

    ExperimentReport report;
    const std::int64_t dim = flow.cfg.dim;
    Matrix u, x;
    std::vector<double> logq;
    Matrix cond_empty(0, 0);
    WarpStats warp_stats;

    std::int64_t samples_done = 0;
    std::int64_t steps_done = 0;
    for (std::size_t iter = 0; iter < schedule.size(); ++iter) {
        const auto t0 = std::chrono::steady_clock::now();
        IterationRow row;
        row.iteration = static_cast<int>(iter + 1);
        row.samples = schedule[iter];
        std::vector<double> ratios;
        ratios.reserve(static_cast<std::size_t>(schedule[iter]));
        double loss_sum = 0.0;
        std::int64_t loss_count = 0;

        std::int64_t remaining = schedule[iter];
        while (remaining > 0) {
            const std::int64_t n = std::min<std::int64_t>(remaining, cfg.chunk);
            u.resize(static_cast<std::size_t>(n), static_cast<std::size_t>(dim));
            for (double& v : u.a) v = sampler_rng.uniform();
            const double* coords = u.a.data();
            if (cfg.proposal == ProposalKind::Flow) {
                cond_empty.resize(static_cast<std::size_t>(n), 0);
                flow_sample(flow, u, cond_empty, x, &logq, &warp_stats);
                coords = x.a.data();
            }
            for (std::int64_t i = 0; i < n; ++i) {
                const double* xi = coords + i * dim;
                double f;
                try {
                    f = target(xi);
                } catch (const std::exception& e) {
                    report.aborted = true;
                    report.error = e.what();
                    report.clamped = warp_stats.clamped;
                    report.combined_estimate = combine_iterations([&] {
                        std::vector<std::pair<double, double>> pairs;
                        for (const auto& r : report.rows) pairs.emplace_back(r.estimate, r.variance);
                        return pairs;
                    }());
                    return report;
                }
                const double r = cfg.proposal == ProposalKind::Flow ? std::exp(logq[static_cast<std::size_t>(i)])
                                                                    : 1.0;
                ratios.push_back(f / r);
                buffer.push_fill(xi, dim, nullptr, 0, f, r);
            }
            samples_done += n;
            remaining -= n;

            if (cfg.train_enabled) {
                // Keep optimization progress proportional to consumed budget so
                // training interleaves with sampling instead of trailing it.
                const std::int64_t step_target =
                    static_cast<std::int64_t>((static_cast<long double>(total_steps) * samples_done) /
                                              cfg.budget);
                while (steps_done < step_target) {
                    StepStats s = train_step(flow, opt, buffer, trainer_rng, cfg.train);
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
        }

        row.loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
        const std::size_t n = ratios.size();
        double mean = 0.0;
        for (double v : ratios) mean += v;
        mean /= static_cast<double>(n);
        row.estimate = mean;
        if (n > 1) {
            double ss = 0.0;
            for (double v : ratios) ss += (v - mean) * (v - mean);
            row.variance = ss / (static_cast<double>(n - 1) * static_cast<double>(n));
        } else {
            row.variance = INFINITY;  // a single draw carries no variance information
        }
        row.weight_p9999 = percentile_9999(ratios);
        if (cfg.record_timings) {
            row.wallclock_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
        }
        report.rows.push_back(row);
        if (on_iteration) on_iteration(row.iteration, flow);
    }

    report.clamped = warp_stats.clamped;
    std::vector<std::pair<double, double>> pairs;
    pairs.reserve(report.rows.size());
    for (const auto& r : report.rows) pairs.emplace_back(r.estimate, r.variance);
    report.combined_estimate = combine_iterations(pairs);
    return report;
}

void write_report_csv(const ExperimentReport& report, const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw Error(strfmt("cannot open '%s' for writing", path.c_str()));
    std::fputs("iteration,samples,loss,estimate,variance,weight_p9999,wallclock_ms\n", fp);
    for (const auto& r : report.rows) {
        std::fprintf(fp, "%d,%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration,
                     static_cast<long long>(r.samples), r.loss, r.estimate, r.variance,
                     r.weight_p9999, r.wallclock_ms);
    }
    if (std::fclose(fp) != 0) throw Error(strfmt("error closing '%s'", path.c_str()));
}

}  // namespace flowmc
