#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowmc/coupling.hpp"
#include "flowmc/matrix.hpp"
#include "flowmc/mlp.hpp"
#include "flowmc/rng.hpp"

namespace flowmc {

enum class Partition { Halves, EvenOdd };

const char* partition_name(Partition p);
Partition partition_from_name(const std::string& name);

struct NetShape {
    // Hidden widths for a plain stack; when empty, a symmetric u-shape with
    // `outermost` width and `levels` nesting levels is built instead.
    std::vector<int> hidden;
    bool ushape = true;
    int outermost = 64;
    int levels = 4;
};

struct ConditioningSpec {
    struct Feature {
        std::string name;
        double lo = 0.0;
        double hi = 1.0;
    };
    std::vector<Feature> features;

    int count() const { return static_cast<int>(features.size()); }
    // Maps a raw feature vector to [0, 1] per the declared ranges, clamped.
    void normalize(const double* raw, double* out) const;
};

struct FlowConfig {
    int dim = 2;
    int layers = 2;
    Transform kind = Transform::Pwq;
    int bins = 32;
    Partition partition = Partition::Halves;
    bool one_blob = true;  // encode net inputs and conditioning features
    int blob_k = 32;
    NetShape net;
    ConditioningSpec conditioning;

    void validate() const;
};

struct NormalizingFlow {
    FlowConfig cfg;
    std::vector<CouplingLayer> layers;

    std::int64_t param_count() const;
    int cond_enc_width() const;
};

// Alternating partition masks for layer `index`; returns the dimensions
// warped by that layer (the rest pass through).
std::vector<int> partition_warped(Partition p, int dim, int index);

// Network spec for the declared shape: an explicit hidden stack, or the
// symmetric u-shape when `hidden` is empty.
MlpSpec net_spec_for(const NetShape& shape, int input, int output);

NormalizingFlow build_flow(const FlowConfig& cfg, std::uint64_t seed);

struct FlowCache {
    Matrix cond_enc;
    std::vector<Matrix> coords;  // coords[l] = input of layer l; coords.back() = latent
    std::vector<LayerCache> layers;
};

struct FlowGrad {
    std::vector<MlpGrad> layers;

    void init_like(const NormalizingFlow& flow);
    void zero();
    void scale(double s);
    double sq_norm() const;
};

// Encodes raw conditioning rows (batch x feature count) into the network
// feature block. Output is empty when the flow is unconditioned.
void encode_conditioning(const NormalizingFlow& flow, const Matrix& cond_raw, Matrix& cond_enc);

// log q(x | cond) per row. X is batch x dim in [0, 1)^dim; cond_raw is
// batch x features (ignored when unconditioned). Pass a cache to enable
// flow_backward; `latent` receives the forward-mapped coordinates if given.
void flow_log_pdf(const NormalizingFlow& flow, const Matrix& X, const Matrix& cond_raw,
                  std::vector<double>& logq, FlowCache* cache = nullptr, Matrix* latent = nullptr,
                  WarpStats* stats = nullptr);

// Accumulates sum_n coeff[n] * d log q(x_n) / d theta into acc.
void flow_backward(const NormalizingFlow& flow, const FlowCache& cache,
                   const std::vector<double>& coeff, FlowGrad& acc);

// Maps latent rows U in [0, 1)^dim to samples X; logq receives log q(X).
void flow_sample(const NormalizingFlow& flow, const Matrix& U, const Matrix& cond_raw, Matrix& X,
                 std::vector<double>* logq = nullptr, WarpStats* stats = nullptr);

// Single-point conveniences.
double flow_pdf1(const NormalizingFlow& flow, const double* x, const double* cond = nullptr);
void flow_sample1(const NormalizingFlow& flow, Rng& rng, const double* cond, double* x,
                  double* pdf = nullptr);

// Adam over every coupling network.
struct FlowOptimizer {
    std::vector<AdamState> layers;
    AdamConfig adam;

    void init_like(const NormalizingFlow& flow);
};

void flow_adam_step(NormalizingFlow& flow, const FlowGrad& grad, FlowOptimizer& opt);

}  // namespace flowmc
