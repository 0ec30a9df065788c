#pragma once

#include <cstdint>
#include <vector>

#include "flowmc/matrix.hpp"
#include "flowmc/rng.hpp"

namespace flowmc {

// Concatenation link: the output of layer `src` is appended to the input of
// layer `dst`. Layer 0 denotes the network input. Links must go forward.
struct SkipLink {
    int src = 0;
    int dst = 0;
};

struct MlpSpec {
    // widths[0] is the input width, widths.back() the output width; each
    // entry in between is the output width of one fully connected layer.
    std::vector<int> widths;
    std::vector<SkipLink> skips;
    // Rectifier on every layer except the last; the output stays linear.
    bool relu_output = false;

    int layer_count() const { return static_cast<int>(widths.size()) - 1; }
    // Input width of a layer including concatenated skip sources.
    int fan_in(int layer) const;
    void validate() const;
};

// Symmetric stack: input adapter to `outermost`, then 2*levels layers whose
// widths halve toward the middle and mirror back up, then a linear output
// adapter. Mirrored width levels are joined by concatenation skips; the
// innermost pair is adjacent and needs none.
MlpSpec u_shape_spec(int input, int outermost, int levels, int output);

struct Mlp {
    MlpSpec spec;
    std::vector<Matrix> w;               // w[i]: fan_in(i+1) x widths[i+1]
    std::vector<std::vector<double>> b;  // b[i]: widths[i+1]
    // When set, parameters and activations are rounded to float32 after
    // every update and every layer evaluation.
    bool emulate_f32 = false;

    std::int64_t param_count() const;
};

// Xavier-initialized network: weights ~ N(0, 2 / (fan_in + fan_out)), zero
// biases. The final layer is zeroed entirely so a fresh network outputs 0.
Mlp make_mlp(const MlpSpec& spec, Rng& rng);

struct MlpCache {
    std::vector<Matrix> in;   // concatenated input per layer
    std::vector<Matrix> out;  // post-activation output per layer
};

// Batched evaluation; x is batch x widths[0]. Pass a cache to enable
// mlp_backward on the same batch.
void mlp_forward(const Mlp& net, const Matrix& x, Matrix& y, MlpCache* cache = nullptr);

struct MlpGrad {
    std::vector<Matrix> w;
    std::vector<std::vector<double>> b;

    void init_like(const Mlp& net);
    void zero();
    void scale(double s);
};

// Accumulates parameter gradients of sum_n <y_n, g_out_n> into `acc`.
// If g_in is non-null it receives the gradient with respect to x.
void mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& g_out, MlpGrad& acc,
                  Matrix* g_in = nullptr);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Matrix> m_w, v_w;
    std::vector<std::vector<double>> m_b, v_b;
    std::int64_t t = 0;

    void init_like(const Mlp& net);
};

// One bias-corrected update. Throws NonFiniteGradientError before touching
// any state if the gradient contains NaN or infinity.
void adam_step(Mlp& net, const MlpGrad& grad, AdamState& state, const AdamConfig& cfg);

double grad_sq_norm(const MlpGrad& grad);

// Rounds parameters to float32 in place (used by the 32-bit training mode).
void quantize_f32(Mlp& net);

}  // namespace flowmc
