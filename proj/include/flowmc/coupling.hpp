#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowmc/matrix.hpp"
#include "flowmc/mlp.hpp"

namespace flowmc {

enum class Transform { Additive, Affine, Pwl, Pwq };

const char* transform_name(Transform t);
Transform transform_from_name(const std::string& name);

// Raw network outputs consumed per warped dimension.
int transform_param_width(Transform t, int bins);

struct WarpStats {
    long long clamped = 0;  // inputs pulled back into the open unit interval
};

// ---- scalar kernels ----------------------------------------------------

// Max-subtracted softmax; q must hold k doubles.
void softmax(const double* logits, int k, double* q);
// dL/dlogits given dL/dq; glogits must hold k doubles (overwritten).
void softmax_backward(const double* q, const double* gq, int k, double* glogits);

struct Warp {
    double y;
    double pdf;
};

// Piecewise-linear CDF over k uniform bins with masses q (sum 1).
// x in [0, 1); pdf is the piecewise-constant density k * q[bin].
Warp pwl_warp(double x, const double* q, int k);
double pwl_unwarp(double y, const double* q, int k, double* pdf);
// Accumulates dL/dq given upstream dL/dy and dL/dlog(pdf); returns dL/dx.
double pwl_warp_backward(double x, const double* q, int k, double gy, double glogpdf, double* gq);

// Piecewise-quadratic CDF: bin widths w (k, sum 1) and vertex densities
// v (k+1, trapezoid-normalized so the total mass is 1).
void pwq_normalize(const double* w_logits, const double* v_logits, int k, double* w, double* v);
// Pulls gradients on (w, v) back to the raw logits. gw/gv are dL/dw, dL/dv;
// outputs overwrite gw_logits (k) and gv_logits (k+1).
void pwq_normalize_backward(const double* w, const double* v, int k, const double* gw,
                            const double* gv, double* gw_logits, double* gv_logits);
Warp pwq_warp(double x, const double* w, const double* v, int k);
double pwq_unwarp(double y, const double* w, const double* v, int k, double* pdf);
// Accumulates dL/dw and dL/dv; returns dL/dx.
double pwq_warp_backward(double x, const double* w, const double* v, int k, double gy,
                         double glogpdf, double* gw, double* gv);

// Monotone warp through logit space: y = sigmoid(e^s * logit(x) + t).
// additive mode pins s = 0. Inputs at the domain edge are pulled inside
// (counted in stats); outputs stay strictly below 1.
Warp affine_warp(double x, double s, double t, WarpStats* stats = nullptr);
double affine_unwarp(double y, double s, double t, double* pdf, WarpStats* stats = nullptr);
// Accumulates dL/ds and dL/dt; returns dL/dx.
double affine_warp_backward(double x, double s, double t, double gy, double glogpdf, double* gs,
                            double* gt);

// ---- coupling layer ------------------------------------------------------

// One coupling layer: dimensions in `passed` go through unchanged and feed
// the parameter network together with the conditioning features; dimensions
// in `warped` are transformed per-dimension.
struct CouplingLayer {
    Transform kind = Transform::Pwq;
    int bins = 32;
    std::vector<int> passed;
    std::vector<int> warped;
    bool blob_inputs = true;  // one-blob encode the passed dimensions
    int blob_k = 32;
    int cond_width = 0;  // encoded conditioning features appended to the net input
    Mlp net;

    int net_input_width() const;
    int net_output_width() const;
};

struct LayerCache {
    Matrix enc;       // network input
    MlpCache net;
    Matrix raw;       // network output
    Matrix qa;        // pwl masses / pwq widths / affine (s, t) rows
    Matrix qb;        // pwq vertex densities
    Matrix alpha;     // per warped dim
    std::vector<std::int32_t> bin;
    Matrix pdf;
    Matrix xb;        // warped-dim inputs after the domain guard
    Matrix yb;        // warped-dim outputs
};

// Batched forward pass. X is batch x D, cond_enc is batch x cond_width
// (already encoded). Y gets the transformed coordinates and logdet[i] is
// incremented by the row's log density change.
void coupling_forward(const CouplingLayer& layer, const Matrix& X, const Matrix& cond_enc,
                      Matrix& Y, std::vector<double>& logdet, LayerCache* cache = nullptr,
                      WarpStats* stats = nullptr);

// Batched inverse. logdet, if given, is incremented with the forward-
// direction log density at the recovered input.
void coupling_inverse(const CouplingLayer& layer, const Matrix& Y, const Matrix& cond_enc,
                      Matrix& X, std::vector<double>* logdet = nullptr, WarpStats* stats = nullptr);

// Reverse-mode pass for one layer. coeff[i] scales the row's log-density
// gradient; gy is the gradient with respect to the layer output (empty means
// zero). Parameter gradients accumulate into acc; gx receives the gradient
// with respect to the layer input.
void coupling_backward(const CouplingLayer& layer, const Matrix& X, const Matrix& cond_enc,
                       const LayerCache& cache, const std::vector<double>& coeff, const Matrix& gy,
                       MlpGrad& acc, Matrix& gx);

// ---- direct-parameter 1D density ----------------------------------------

// Piecewise-linear density on [0, 1] whose bin masses are free parameters
// (softmax of logits). No network; useful as a minimal trainable density.
struct DirectPdf1D {
    std::vector<double> logits;

    explicit DirectPdf1D(int k) : logits(static_cast<std::size_t>(k), 0.0) {}
    int bins() const { return static_cast<int>(logits.size()); }
    std::vector<double> masses() const;
    double pdf(double x) const;
    double sample(double u, double* pdf = nullptr) const;
    // Accumulates d(log pdf(x))/d logits scaled by coeff.
    void grad_log_pdf(double x, double coeff, std::vector<double>& glogits) const;
};

}  // namespace flowmc
