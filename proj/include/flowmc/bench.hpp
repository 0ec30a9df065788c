#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "flowmc/flow.hpp"
#include "flowmc/image_io.hpp"
#include "flowmc/rng.hpp"

namespace flowmc {

// Nonnegative grayscale grid interpreted as an unnormalized density on
// [0,1]^2 via bilinear interpolation (texel-center convention,
// clamp-to-edge). Coordinate 0 runs along width, coordinate 1 along
// height, row 0 at the top.
class ImageTarget {
public:
    explicit ImageTarget(Image img);

    double eval(double u, double v) const;
    double eval(const double* x) const { return eval(x[0], x[1]); }
    const Image& image() const { return img_; }

private:
    Image img_;
};

// Procedurally generated benchmark targets. Names: "wedge" (sharp
// diagonal edge over brightness steps), "rings" (concentric curved
// ridges), "filaments" (multi-scale elongated clusters), "constant".
double target_function(const std::string& name, double u, double v);
Image make_target(const std::string& name, int width = 64, int height = 64);
std::vector<std::string> benchmark_target_names();

// Mean absolute percentage error with an epsilon floor guarding the
// division: mean(|v - ref| / (ref + 0.01)).
double mape(const Image& rendered, const Image& reference);

// Cross-entropy E_p[-log q] of the flow against the target, estimated by
// midpoint quadrature on a res x res grid; the target is normalized to a
// probability density over the grid first. Deterministic for a fixed
// snapshot.
double cross_entropy_grid(const NormalizingFlow& flow, const ImageTarget& target, int res = 64);

// Sample mean and unbiased sample variance of the per-draw weight
// f(X)/q(X) with X drawn from the flow.
std::pair<double, double> estimator_variance(const NormalizingFlow& flow,
                                             const std::function<double(const double*)>& target,
                                             std::int64_t n, Rng& rng);

// Flow density at the texel centers of a res x res grid over [0,1]^2.
Image density_grid(const NormalizingFlow& flow, int res,
                   const std::vector<double>& conditioning = {});

// Adaptive Simpson quadrature on [a, b].
double integrate(const std::function<double(double)>& f, double a, double b, double tol = 1e-12);

// Two broken gradient formulations for the width parameter of a 2-bin
// piecewise-constant density on [0,1] whose bin widths are (theta,
// 1-theta): the density-normalized expression obtained by illegally
// moving the gradient inside the expectation, and the mass-normalized
// expression (1/theta) * int_0^theta p - (1/(1-theta)) * int_theta^1 p.
// Both demonstrate why learned bin widths are excluded from the
// piecewise-linear transform.
struct WidthGradients {
    double density_norm = 0.0;
    double mass_norm = 0.0;
};

WidthGradients broken_width_gradients(double theta, double q1, double q2,
                                          const std::function<double(double)>& p);

// Fixed anisotropic mixture of three axis-aligned truncated Gaussians on
// [0,1]^dim plus a uniform floor. Every component is exactly normalized
// per axis, so the integral over the cube is known in closed form. The
// construction is invariant under swapping each even/odd coordinate pair.
class PssTarget {
public:
    explicit PssTarget(int dim);

    double eval(const double* x) const;
    double normalization() const { return normalization_; }
    int dim() const { return dim_; }
    // Coordinate permutation the target is invariant under (pairwise
    // swaps: 1,0,3,2,...).
    std::vector<int> symmetry_permutation() const;

private:
    struct Component {
        double amp;
        std::vector<double> mu, sigma, axis_norm;
    };
    int dim_;
    double floor_;
    double normalization_;
    std::vector<Component> comps_;
};

PssTarget pss_synthetic_target(int dim);

}  // namespace flowmc
