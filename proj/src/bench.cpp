#include "flowmc/bench.hpp"

#include <algorithm>
#include <cmath>

#include "flowmc/common.hpp"

namespace flowmc {

ImageTarget::ImageTarget(Image img) : img_(std::move(img)) {
    if (img_.width <= 0 || img_.height <= 0) throw ParamError("image target: empty image");
    bool any_positive = false;
    for (double v : img_.pix) {
        if (!(v >= 0.0)) throw ParamError("image target: negative or NaN sample");
        any_positive |= v > 0.0;
    }
    if (!any_positive) throw ParamError("image target: all-zero image cannot define a density");
}

double ImageTarget::eval(double u, double v) const {
    if (!(u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0))
        throw DomainError(strfmt("image target lookup at (%g, %g) outside [0,1]^2", u, v));
    // Texel centers sit at (i + 0.5) / size; outside the center lattice the
    // edge texel value extends (clamp-to-edge).
    const double s = u * img_.width - 0.5;
    const double t = v * img_.height - 0.5;
    const double fs = std::floor(s), ft = std::floor(t);
    const double au = s - fs, av = t - ft;
    const int x0 = std::clamp(static_cast<int>(fs), 0, img_.width - 1);
    const int x1 = std::clamp(static_cast<int>(fs) + 1, 0, img_.width - 1);
    const int y0 = std::clamp(static_cast<int>(ft), 0, img_.height - 1);
    const int y1 = std::clamp(static_cast<int>(ft) + 1, 0, img_.height - 1);
    const double top = img_.at(x0, y0) * (1.0 - au) + img_.at(x1, y0) * au;
    const double bot = img_.at(x0, y1) * (1.0 - au) + img_.at(x1, y1) * au;
    return top * (1.0 - av) + bot * av;
}

namespace {

constexpr double kFloor = 0.02;

double wedge(double u, double v) {
    if (u + v >= 1.0) return kFloor;
    const double level = u < 0.25 ? 0.25 : u < 0.5 ? 0.5 : u < 0.75 ? 0.75 : 1.0;
    return kFloor + level;
}

double rings(double u, double v) {
    static constexpr double kRadius[] = {0.15, 0.30, 0.45};
    static constexpr double kAmp[] = {1.0, 0.7, 0.5};
    constexpr double sigma = 0.02;
    const double r = std::hypot(u - 0.5, v - 0.5);
    double f = kFloor;
    for (int k = 0; k < 3; ++k) {
        const double d = r - kRadius[k];
        f += kAmp[k] * std::exp(-d * d / (2.0 * sigma * sigma));
    }
    return f;
}

double filaments(double u, double v) {
    double f = kFloor;
    // Broad diffuse blob.
    {
        const double du = u - 0.30, dv = v - 0.70;
        f += 0.35 * std::exp(-(du * du + dv * dv) / (2.0 * 0.12 * 0.12));
    }
    // Thin ridge along a sine curve.
    {
        double d2 = 1e30;
        constexpr int kSteps = 256;
        for (int i = 0; i <= kSteps; ++i) {
            const double t = 0.1 + 0.8 * i / kSteps;
            const double cu = t;
            const double cv = 0.30 + 0.20 * std::sin(3.0 * kPi * t);
            const double du = u - cu, dv = v - cv;
            d2 = std::min(d2, du * du + dv * dv);
        }
        f += 0.9 * std::exp(-d2 / (2.0 * 0.012 * 0.012));
    }
    // Tight cluster of bright spots.
    static constexpr double kSpots[][2] = {{0.72, 0.78}, {0.78, 0.70}, {0.66, 0.72}};
    for (const auto& s : kSpots) {
        const double du = u - s[0], dv = v - s[1];
        f += 1.0 * std::exp(-(du * du + dv * dv) / (2.0 * 0.010 * 0.010));
    }
    return f;
}

}  // namespace

double target_function(const std::string& name, double u, double v) {
    if (name == "wedge") return wedge(u, v);
    if (name == "rings") return rings(u, v);
    if (name == "filaments") return filaments(u, v);
    if (name == "constant") return 1.0;
    throw ConfigError(strfmt("unknown benchmark target '%s'", name.c_str()));
}

Image make_target(const std::string& name, int width, int height) {
    if (width < 2 || height < 2) throw ConfigError("target resolution must be at least 2");
    Image img(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            img.at(x, y) = target_function(name, (x + 0.5) / width, (y + 0.5) / height);
        }
    }
    return img;
}

std::vector<std::string> benchmark_target_names() { return {"wedge", "rings", "filaments"}; }

double mape(const Image& rendered, const Image& reference) {
    if (rendered.width != reference.width || rendered.height != reference.height)
        throw ShapeError(strfmt("mape: %dx%d vs %dx%d", rendered.width, rendered.height,
                                reference.width, reference.height));
    constexpr double kEps = 0.01;
    double sum = 0.0;
    for (std::size_t i = 0; i < rendered.pix.size(); ++i) {
        sum += std::fabs(rendered.pix[i] - reference.pix[i]) / (reference.pix[i] + kEps);
    }
    return sum / static_cast<double>(rendered.pix.size());
}

namespace {

// Batched flow_log_pdf over grid texel centers, chunked to bound memory.
template <typename PerCell>
void for_each_grid_logq(const NormalizingFlow& flow, int res,
                        const std::vector<double>& conditioning, PerCell&& per_cell) {
    const std::int64_t total = static_cast<std::int64_t>(res) * res;
    constexpr std::int64_t kChunk = 8192;
    Matrix x, cond;
    std::vector<double> logq;
    for (std::int64_t base = 0; base < total; base += kChunk) {
        const std::int64_t n = std::min(kChunk, total - base);
        x.resize(static_cast<std::size_t>(n), 2);
        cond.resize(static_cast<std::size_t>(n), conditioning.size());
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t cell = base + i;
            x.row(static_cast<std::size_t>(i))[0] = ((cell % res) + 0.5) / res;
            x.row(static_cast<std::size_t>(i))[1] = ((cell / res) + 0.5) / res;
            std::copy(conditioning.begin(), conditioning.end(),
                      cond.row(static_cast<std::size_t>(i)));
        }
        flow_log_pdf(flow, x, cond, logq);
        for (std::int64_t i = 0; i < n; ++i) per_cell(base + i, logq[static_cast<std::size_t>(i)]);
    }
}

}  // namespace

double cross_entropy_grid(const NormalizingFlow& flow, const ImageTarget& target, int res) {
    if (res < 2) throw ConfigError("cross-entropy grid resolution must be at least 2");
    if (flow.cfg.dim != 2) throw ShapeError("cross-entropy grid requires a 2D flow");
    const std::int64_t total = static_cast<std::int64_t>(res) * res;
    std::vector<double> p(static_cast<std::size_t>(total));
    double mean_p = 0.0;
    for (std::int64_t cell = 0; cell < total; ++cell) {
        const double u = ((cell % res) + 0.5) / res;
        const double v = ((cell / res) + 0.5) / res;
        p[static_cast<std::size_t>(cell)] = target.eval(u, v);
        mean_p += p[static_cast<std::size_t>(cell)];
    }
    mean_p /= static_cast<double>(total);

    double ce = 0.0;
    for_each_grid_logq(flow, res, {}, [&](std::int64_t cell, double logq) {
        ce += p[static_cast<std::size_t>(cell)] * -logq;
    });
    return ce / (mean_p * static_cast<double>(total));
}

std::pair<double, double> estimator_variance(const NormalizingFlow& flow,
                                             const std::function<double(const double*)>& target,
                                             std::int64_t n, Rng& rng) {
    if (n < 2) throw ConfigError("estimator_variance needs at least 2 samples");
    const std::int64_t dim = flow.cfg.dim;
    constexpr std::int64_t kChunk = 8192;
    Matrix u, x, cond;
    std::vector<double> logq;
    // Welford running moments: stable for the heavy-tailed weights a poor
    // proposal can produce.
    double mean = 0.0, m2 = 0.0;
    std::int64_t seen = 0;
    for (std::int64_t base = 0; base < n; base += kChunk) {
        const std::int64_t c = std::min(kChunk, n - base);
        u.resize(static_cast<std::size_t>(c), static_cast<std::size_t>(dim));
        cond.resize(static_cast<std::size_t>(c), 0);
        for (double& v : u.a) v = rng.uniform();
        flow_sample(flow, u, cond, x, &logq);
        for (std::int64_t i = 0; i < c; ++i) {
            const double w = target(x.row(static_cast<std::size_t>(i))) /
                             std::exp(logq[static_cast<std::size_t>(i)]);
            ++seen;
            const double d = w - mean;
            mean += d / static_cast<double>(seen);
            m2 += d * (w - mean);
        }
    }
    return {mean, m2 / static_cast<double>(n - 1)};
}

Image density_grid(const NormalizingFlow& flow, int res, const std::vector<double>& conditioning) {
    if (res < 2) throw ConfigError("density grid resolution must be at least 2");
    if (flow.cfg.dim != 2) throw ShapeError("density grid requires a 2D flow");
    Image img(res, res);
    for_each_grid_logq(flow, res, conditioning, [&](std::int64_t cell, double logq) {
        img.pix[static_cast<std::size_t>(cell)] = std::exp(logq);
    });
    return img;
}

namespace {

double simpson_recurse(const std::function<double(double)>& f, double a, double m, double b,
                       double fa, double fm, double fb, double whole, double tol, int depth) {
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double delta = left + right - whole;
    if (depth <= 0 || std::fabs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
    return simpson_recurse(f, a, lm, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
           simpson_recurse(f, m, rm, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace

double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
    if (!(b >= a)) throw ParamError("integrate: inverted interval");
    if (a == b) return 0.0;
    const double m = 0.5 * (a + b);
    const double fa = f(a), fm = f(m), fb = f(b);
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return simpson_recurse(f, a, m, b, fa, fm, fb, whole, tol, 48);
}

WidthGradients broken_width_gradients(double theta, double q1, double q2,
                                          const std::function<double(double)>& p) {
    if (!(theta > 0.0 && theta < 1.0))
        throw DomainError("broken_width_gradients: theta must lie strictly inside (0,1)");
    if (!(q1 > 0.0 && q2 > 0.0))
        throw ParamError("broken_width_gradients: bin densities must be positive");
    const double i1 = integrate(p, 0.0, theta);
    const double i2 = integrate(p, theta, 1.0);
    const double s = q1 * theta + q2 * (1.0 - theta);

    WidthGradients g;
    // Expectation over X ~ q of the per-sample expression; its sign is that
    // of q1 - q2 for any theta, so following it diverges.
    g.density_norm = (q1 / s) * (1.0 - q2 / q1) * i1 + (q2 / s) * (q1 / q2 - 1.0) * i2;
    // Mass-normalized variant: identically zero for uniform p even though
    // theta clearly matters there.
    g.mass_norm = i1 / theta - i2 / (1.0 - theta);
    return g;
}

namespace {

double accurate_normal_cdf(double z) { return 0.5 * std::erfc(-z / kSqrt2); }

}  // namespace

PssTarget::PssTarget(int dim) : dim_(dim), floor_(0.05) {
    if (dim < 4 || dim > 8 || dim % 2 != 0)
        throw ConfigError(strfmt("synthetic high-dim target supports even dim in [4,8], got %d", dim));
    const int pairs = dim / 2;

    // Per coordinate pair: {mu, sigma} for each of the three components.
    // Component 0 is symmetric within every pair; components 1 and 2 are
    // mirror images of each other, so swapping the coordinates of every
    // pair permutes the components and leaves the mixture unchanged.
    static constexpr double kComp0[4][2][2] = {
        {{0.30, 0.30}, {0.08, 0.08}},
        {{0.70, 0.70}, {0.15, 0.15}},
        {{0.50, 0.50}, {0.25, 0.25}},
        {{0.35, 0.35}, {0.10, 0.10}},
    };
    static constexpr double kComp1[4][2][2] = {
        {{0.75, 0.20}, {0.05, 0.12}},
        {{0.50, 0.50}, {0.20, 0.20}},
        {{0.60, 0.40}, {0.10, 0.18}},
        {{0.45, 0.55}, {0.12, 0.07}},
    };
    static constexpr double kAmp[3] = {1.0, 0.6, 0.6};

    comps_.resize(3);
    for (int c = 0; c < 3; ++c) {
        Component& comp = comps_[static_cast<std::size_t>(c)];
        comp.amp = kAmp[c];
        comp.mu.resize(static_cast<std::size_t>(dim));
        comp.sigma.resize(static_cast<std::size_t>(dim));
        comp.axis_norm.resize(static_cast<std::size_t>(dim));
        for (int p = 0; p < pairs; ++p) {
            for (int side = 0; side < 2; ++side) {
                const int d = 2 * p + side;
                // Component 2 reads component 1's parameters with the pair
                // swapped.
                const int src_side = c == 2 ? 1 - side : side;
                const auto& table = c == 0 ? kComp0[p] : kComp1[p];
                comp.mu[static_cast<std::size_t>(d)] = table[0][src_side];
                comp.sigma[static_cast<std::size_t>(d)] = table[1][src_side];
            }
        }
        for (int d = 0; d < dim; ++d) {
            const double mu = comp.mu[static_cast<std::size_t>(d)];
            const double sg = comp.sigma[static_cast<std::size_t>(d)];
            comp.axis_norm[static_cast<std::size_t>(d)] =
                accurate_normal_cdf((1.0 - mu) / sg) - accurate_normal_cdf(-mu / sg);
        }
    }
    normalization_ = floor_;
    for (const auto& c : comps_) normalization_ += c.amp;
}

double PssTarget::eval(const double* x) const {
    double f = floor_;
    for (const auto& c : comps_) {
        double comp = c.amp;
        for (int d = 0; d < dim_; ++d) {
            const double z = (x[d] - c.mu[static_cast<std::size_t>(d)]) /
                             c.sigma[static_cast<std::size_t>(d)];
            comp *= std::exp(-0.5 * z * z) /
                    (c.sigma[static_cast<std::size_t>(d)] * kSqrt2Pi *
                     c.axis_norm[static_cast<std::size_t>(d)]);
        }
        f += comp;
    }
    return f;
}

std::vector<int> PssTarget::symmetry_permutation() const {
    std::vector<int> perm(static_cast<std::size_t>(dim_));
    for (int d = 0; d < dim_; ++d) perm[static_cast<std::size_t>(d)] = d ^ 1;
    return perm;
}

PssTarget pss_synthetic_target(int dim) { return PssTarget(dim); }

}  // namespace flowmc
