#include "flowmc/encoding.hpp"

#include <cmath>
#include <vector>

#include "flowmc/common.hpp"

namespace flowmc {
namespace {

constexpr double kZMax = 8.0;
constexpr int kPerUnit = 512;  // table resolution; Hermite error ~5e-14
constexpr int kNodes = 2 * 8 * kPerUnit + 1;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

struct CdfTable {
    std::vector<double> cdf, pdf;
    CdfTable() : cdf(kNodes), pdf(kNodes) {
        for (int i = 0; i < kNodes; ++i) {
            double z = -kZMax + static_cast<double>(i) / kPerUnit;
            cdf[i] = 0.5 * std::erfc(-z * M_SQRT1_2);
            pdf[i] = kInvSqrt2Pi * std::exp(-0.5 * z * z);
        }
    }
};

const CdfTable& table() {
    static const CdfTable t;
    return t;
}

// Hermite cubic through (f0, d0) and (f1, d1) on a unit parameter u.
inline double hermite(double f0, double f1, double d0, double d1, double u, double h) {
    double u2 = u * u;
    double u3 = u2 * u;
    return f0 * (2 * u3 - 3 * u2 + 1) + f1 * (-2 * u3 + 3 * u2) +
           h * (d0 * (u3 - 2 * u2 + u) + d1 * (u3 - u2));
}

// Table-threaded bodies so the encoding loops pay for the singleton lookup
// once per call instead of once per bin edge.
inline double cdf_at(const CdfTable& t, double z) {
    if (z <= -kZMax) return 0.0;
    if (z >= kZMax) return 1.0;
    double pos = (z + kZMax) * kPerUnit;
    int i = static_cast<int>(pos);
    if (i >= kNodes - 1) i = kNodes - 2;
    double u = pos - i;
    constexpr double h = 1.0 / kPerUnit;
    return hermite(t.cdf[i], t.cdf[i + 1], t.pdf[i], t.pdf[i + 1], u, h);
}

inline double pdf_at(const CdfTable& t, double z) {
    if (z <= -kZMax || z >= kZMax) return 0.0;
    double pos = (z + kZMax) * kPerUnit;
    int i = static_cast<int>(pos);
    if (i >= kNodes - 1) i = kNodes - 2;
    double u = pos - i;
    constexpr double h = 1.0 / kPerUnit;
    // d pdf / dz = -z * pdf
    double z0 = -kZMax + static_cast<double>(i) / kPerUnit;
    double z1 = z0 + h;
    return hermite(t.pdf[i], t.pdf[i + 1], -z0 * t.pdf[i], -z1 * t.pdf[i + 1], u, h);
}

}  // namespace

double normal_cdf(double z) { return cdf_at(table(), z); }

double normal_pdf(double z) { return pdf_at(table(), z); }

void one_blob(double s, int k, double* out) {
    if (!(s >= 0.0 && s <= 1.0)) throw DomainError(strfmt("one_blob: s = %.17g outside [0, 1]", s));
    if (k < 1) throw ConfigError("one_blob: k must be >= 1");
    const CdfTable& t = table();
    // Bin edges in kernel sigma units: edge j sits at j - s*k. Adjacent bins
    // share an edge, so its CDF value is carried instead of recomputed.
    double u = s * k;
    int lo = static_cast<int>(std::floor(u - kZMax));
    int hi = static_cast<int>(std::ceil(u + kZMax));
    double prev = 0.0;
    bool have_prev = false;
    for (int i = 0; i < k; ++i) {
        if (i + 1 < lo || i > hi) {
            out[i] = 0.0;
            have_prev = false;
            continue;
        }
        double c0 = have_prev ? prev : cdf_at(t, i - u);
        double c1 = cdf_at(t, i + 1 - u);
        out[i] = c1 - c0;
        prev = c1;
        have_prev = true;
    }
}

double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw DomainError(strfmt("inverse_normal_cdf: p = %.17g outside (0, 1)", p));
    // Rational approximation in three regimes, then one Halley step
    // against the erfc-based CDF.
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double z;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        z = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        z = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        z = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-z * M_SQRT1_2) - p;
    const double t = e * std::sqrt(2.0 * kPi) * std::exp(0.5 * z * z);
    return z - t / (1.0 + 0.5 * z * t);
}

void one_blob_grad(double s, int k, double* out) {
    if (!(s >= 0.0 && s <= 1.0))
        throw DomainError(strfmt("one_blob_grad: s = %.17g outside [0, 1]", s));
    if (k < 1) throw ConfigError("one_blob_grad: k must be >= 1");
    const CdfTable& t = table();
    double u = s * k;
    int lo = static_cast<int>(std::floor(u - kZMax));
    int hi = static_cast<int>(std::ceil(u + kZMax));
    double prev = 0.0;
    bool have_prev = false;
    for (int i = 0; i < k; ++i) {
        if (i + 1 < lo || i > hi) {
            out[i] = 0.0;
            have_prev = false;
            continue;
        }
        double p0 = have_prev ? prev : pdf_at(t, i - u);
        double p1 = pdf_at(t, i + 1 - u);
        out[i] = (p0 - p1) * k;
        prev = p1;
        have_prev = true;
    }
}

}  // namespace flowmc
