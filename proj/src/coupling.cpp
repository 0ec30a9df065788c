#include "flowmc/coupling.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "flowmc/common.hpp"
#include "flowmc/encoding.hpp"

namespace flowmc {

const char* transform_name(Transform t) {
    switch (t) {
        case Transform::Additive: return "additive";
        case Transform::Affine: return "affine";
        case Transform::Pwl: return "pwl";
        case Transform::Pwq: return "pwq";
    }
    return "?";
}

Transform transform_from_name(const std::string& name) {
    if (name == "additive") return Transform::Additive;
    if (name == "affine") return Transform::Affine;
    if (name == "pwl") return Transform::Pwl;
    if (name == "pwq") return Transform::Pwq;
    throw ConfigError("unknown transform kind: " + name);
}

int transform_param_width(Transform t, int bins) {
    switch (t) {
        case Transform::Additive: return 1;       // translation
        case Transform::Affine: return 2;         // log-scale, translation
        case Transform::Pwl: return bins;         // bin mass logits
        case Transform::Pwq: return 2 * bins + 1; // width logits + vertex logits
    }
    return 0;
}

namespace {

// Inputs must live in [0, 1). Exactly 1 gets pulled just inside; anything
// farther out is a caller error.
inline double guard01(double x, WarpStats* stats) {
    if (x >= 0.0 && x < 1.0) return x;
    if (x == 1.0) {
        if (stats) ++stats->clamped;
        return kRightEdge;
    }
    throw DomainError(strfmt("coordinate %.17g outside [0, 1]", x));
}

inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---- scalar kernels -------------------------------------------------------

namespace {

// Aligned scratch capacity for the vectorized exponential; larger bin counts
// fall back to libm.
constexpr int kVecBins = 1025;

// out[i] = exp(in[i] - m), returning the sum. The exponentials dominate the
// per-sample transform cost, so they run through Eigen's packet math instead
// of one libm call per bin. They land in a fixed 64-byte-aligned scratch
// first: Eigen peels vector loops to the destination's runtime alignment,
// and mixing its packet exp with libm exp on a boundary that shifts with the
// heap layout would make results depend on buffer addresses. A fixed
// alignment keeps identical inputs giving identical bytes on every run.
inline double exp_shift(const double* in, int k, double m, double* out) {
    if (k > kVecBins) {
        double z = 0.0;
        for (int i = 0; i < k; ++i) {
            out[i] = std::exp(in[i] - m);
            z += out[i];
        }
        return z;
    }
    alignas(64) double buf[kVecBins];
    Eigen::Map<Eigen::ArrayXd, Eigen::Aligned64> b(buf, k);
    b = (Eigen::Map<const Eigen::ArrayXd>(in, k) - m).exp();
    double z = b.sum();
    std::memcpy(out, buf, static_cast<std::size_t>(k) * sizeof(double));
    return z;
}

}  // namespace

void softmax(const double* logits, int k, double* q) {
    double m = logits[0];
    for (int i = 1; i < k; ++i) m = std::max(m, logits[i]);
    if (!std::isfinite(m)) throw DegenerateDensityError("softmax: non-finite logit");
    double z = exp_shift(logits, k, m, q);
    for (int i = 0; i < k; ++i) q[i] /= z;
}

void softmax_backward(const double* q, const double* gq, int k, double* glogits) {
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += gq[i] * q[i];
    for (int i = 0; i < k; ++i) glogits[i] = q[i] * (gq[i] - dot);
}

Warp pwl_warp(double x, const double* q, int k) {
    x = guard01(x, nullptr);
    int b = static_cast<int>(x * k);
    if (b > k - 1) b = k - 1;
    double alpha = x * k - b;
    double cum = 0.0;
    for (int i = 0; i < b; ++i) cum += q[i];
    double y = cum + alpha * q[b];
    if (y > kBelowOne) y = kBelowOne;
    return {y, q[b] * k};
}

double pwl_unwarp(double y, const double* q, int k, double* pdf) {
    y = guard01(y, nullptr);
    double cum = 0.0;
    int b = k - 1;
    for (int i = 0; i < k; ++i) {
        if (y < cum + q[i]) {
            b = i;
            break;
        }
        if (i < k - 1) cum += q[i];
    }
    double alpha = q[b] > 0.0 ? (y - cum) / q[b] : 0.0;
    if (alpha < 0.0) alpha = 0.0;
    if (alpha > kBelowOne) alpha = kBelowOne;
    double x = (b + alpha) / k;
    if (x > kBelowOne) x = kBelowOne;
    if (pdf) *pdf = q[b] * k;
    return x;
}

double pwl_warp_backward(double x, const double* q, int k, double gy, double glogpdf, double* gq) {
    int b = static_cast<int>(x * k);
    if (b > k - 1) b = k - 1;
    double alpha = x * k - b;
    for (int i = 0; i < b; ++i) gq[i] += gy;
    gq[b] += gy * alpha;
    if (q[b] > 0.0) gq[b] += glogpdf / q[b];
    return gy * q[b] * k;
}

void pwq_normalize(const double* w_logits, const double* v_logits, int k, double* w, double* v) {
    softmax(w_logits, k, w);
    double m = v_logits[0];
    for (int i = 1; i <= k; ++i) m = std::max(m, v_logits[i]);
    if (!std::isfinite(m)) throw DegenerateDensityError("pwq_normalize: non-finite vertex logit");
    exp_shift(v_logits, k + 1, m, v);
    // Total trapezoid mass becomes the normalizer so the density integrates
    // to one over the k bins.
    double z = 0.0;
    for (int i = 0; i < k; ++i) z += 0.5 * (v[i] + v[i + 1]) * w[i];
    if (!(z > 0.0)) throw DegenerateDensityError("pwq_normalize: zero total mass");
    for (int i = 0; i <= k; ++i) v[i] /= z;
}

void pwq_normalize_backward(const double* w, const double* v, int k, const double* gw,
                            const double* gv, double* gw_logits, double* gv_logits) {
    // s = sum_i gv_i v_i captures the gradient through the shared normalizer.
    double s = 0.0;
    for (int i = 0; i <= k; ++i) s += gv[i] * v[i];
    for (int i = 0; i <= k; ++i) {
        double wl = (i > 0 ? w[i - 1] : 0.0);
        double wr = (i < k ? w[i] : 0.0);
        gv_logits[i] = gv[i] * v[i] - s * v[i] * 0.5 * (wl + wr);
    }
    // Widths also feed the normalizer.
    for (int i = 0; i < k; ++i)
        gw_logits[i] = gw[i] - s * 0.5 * (v[i] + v[i + 1]);
    // Reuse gw_logits as the pre-softmax gradient buffer.
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += gw_logits[i] * w[i];
    for (int i = 0; i < k; ++i) gw_logits[i] = w[i] * (gw_logits[i] - dot);
}

namespace {

inline int pwq_locate(double x, const double* w, int k, double* left) {
    double c = 0.0;
    for (int b = 0; b < k - 1; ++b) {
        if (x < c + w[b]) {
            *left = c;
            return b;
        }
        c += w[b];
    }
    *left = c;
    return k - 1;
}

}  // namespace

Warp pwq_warp(double x, const double* w, const double* v, int k) {
    x = guard01(x, nullptr);
    double left;
    int b = pwq_locate(x, w, k, &left);
    double alpha = w[b] > 0.0 ? (x - left) / w[b] : 0.0;
    if (alpha < 0.0) alpha = 0.0;
    if (alpha > kBelowOne) alpha = kBelowOne;
    double ycum = 0.0;
    for (int i = 0; i < b; ++i) ycum += 0.5 * (v[i] + v[i + 1]) * w[i];
    double dv = v[b + 1] - v[b];
    double y = ycum + w[b] * (alpha * v[b] + 0.5 * alpha * alpha * dv);
    if (y > kBelowOne) y = kBelowOne;
    return {y, v[b] + alpha * dv};
}

double pwq_unwarp(double y, const double* w, const double* v, int k, double* pdf) {
    y = guard01(y, nullptr);
    double ycum = 0.0, left = 0.0;
    int b = k - 1;
    for (int i = 0; i < k; ++i) {
        double mass = 0.5 * (v[i] + v[i + 1]) * w[i];
        if (y < ycum + mass || i == k - 1) {
            b = i;
            break;
        }
        ycum += mass;
        left += w[i];
    }
    double c = y - ycum;
    if (c < 0.0) c = 0.0;
    double a = (v[b + 1] - v[b]) * w[b];
    double lin = v[b] * w[b];
    double alpha;
    if (std::fabs(a) < 1e-12 * std::max(lin, 1e-300)) {
        alpha = lin > 0.0 ? c / lin : 0.0;
    } else {
        double disc = lin * lin + 2.0 * a * c;
        double denom = lin + std::sqrt(std::max(disc, 0.0));
        alpha = denom > 0.0 ? 2.0 * c / denom : 0.0;
    }
    if (alpha < 0.0) alpha = 0.0;
    if (alpha > kBelowOne) alpha = kBelowOne;
    double x = left + alpha * w[b];
    if (x > kBelowOne) x = kBelowOne;
    if (pdf) *pdf = v[b] + alpha * (v[b + 1] - v[b]);
    return x;
}

double pwq_warp_backward(double x, const double* w, const double* v, int k, double gy,
                         double glogpdf, double* gw, double* gv) {
    double left;
    int b = pwq_locate(x, w, k, &left);
    double alpha = w[b] > 0.0 ? (x - left) / w[b] : 0.0;
    if (alpha < 0.0) alpha = 0.0;
    if (alpha > kBelowOne) alpha = kBelowOne;
    double dv = v[b + 1] - v[b];
    double pdf = v[b] + alpha * dv;
    double gp = pdf > 0.0 ? glogpdf / pdf : 0.0;  // dL/dpdf

    // Terms through the cumulative mass and widths left of the bin.
    for (int m = 0; m < b; ++m) {
        gv[m] += gy * 0.5 * w[m];
        gv[m + 1] += gy * 0.5 * w[m];
        gw[m] += gy * (0.5 * (v[m] + v[m + 1]) - pdf) - gp * dv / w[b];
    }
    gv[b] += gy * (alpha - 0.5 * alpha * alpha) * w[b] + gp * (1.0 - alpha);
    gv[b + 1] += gy * 0.5 * alpha * alpha * w[b] + gp * alpha;
    gw[b] += -gy * 0.5 * alpha * alpha * dv - gp * alpha * dv / w[b];
    return gy * pdf + gp * dv / w[b];
}

// ---- affine / additive ----------------------------------------------------

namespace {
constexpr double kEpsDom = 1e-6;

inline double affine_guard(double x, WarpStats* stats) {
    if (x > 0.0 && x < 1.0) return x;
    if (x == 0.0 || x == 1.0) {
        if (stats) ++stats->clamped;
        return x == 0.0 ? kEpsDom : 1.0 - kEpsDom;
    }
    throw DomainError(strfmt("coordinate %.17g outside [0, 1]", x));
}

inline double logit(double x) { return std::log(x) - std::log1p(-x); }

// log sigmoid'(u), stable for any u.
inline double log_dsigmoid(double u) { return -softplus(u) - softplus(-u); }

// Same warp, but hands back the intermediates the training backward pass
// needs (zc = {logit(x), e^s, 1-y}) so it can run without transcendentals.
// The sigmoid is evaluated in split form: y and 1-y each keep full relative
// precision, which the density needs far into the tails, and
// sigmoid'(logit(x)) = x(1-x) is taken as exp(log x + log1p(-x)) to keep the
// bits a literal 1-x would drop near the upper edge.
inline Warp affine_warp_cached(double x, double s, double t, WarpStats* stats, double* zc) {
    x = affine_guard(x, stats);
    double lx = std::log(x);
    double l1mx = std::log1p(-x);
    double z = lx - l1mx;
    double es = std::exp(s);
    double u = es * z + t;
    double e = std::exp(-std::abs(u));
    double y, ym;
    if (u >= 0.0) {
        y = 1.0 / (1.0 + e);
        ym = e * y;
    } else {
        ym = 1.0 / (1.0 + e);
        y = e * ym;
    }
    double pdf = es * y * ym / std::exp(lx + l1mx);
    if (y > kBelowOne) y = kBelowOne;
    zc[0] = z;
    zc[1] = es;
    zc[2] = ym;
    return {y, pdf};
}

// Backward mate of affine_warp_cached: every factor is either cached or
// arithmetic. y is the (possibly clamped) forward output; ym is its exact
// complement, so sigmoid'(u) = y*ym survives saturation.
inline double affine_backward_cached(double x, double y, double pdf, const double* zc, double gy,
                                     double glogpdf, double* gs, double* gt) {
    double z = zc[0], es = zc[1], ym = zc[2];
    double dsig = y * ym;
    double one_m_2y = 1.0 - 2.0 * y;
    *gs += glogpdf * (1.0 + one_m_2y * es * z) + gy * dsig * es * z;
    *gt += glogpdf * one_m_2y + gy * dsig;
    double dzdx = 1.0 / (x * (1.0 - x));
    return glogpdf * (one_m_2y * es - (1.0 - 2.0 * x)) * dzdx + gy * pdf;
}
}  // namespace

Warp affine_warp(double x, double s, double t, WarpStats* stats) {
    double zc[3];
    return affine_warp_cached(x, s, t, stats, zc);
}

double affine_unwarp(double y, double s, double t, double* pdf, WarpStats* stats) {
    y = affine_guard(y, stats);
    double u = logit(y);
    double z = (u - t) * std::exp(-s);
    double x = logistic(z);
    if (x > kBelowOne) x = kBelowOne;
    if (pdf) *pdf = std::exp(s + log_dsigmoid(u) - log_dsigmoid(z));
    return x;
}

double affine_warp_backward(double x, double s, double t, double gy, double glogpdf, double* gs,
                            double* gt) {
    x = affine_guard(x, nullptr);
    double z = logit(x);
    double es = std::exp(s);
    double u = es * z + t;
    double y = logistic(u);
    double dsig = std::exp(log_dsigmoid(u));  // sigmoid'(u)
    double one_m_2y = 1.0 - 2.0 * y;
    double pdf = std::exp(s + log_dsigmoid(u) - log_dsigmoid(z));
    *gs += glogpdf * (1.0 + one_m_2y * es * z) + gy * dsig * es * z;
    *gt += glogpdf * one_m_2y + gy * dsig;
    double dzdx = 1.0 / (x * (1.0 - x));
    return glogpdf * (one_m_2y * es - (1.0 - 2.0 * x)) * dzdx + gy * pdf;
}

// ---- coupling layer -------------------------------------------------------

int CouplingLayer::net_input_width() const {
    int per = blob_inputs ? blob_k : 1;
    return static_cast<int>(passed.size()) * per + cond_width;
}

int CouplingLayer::net_output_width() const {
    return static_cast<int>(warped.size()) * transform_param_width(kind, bins);
}

namespace {

// Fills cache.enc with [encode(passed dims of X), cond_enc].
void build_net_input(const CouplingLayer& layer, const Matrix& X, const Matrix& cond_enc,
                     Matrix& enc) {
    std::int64_t n = X.rows;
    int m = static_cast<int>(layer.passed.size());
    int per = layer.blob_inputs ? layer.blob_k : 1;
    int width = layer.net_input_width();
    if (layer.cond_width > 0 && (cond_enc.rows != n || cond_enc.cols != layer.cond_width))
        throw ShapeError("coupling: conditioning batch shape mismatch");
    enc.resize(n, width);
    for (std::int64_t r = 0; r < n; ++r) {
        const double* xr = X.row(r);
        double* er = enc.row(r);
        for (int j = 0; j < m; ++j) {
            double sv = xr[layer.passed[j]];
            if (layer.blob_inputs)
                one_blob(sv, layer.blob_k, er + j * per);
            else
                er[j] = sv;
        }
        if (layer.cond_width > 0)
            std::memcpy(er + m * per, cond_enc.row(r), sizeof(double) * layer.cond_width);
    }
}

}  // namespace

void coupling_forward(const CouplingLayer& layer, const Matrix& X, const Matrix& cond_enc,
                      Matrix& Y, std::vector<double>& logdet, LayerCache* cache,
                      WarpStats* stats) {
    std::int64_t n = X.rows;
    int nb = static_cast<int>(layer.warped.size());
    int k = layer.bins;
    LayerCache local;
    LayerCache& c = cache ? *cache : local;

    build_net_input(layer, X, cond_enc, c.enc);
    mlp_forward(layer.net, c.enc, c.raw, &c.net);

    Y = X;
    if (logdet.size() != static_cast<std::size_t>(n))
        throw ShapeError("coupling_forward: logdet size mismatch");

    c.alpha.resize(n, nb);
    c.pdf.resize(n, nb);
    c.xb.resize(n, nb);
    c.yb.resize(n, nb);
    c.bin.assign(static_cast<std::size_t>(n) * nb, 0);

    int pw = transform_param_width(layer.kind, k);
    switch (layer.kind) {
        case Transform::Pwl: {
            c.qa.resize(n, static_cast<std::int64_t>(nb) * k);
            for (std::int64_t r = 0; r < n; ++r) {
                const double* raw = c.raw.row(r);
                double* q = c.qa.row(r);
                double* yr = Y.row(r);
                double ld = 0.0;
                for (int j = 0; j < nb; ++j) {
                    softmax(raw + j * pw, k, q + j * k);
                    double x = guard01(yr[layer.warped[j]], stats);
                    Warp wr = pwl_warp(x, q + j * k, k);
                    int b = static_cast<int>(x * k);
                    if (b > k - 1) b = k - 1;
                    c.bin[r * nb + j] = b;
                    c.alpha.at(r, j) = x * k - b;
                    c.pdf.at(r, j) = wr.pdf;
                    c.xb.at(r, j) = x;
                    c.yb.at(r, j) = wr.y;
                    yr[layer.warped[j]] = wr.y;
                    ld += std::log(wr.pdf);
                }
                logdet[static_cast<std::size_t>(r)] += ld;
            }
            break;
        }
        case Transform::Pwq: {
            c.qa.resize(n, static_cast<std::int64_t>(nb) * k);
            c.qb.resize(n, static_cast<std::int64_t>(nb) * (k + 1));
            for (std::int64_t r = 0; r < n; ++r) {
                const double* raw = c.raw.row(r);
                double* w = c.qa.row(r);
                double* v = c.qb.row(r);
                double* yr = Y.row(r);
                double ld = 0.0;
                for (int j = 0; j < nb; ++j) {
                    pwq_normalize(raw + j * pw, raw + j * pw + k, k, w + j * k, v + j * (k + 1));
                    double x = guard01(yr[layer.warped[j]], stats);
                    Warp wr = pwq_warp(x, w + j * k, v + j * (k + 1), k);
                    double left;
                    int b = pwq_locate(x, w + j * k, k, &left);
                    c.bin[r * nb + j] = b;
                    c.alpha.at(r, j) = w[j * k + b] > 0.0 ? (x - left) / w[j * k + b] : 0.0;
                    c.pdf.at(r, j) = wr.pdf;
                    c.xb.at(r, j) = x;
                    c.yb.at(r, j) = wr.y;
                    yr[layer.warped[j]] = wr.y;
                    ld += std::log(wr.pdf);
                }
                logdet[static_cast<std::size_t>(r)] += ld;
            }
            break;
        }
        case Transform::Affine:
        case Transform::Additive: {
            bool additive = layer.kind == Transform::Additive;
            c.qa.resize(n, static_cast<std::int64_t>(nb) * 2);
            c.qb.resize(n, static_cast<std::int64_t>(nb) * 3);
            for (std::int64_t r = 0; r < n; ++r) {
                const double* raw = c.raw.row(r);
                double* st = c.qa.row(r);
                double* zc = c.qb.row(r);
                double* yr = Y.row(r);
                double ld = 0.0;
                for (int j = 0; j < nb; ++j) {
                    double s = additive ? 0.0 : raw[j * 2];
                    double t = additive ? raw[j] : raw[j * 2 + 1];
                    st[j * 2] = s;
                    st[j * 2 + 1] = t;
                    double x = yr[layer.warped[j]];
                    Warp wr = affine_warp_cached(x, s, t, stats, zc + j * 3);
                    c.pdf.at(r, j) = wr.pdf;
                    c.xb.at(r, j) = x == 0.0 ? kEpsDom : (x == 1.0 ? 1.0 - kEpsDom : x);
                    c.yb.at(r, j) = wr.y;
                    yr[layer.warped[j]] = wr.y;
                    ld += std::log(wr.pdf);
                }
                logdet[static_cast<std::size_t>(r)] += ld;
            }
            break;
        }
    }
}

void coupling_inverse(const CouplingLayer& layer, const Matrix& Y, const Matrix& cond_enc,
                      Matrix& X, std::vector<double>* logdet, WarpStats* stats) {
    std::int64_t n = Y.rows;
    int nb = static_cast<int>(layer.warped.size());
    int k = layer.bins;
    LayerCache c;
    // The passed dimensions are identical on both sides, so the parameter
    // network sees the same input as in the forward direction.
    build_net_input(layer, Y, cond_enc, c.enc);
    mlp_forward(layer.net, c.enc, c.raw, &c.net);

    X = Y;
    if (logdet && logdet->size() != static_cast<std::size_t>(n))
        throw ShapeError("coupling_inverse: logdet size mismatch");

    int pw = transform_param_width(layer.kind, k);
    std::vector<double> w(static_cast<std::size_t>(k)), v(static_cast<std::size_t>(k) + 1);
    for (std::int64_t r = 0; r < n; ++r) {
        const double* raw = c.raw.row(r);
        double* xr = X.row(r);
        double ld = 0.0;
        for (int j = 0; j < nb; ++j) {
            double y = guard01(xr[layer.warped[j]], stats);
            double pdf = 1.0, x = y;
            switch (layer.kind) {
                case Transform::Pwl:
                    softmax(raw + j * pw, k, w.data());
                    x = pwl_unwarp(y, w.data(), k, &pdf);
                    break;
                case Transform::Pwq:
                    pwq_normalize(raw + j * pw, raw + j * pw + k, k, w.data(), v.data());
                    x = pwq_unwarp(y, w.data(), v.data(), k, &pdf);
                    break;
                case Transform::Affine:
                    x = affine_unwarp(y, raw[j * 2], raw[j * 2 + 1], &pdf, stats);
                    break;
                case Transform::Additive:
                    x = affine_unwarp(y, 0.0, raw[j], &pdf, stats);
                    break;
            }
            xr[layer.warped[j]] = x;
            ld += std::log(pdf);
        }
        if (logdet) (*logdet)[static_cast<std::size_t>(r)] += ld;
    }
}

void coupling_backward(const CouplingLayer& layer, const Matrix& X,
                       [[maybe_unused]] const Matrix& cond_enc, const LayerCache& cache,
                       const std::vector<double>& coeff, const Matrix& gy, MlpGrad& acc,
                       Matrix& gx) {
    // cond_enc is part of the layer-call contract; the cached net input
    // already contains the encoded conditioning block.
    std::int64_t n = X.rows;
    int nb = static_cast<int>(layer.warped.size());
    int k = layer.bins;
    bool have_gy = gy.rows > 0;
    int pw = transform_param_width(layer.kind, k);

    gx.resize(n, X.cols);
    gx.zero();

    // Recycled across steps; rows are zeroed in place right before they are
    // filled so skipped (zero-coefficient) samples still contribute nothing.
    thread_local Matrix graw;
    graw.resize(n, cache.raw.cols);
    std::vector<double> gq(static_cast<std::size_t>(k)), gv(static_cast<std::size_t>(k) + 1);
    for (std::int64_t r = 0; r < n; ++r) {
        double g = coeff[static_cast<std::size_t>(r)];
        const double* gyr = have_gy ? gy.row(r) : nullptr;
        double* graw_r = graw.row(r);
        std::fill(graw_r, graw_r + graw.cols, 0.0);
        double* gxr = gx.row(r);
        for (int j = 0; j < nb; ++j) {
            double gyj = gyr ? gyr[layer.warped[j]] : 0.0;
            if (g == 0.0 && gyj == 0.0) continue;
            double x = cache.xb.at(r, j);
            switch (layer.kind) {
                case Transform::Pwl: {
                    const double* q = cache.qa.row(r) + j * k;
                    std::fill(gq.begin(), gq.end(), 0.0);
                    double gxb = pwl_warp_backward(x, q, k, gyj, g, gq.data());
                    softmax_backward(q, gq.data(), k, graw_r + j * pw);
                    gxr[layer.warped[j]] = gxb;
                    break;
                }
                case Transform::Pwq: {
                    const double* w = cache.qa.row(r) + j * k;
                    const double* v = cache.qb.row(r) + j * (k + 1);
                    std::fill(gq.begin(), gq.end(), 0.0);
                    std::fill(gv.begin(), gv.end(), 0.0);
                    double gxb = pwq_warp_backward(x, w, v, k, gyj, g, gq.data(), gv.data());
                    pwq_normalize_backward(w, v, k, gq.data(), gv.data(), graw_r + j * pw,
                                           graw_r + j * pw + k);
                    gxr[layer.warped[j]] = gxb;
                    break;
                }
                case Transform::Affine: {
                    double gs = 0.0, gt = 0.0;
                    const double* zc = cache.qb.row(r) + j * 3;
                    double gxb = affine_backward_cached(x, cache.yb.at(r, j), cache.pdf.at(r, j),
                                                        zc, gyj, g, &gs, &gt);
                    graw_r[j * 2] = gs;
                    graw_r[j * 2 + 1] = gt;
                    gxr[layer.warped[j]] = gxb;
                    break;
                }
                case Transform::Additive: {
                    double gs = 0.0, gt = 0.0;
                    const double* zc = cache.qb.row(r) + j * 3;
                    double gxb = affine_backward_cached(x, cache.yb.at(r, j), cache.pdf.at(r, j),
                                                        zc, gyj, g, &gs, &gt);
                    graw_r[j] = gt;
                    gxr[layer.warped[j]] = gxb;
                    break;
                }
            }
        }
    }

    thread_local Matrix genc;
    mlp_backward(layer.net, cache.net, graw, acc, &genc);

    // Route encoded-input gradients back to the passed coordinates and add
    // the pass-through term. Conditioning gradients are dropped.
    int m = static_cast<int>(layer.passed.size());
    int per = layer.blob_inputs ? layer.blob_k : 1;
    std::vector<double> dblob(static_cast<std::size_t>(layer.blob_k));
    for (std::int64_t r = 0; r < n; ++r) {
        const double* ge = genc.row(r);
        const double* xr = X.row(r);
        const double* gyr = have_gy ? gy.row(r) : nullptr;
        double* gxr = gx.row(r);
        for (int j = 0; j < m; ++j) {
            int dim = layer.passed[j];
            double gs = 0.0;
            if (layer.blob_inputs) {
                one_blob_grad(xr[dim], layer.blob_k, dblob.data());
                const double* slice = ge + j * per;
                for (int i = 0; i < layer.blob_k; ++i) gs += slice[i] * dblob[i];
            } else {
                gs = ge[j];
            }
            gxr[dim] = gs + (gyr ? gyr[dim] : 0.0);
        }
    }
}

// ---- direct-parameter 1D density -------------------------------------------

std::vector<double> DirectPdf1D::masses() const {
    std::vector<double> q(logits.size());
    softmax(logits.data(), bins(), q.data());
    return q;
}

double DirectPdf1D::pdf(double x) const {
    std::vector<double> q = masses();
    int k = bins();
    double xg = x == 1.0 ? kRightEdge : x;
    if (!(xg >= 0.0 && xg < 1.0)) throw DomainError("DirectPdf1D::pdf: x outside [0, 1]");
    int b = static_cast<int>(xg * k);
    if (b > k - 1) b = k - 1;
    return q[static_cast<std::size_t>(b)] * k;
}

double DirectPdf1D::sample(double u, double* pdf) const {
    std::vector<double> q = masses();
    return pwl_unwarp(u, q.data(), bins(), pdf);
}

void DirectPdf1D::grad_log_pdf(double x, double coeff, std::vector<double>& glogits) const {
    int k = bins();
    if (glogits.size() != logits.size()) glogits.assign(logits.size(), 0.0);
    std::vector<double> q = masses();
    double xg = x == 1.0 ? kRightEdge : x;
    int b = static_cast<int>(xg * k);
    if (b > k - 1) b = k - 1;
    // d log(q_b * k) / d logit_i = delta_ib - q_i
    for (int i = 0; i < k; ++i)
        glogits[static_cast<std::size_t>(i)] += coeff * ((i == b ? 1.0 : 0.0) - q[static_cast<std::size_t>(i)]);
}

}  // namespace flowmc
