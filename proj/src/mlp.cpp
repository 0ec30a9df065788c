#include "flowmc/mlp.hpp"

#include <cmath>
#include <cstring>

#include "flowmc/common.hpp"

namespace flowmc {

int MlpSpec::fan_in(int layer) const {
    int f = widths[layer - 1];
    for (const SkipLink& s : skips)
        if (s.dst == layer) f += widths[s.src];
    return f;
}

void MlpSpec::validate() const {
    if (widths.size() < 2) throw ConfigError("network needs an input and an output width");
    for (int w : widths)
        if (w < 1) throw ConfigError("network widths must be positive");
    int n = layer_count();
    for (const SkipLink& s : skips) {
        if (s.src < 0 || s.dst < 1 || s.src >= s.dst || s.dst > n)
            throw ConfigError(strfmt("skip link %d -> %d is not a forward link", s.src, s.dst));
    }
}

MlpSpec u_shape_spec(int input, int outermost, int levels, int output) {
    if (levels < 1) throw ConfigError("u_shape_spec: levels must be >= 1");
    if (outermost >> (levels - 1) < 1)
        throw ConfigError("u_shape_spec: outermost width too small for the nesting depth");
    MlpSpec spec;
    spec.widths.push_back(input);
    spec.widths.push_back(outermost);  // input adapter
    for (int l = 0; l < levels; ++l) spec.widths.push_back(outermost >> l);
    for (int l = levels - 1; l >= 0; --l) spec.widths.push_back(outermost >> l);
    spec.widths.push_back(output);  // linear output adapter
    // Mirrored symmetric-width layers; layer 1 is the adapter, the symmetric
    // stack occupies layers 2 .. 2*levels+1.
    for (int i = 1; i < levels; ++i)
        spec.skips.push_back({1 + i, 1 + (2 * levels + 1 - i)});
    spec.validate();
    return spec;
}

std::int64_t Mlp::param_count() const {
    std::int64_t n = 0;
    for (std::size_t i = 0; i < w.size(); ++i) n += w[i].size() + static_cast<std::int64_t>(b[i].size());
    return n;
}

Mlp make_mlp(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    Mlp net;
    net.spec = spec;
    int n = spec.layer_count();
    net.w.resize(n);
    net.b.resize(n);
    for (int layer = 1; layer <= n; ++layer) {
        int fi = spec.fan_in(layer);
        int fo = spec.widths[layer];
        net.w[layer - 1].resize(fi, fo);
        net.b[layer - 1].assign(fo, 0.0);
        if (layer == n) continue;  // final layer stays zero: identity start
        double sd = std::sqrt(2.0 / (fi + fo));
        for (double& v : net.w[layer - 1].a) v = sd * rng.normal();
    }
    return net;
}

void MlpGrad::init_like(const Mlp& net) {
    w.resize(net.w.size());
    b.resize(net.b.size());
    for (std::size_t i = 0; i < net.w.size(); ++i) {
        w[i].resize(net.w[i].rows, net.w[i].cols);
        w[i].zero();  // resize keeps same-size contents; a fresh grad must not
        b[i].assign(net.b[i].size(), 0.0);
    }
}

void MlpGrad::zero() {
    for (Matrix& m : w) m.zero();
    for (std::vector<double>& v : b) v.assign(v.size(), 0.0);
}

void MlpGrad::scale(double s) {
    for (Matrix& m : w)
        for (double& v : m.a) v *= s;
    for (std::vector<double>& vb : b)
        for (double& v : vb) v *= s;
}

namespace {

void round_f32(Matrix& m) {
    for (double& v : m.a) v = static_cast<float>(v);
}

// Builds the concatenated input of `layer` from the previous output and any
// skip sources. outputs[0] is the network input.
void gather_input(const MlpSpec& spec, const std::vector<const Matrix*>& outputs, int layer,
                  Matrix& in) {
    const Matrix& prev = *outputs[layer - 1];
    int fi = spec.fan_in(layer);
    if (fi == prev.cols) {
        in = prev;
        return;
    }
    in.resize(prev.rows, fi);
    thread_local std::vector<const Matrix*> parts;
    parts.clear();
    parts.push_back(&prev);
    for (const SkipLink& s : spec.skips)
        if (s.dst == layer) parts.push_back(outputs[s.src]);
    for (std::int64_t r = 0; r < prev.rows; ++r) {
        double* dst = in.row(r);
        for (const Matrix* p : parts) {
            std::memcpy(dst, p->row(r), sizeof(double) * p->cols);
            dst += p->cols;
        }
    }
}

}  // namespace

void mlp_forward(const Mlp& net, const Matrix& x, Matrix& y, MlpCache* cache) {
    const MlpSpec& spec = net.spec;
    if (x.cols != spec.widths[0])
        throw ShapeError(strfmt("mlp_forward: input width %lld, expected %d", (long long)x.cols,
                                spec.widths[0]));
    int n = spec.layer_count();
    MlpCache local;
    MlpCache& c = cache ? *cache : local;
    c.in.resize(n);
    c.out.resize(n);

    thread_local std::vector<const Matrix*> outputs;
    outputs.assign(static_cast<std::size_t>(n) + 1, nullptr);
    outputs[0] = &x;
    for (int layer = 1; layer <= n; ++layer) {
        Matrix& in = c.in[layer - 1];
        gather_input(spec, outputs, layer, in);
        Matrix& out = c.out[layer - 1];
        matmul(in, net.w[layer - 1], out);
        const std::vector<double>& bias = net.b[layer - 1];
        bool relu = layer < n || spec.relu_output;
        for (std::int64_t r = 0; r < out.rows; ++r) {
            double* row = out.row(r);
            for (std::int64_t j = 0; j < out.cols; ++j) {
                row[j] += bias[j];
                if (relu && row[j] < 0.0) row[j] = 0.0;
            }
        }
        if (net.emulate_f32) round_f32(out);
        outputs[layer] = &out;
    }
    y = c.out[n - 1];
}

void mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& g_out, MlpGrad& acc,
                  Matrix* g_in) {
    const MlpSpec& spec = net.spec;
    int n = spec.layer_count();
    if (acc.w.empty()) acc.init_like(net);
    if (g_out.rows != cache.out[n - 1].rows || g_out.cols != cache.out[n - 1].cols)
        throw ShapeError("mlp_backward: output gradient shape mismatch");

    // Gradient with respect to each layer output; slot 0 is the input.
    // Recycled per thread: a zero-row matrix means "no gradient yet".
    thread_local std::vector<Matrix> gout;
    gout.resize(static_cast<std::size_t>(n) + 1);
    for (Matrix& m : gout) m.resize(0, 0);
    gout[static_cast<std::size_t>(n)] = g_out;
    if (g_in) {
        g_in->resize(cache.in[0].rows, spec.widths[0]);
        g_in->zero();
    }

    thread_local Matrix gz, gin_full;
    for (int layer = n; layer >= 1; --layer) {
        const Matrix& out = cache.out[layer - 1];
        const Matrix& in = cache.in[layer - 1];
        Matrix& g = gout[layer];
        if (g.rows == 0) {
            // No path from this layer to the loss (possible only with
            // degenerate specs); skip it.
            continue;
        }
        bool relu = layer < n || spec.relu_output;
        if (relu) {
            gz = g;
            for (std::int64_t i = 0; i < gz.size(); ++i)
                if (out.a[static_cast<std::size_t>(i)] <= 0.0) gz.a[static_cast<std::size_t>(i)] = 0.0;
        } else {
            gz = g;
        }
        // Parameter gradients.
        matmul_tn(in, gz, acc.w[layer - 1], true);
        std::vector<double>& gb = acc.b[layer - 1];
        for (std::int64_t r = 0; r < gz.rows; ++r) {
            const double* row = gz.row(r);
            for (std::int64_t j = 0; j < gz.cols; ++j) gb[static_cast<std::size_t>(j)] += row[j];
        }
        // Input gradient, split across the direct input and skip sources.
        matmul_nt(gz, net.w[layer - 1], gin_full);
        thread_local std::vector<std::pair<int, int>> parts;  // (target layer output, width)
        parts.clear();
        parts.emplace_back(layer - 1, spec.widths[layer - 1]);
        for (const SkipLink& s : spec.skips)
            if (s.dst == layer) parts.emplace_back(s.src, spec.widths[s.src]);
        std::int64_t col = 0;
        for (auto [target, width] : parts) {
            Matrix* dst;
            if (target == 0) {
                dst = g_in;
                if (!dst) {
                    col += width;
                    continue;
                }
            } else {
                dst = &gout[target];
                if (dst->rows == 0) {
                    dst->resize(gz.rows, width);
                }
            }
            for (std::int64_t r = 0; r < gz.rows; ++r) {
                const double* src = gin_full.row(r) + col;
                double* drow = dst->row(r);
                for (int j = 0; j < width; ++j) drow[j] += src[j];
            }
            col += width;
        }
    }
}

void AdamState::init_like(const Mlp& net) {
    m_w.resize(net.w.size());
    v_w.resize(net.w.size());
    m_b.resize(net.b.size());
    v_b.resize(net.b.size());
    for (std::size_t i = 0; i < net.w.size(); ++i) {
        m_w[i].resize(net.w[i].rows, net.w[i].cols);
        m_w[i].zero();
        v_w[i].resize(net.w[i].rows, net.w[i].cols);
        v_w[i].zero();
        m_b[i].assign(net.b[i].size(), 0.0);
        v_b[i].assign(net.b[i].size(), 0.0);
    }
    t = 0;
}

namespace {

void adam_update(double* p, double* m, double* v, const double* g, std::int64_t n, double lr,
                 const AdamConfig& cfg, double c1, double c2) {
    for (std::int64_t i = 0; i < n; ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        double mh = m[i] / c1;
        double vh = v[i] / c2;
        p[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
}

}  // namespace

void adam_step(Mlp& net, const MlpGrad& grad, AdamState& state, const AdamConfig& cfg) {
    if (state.m_w.empty()) state.init_like(net);
    for (std::size_t i = 0; i < grad.w.size(); ++i) {
        for (double g : grad.w[i].a)
            if (!std::isfinite(g)) throw NonFiniteGradientError("adam_step: non-finite weight gradient");
        for (double g : grad.b[i])
            if (!std::isfinite(g)) throw NonFiniteGradientError("adam_step: non-finite bias gradient");
    }
    state.t += 1;
    double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < net.w.size(); ++i) {
        adam_update(net.w[i].a.data(), state.m_w[i].a.data(), state.v_w[i].a.data(),
                    grad.w[i].a.data(), net.w[i].size(), cfg.lr, cfg, c1, c2);
        adam_update(net.b[i].data(), state.m_b[i].data(), state.v_b[i].data(), grad.b[i].data(),
                    static_cast<std::int64_t>(net.b[i].size()), cfg.lr, cfg, c1, c2);
    }
    if (net.emulate_f32) quantize_f32(net);
}

double grad_sq_norm(const MlpGrad& grad) {
    double s = 0.0;
    for (const Matrix& m : grad.w)
        for (double v : m.a) s += v * v;
    for (const std::vector<double>& vb : grad.b)
        for (double v : vb) s += v * v;
    return s;
}

void quantize_f32(Mlp& net) {
    for (Matrix& m : net.w) round_f32(m);
    for (std::vector<double>& vb : net.b)
        for (double& v : vb) v = static_cast<float>(v);
}

}  // namespace flowmc
