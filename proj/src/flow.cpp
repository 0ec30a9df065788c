#include "flowmc/flow.hpp"

#include <cmath>

#include "flowmc/common.hpp"
#include "flowmc/encoding.hpp"

namespace flowmc {

const char* partition_name(Partition p) {
    return p == Partition::Halves ? "halves" : "even-odd";
}

Partition partition_from_name(const std::string& name) {
    if (name == "halves") return Partition::Halves;
    if (name == "even-odd" || name == "evenodd") return Partition::EvenOdd;
    throw ConfigError("unknown partition scheme: " + name);
}

void ConditioningSpec::normalize(const double* raw, double* out) const {
    for (std::size_t i = 0; i < features.size(); ++i) {
        const Feature& f = features[i];
        double span = f.hi - f.lo;
        double v = span > 0.0 ? (raw[i] - f.lo) / span : 0.0;
        out[i] = clamp01(v);
    }
}

void FlowConfig::validate() const {
    if (dim < 2) throw ConfigError("flow: dim must be >= 2");
    if (bins < 1) throw ConfigError("flow: bins must be >= 1");
    if (bins > 1024) throw ConfigError("flow: bins must be <= 1024");
    if (blob_k < 2) throw ConfigError("flow: blob_k must be >= 2");
    // Two alternating layers warp every dimension at least once, which is
    // what invertibility and a proper density need. Deeper stacks (4 layers
    // for dim >= 4) are still what the shipped configs use, since two layers
    // cannot route influence between every pair of dimensions.
    if (layers < 2)
        throw ConfigError(
            strfmt("flow: %d coupling layers leave one partition untouched; need at least 2",
                   layers));
    for (const auto& f : conditioning.features)
        if (!(f.hi > f.lo)) throw ConfigError("flow: conditioning range must have hi > lo");
}

std::vector<int> partition_warped(Partition p, int dim, int index) {
    std::vector<int> warped;
    bool swap = (index % 2) != 0;
    if (p == Partition::Halves) {
        int split = dim / 2;  // first `split` dims feed the net in even layers
        for (int d = 0; d < dim; ++d) {
            bool second_half = d >= split;
            if (second_half != swap) warped.push_back(d);
        }
    } else {
        // Even-odd interleave; dimensions 1, 3, ... (1-indexed) are warped
        // by the first layer.
        for (int d = 0; d < dim; ++d) {
            bool odd_1indexed = (d % 2) == 0;
            if (odd_1indexed != swap) warped.push_back(d);
        }
    }
    return warped;
}

std::int64_t NormalizingFlow::param_count() const {
    std::int64_t n = 0;
    for (const CouplingLayer& l : layers) n += l.net.param_count();
    return n;
}

int NormalizingFlow::cond_enc_width() const {
    int f = cfg.conditioning.count();
    return f * (cfg.one_blob ? cfg.blob_k : 1);
}

MlpSpec net_spec_for(const NetShape& shape, int input, int output) {
    if (!shape.hidden.empty()) {
        MlpSpec spec;
        spec.widths.push_back(input);
        for (int h : shape.hidden) spec.widths.push_back(h);
        spec.widths.push_back(output);
        spec.validate();
        return spec;
    }
    return u_shape_spec(input, shape.outermost, shape.levels, output);
}

NormalizingFlow build_flow(const FlowConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    NormalizingFlow flow;
    flow.cfg = cfg;
    int cond_width = flow.cond_enc_width();
    for (int l = 0; l < cfg.layers; ++l) {
        CouplingLayer layer;
        layer.kind = cfg.kind;
        layer.bins = cfg.bins;
        layer.warped = partition_warped(cfg.partition, cfg.dim, l);
        for (int d = 0; d < cfg.dim; ++d) {
            bool w = false;
            for (int x : layer.warped) w = w || (x == d);
            if (!w) layer.passed.push_back(d);
        }
        layer.blob_inputs = cfg.one_blob;
        layer.blob_k = cfg.blob_k;
        layer.cond_width = cond_width;
        MlpSpec spec = net_spec_for(cfg.net, layer.net_input_width(), layer.net_output_width());
        Rng rng(seed, kStreamInit + 256 * static_cast<std::uint64_t>(l + 1));
        layer.net = make_mlp(spec, rng);
        flow.layers.push_back(std::move(layer));
    }
    return flow;
}

void FlowGrad::init_like(const NormalizingFlow& flow) {
    layers.resize(flow.layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].init_like(flow.layers[i].net);
}

void FlowGrad::zero() {
    for (MlpGrad& g : layers) g.zero();
}

void FlowGrad::scale(double s) {
    for (MlpGrad& g : layers) g.scale(s);
}

double FlowGrad::sq_norm() const {
    double s = 0.0;
    for (const MlpGrad& g : layers) s += grad_sq_norm(g);
    return s;
}

void encode_conditioning(const NormalizingFlow& flow, const Matrix& cond_raw, Matrix& cond_enc) {
    int f = flow.cfg.conditioning.count();
    if (f == 0) {
        cond_enc.resize(0, 0);
        return;
    }
    if (cond_raw.cols != f)
        throw ShapeError(strfmt("flow: expected %d conditioning features, got %lld", f,
                                (long long)cond_raw.cols));
    int per = flow.cfg.one_blob ? flow.cfg.blob_k : 1;
    cond_enc.resize(cond_raw.rows, static_cast<std::int64_t>(f) * per);
    std::vector<double> norm(static_cast<std::size_t>(f));
    for (std::int64_t r = 0; r < cond_raw.rows; ++r) {
        flow.cfg.conditioning.normalize(cond_raw.row(r), norm.data());
        double* er = cond_enc.row(r);
        for (int j = 0; j < f; ++j) {
            if (flow.cfg.one_blob)
                one_blob(norm[static_cast<std::size_t>(j)], flow.cfg.blob_k, er + j * per);
            else
                er[j] = norm[static_cast<std::size_t>(j)];
        }
    }
}

void flow_log_pdf(const NormalizingFlow& flow, const Matrix& X, const Matrix& cond_raw,
                  std::vector<double>& logq, FlowCache* cache, Matrix* latent, WarpStats* stats) {
    if (X.cols != flow.cfg.dim)
        throw ShapeError(strfmt("flow: expected dim %d, got %lld", flow.cfg.dim, (long long)X.cols));
    std::int64_t n = X.rows;
    FlowCache local;
    FlowCache& c = cache ? *cache : local;
    encode_conditioning(flow, cond_raw, c.cond_enc);

    std::size_t nl = flow.layers.size();
    c.coords.resize(nl + 1);
    c.layers.resize(nl);
    c.coords[0] = X;
    logq.assign(static_cast<std::size_t>(n), 0.0);
    for (std::size_t l = 0; l < nl; ++l)
        coupling_forward(flow.layers[l], c.coords[l], c.cond_enc, c.coords[l + 1], logq,
                         &c.layers[l], stats);
    if (latent) *latent = c.coords[nl];
}

void flow_backward(const NormalizingFlow& flow, const FlowCache& cache,
                   const std::vector<double>& coeff, FlowGrad& acc) {
    if (acc.layers.empty()) acc.init_like(flow);
    std::size_t nl = flow.layers.size();
    Matrix gy;  // gradient wrt the output coordinates of the current layer
    Matrix gx;
    for (std::size_t i = 0; i < nl; ++i) {
        std::size_t l = nl - 1 - i;
        coupling_backward(flow.layers[l], cache.coords[l], cache.cond_enc, cache.layers[l], coeff,
                          gy, acc.layers[l], gx);
        gy = gx;
    }
}

void flow_sample(const NormalizingFlow& flow, const Matrix& U, const Matrix& cond_raw, Matrix& X,
                 std::vector<double>* logq, WarpStats* stats) {
    if (U.cols != flow.cfg.dim)
        throw ShapeError(strfmt("flow: expected dim %d, got %lld", flow.cfg.dim, (long long)U.cols));
    Matrix cond_enc;
    encode_conditioning(flow, cond_raw, cond_enc);
    std::int64_t n = U.rows;
    std::vector<double> ld;
    if (logq) {
        logq->assign(static_cast<std::size_t>(n), 0.0);
    }
    // Latent coordinates pass through the layers in reverse.
    Matrix cur = U;
    Matrix next;
    for (std::size_t i = flow.layers.size(); i-- > 0;) {
        coupling_inverse(flow.layers[i], cur, cond_enc, next, logq, stats);
        cur = next;
    }
    X = cur;
}

double flow_pdf1(const NormalizingFlow& flow, const double* x, const double* cond) {
    Matrix X(1, flow.cfg.dim);
    for (int d = 0; d < flow.cfg.dim; ++d) X.at(0, d) = x[d];
    Matrix C;
    int f = flow.cfg.conditioning.count();
    if (f > 0) {
        if (!cond) throw ShapeError("flow_pdf1: flow is conditioned but no features given");
        C.resize(1, f);
        for (int j = 0; j < f; ++j) C.at(0, j) = cond[j];
    }
    std::vector<double> logq;
    flow_log_pdf(flow, X, C, logq);
    return std::exp(logq[0]);
}

void flow_sample1(const NormalizingFlow& flow, Rng& rng, const double* cond, double* x,
                  double* pdf) {
    Matrix U(1, flow.cfg.dim);
    for (int d = 0; d < flow.cfg.dim; ++d) U.at(0, d) = rng.uniform();
    Matrix C;
    int f = flow.cfg.conditioning.count();
    if (f > 0) {
        if (!cond) throw ShapeError("flow_sample1: flow is conditioned but no features given");
        C.resize(1, f);
        for (int j = 0; j < f; ++j) C.at(0, j) = cond[j];
    }
    Matrix X;
    std::vector<double> logq;
    flow_sample(flow, U, C, X, pdf ? &logq : nullptr);
    for (int d = 0; d < flow.cfg.dim; ++d) x[d] = X.at(0, d);
    if (pdf) *pdf = std::exp(logq[0]);
}

void FlowOptimizer::init_like(const NormalizingFlow& flow) {
    layers.resize(flow.layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].init_like(flow.layers[i].net);
}

void flow_adam_step(NormalizingFlow& flow, const FlowGrad& grad, FlowOptimizer& opt) {
    if (opt.layers.empty()) opt.init_like(flow);
    // Validate the whole gradient first so a rejected step leaves every
    // layer untouched.
    for (const MlpGrad& g : grad.layers) {
        for (const Matrix& m : g.w)
            for (double v : m.a)
                if (!std::isfinite(v))
                    throw NonFiniteGradientError("flow_adam_step: non-finite gradient");
        for (const std::vector<double>& vb : g.b)
            for (double v : vb)
                if (!std::isfinite(v))
                    throw NonFiniteGradientError("flow_adam_step: non-finite gradient");
    }
    for (std::size_t i = 0; i < flow.layers.size(); ++i)
        adam_step(flow.layers[i].net, grad.layers[i], opt.layers[i], opt.adam);
}

}  // namespace flowmc
