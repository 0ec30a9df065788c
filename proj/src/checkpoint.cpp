#include "flowmc/checkpoint.hpp"

#include <cstdio>
#include <cstring>

#include "flowmc/common.hpp"

namespace flowmc {
namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'M', 'C', '0', '1'};
constexpr std::uint64_t kMaxName = 4096;
constexpr std::uint64_t kMaxRank = 8;
constexpr std::uint64_t kMaxCount = std::uint64_t{1} << 32;

struct File {
    std::FILE* f = nullptr;
    ~File() {
        if (f) std::fclose(f);
    }
};

void write_u64(std::FILE* f, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    if (std::fwrite(b, 1, 8, f) != 8) throw ParamError("checkpoint: write failed");
}

bool read_u64(std::FILE* f, std::uint64_t& v) {
    unsigned char b[8];
    std::size_t got = std::fread(b, 1, 8, f);
    if (got == 0) return false;
    if (got != 8) throw ParamError("checkpoint: truncated integer");
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
}

void write_f64(std::FILE* f, const double* data, std::uint64_t n) {
    // Doubles are stored little-endian; this code targets little-endian
    // hosts and round-trips bit-exactly there.
    if (n && std::fwrite(data, sizeof(double), n, f) != n)
        throw ParamError("checkpoint: write failed");
}

}  // namespace

std::uint64_t TensorRecord::count() const {
    std::uint64_t c = 1;
    for (std::uint64_t d : dims) c *= d;
    return c;
}

void TensorFile::add(const std::string& name, std::vector<std::uint64_t> dims,
                     const double* data) {
    TensorRecord r;
    r.name = name;
    r.dims = std::move(dims);
    r.data.assign(data, data + r.count());
    tensors.push_back(std::move(r));
}

void TensorFile::add_scalar(const std::string& name, double v) { add(name, {1}, &v); }

const TensorRecord* TensorFile::find(const std::string& name) const {
    for (const TensorRecord& r : tensors)
        if (r.name == name) return &r;
    return nullptr;
}

const TensorRecord& TensorFile::require(const std::string& name) const {
    const TensorRecord* r = find(name);
    if (!r) throw ParamError("checkpoint: missing tensor " + name);
    return *r;
}

void save_tensors(const TensorFile& tf, const std::string& path) {
    File file;
    file.f = std::fopen(path.c_str(), "wb");
    if (!file.f) throw ParamError("checkpoint: cannot open " + path + " for writing");
    if (std::fwrite(kMagic, 1, 8, file.f) != 8) throw ParamError("checkpoint: write failed");
    for (const TensorRecord& r : tf.tensors) {
        write_u64(file.f, r.name.size());
        if (!r.name.empty() && std::fwrite(r.name.data(), 1, r.name.size(), file.f) != r.name.size())
            throw ParamError("checkpoint: write failed");
        write_u64(file.f, r.dims.size());
        for (std::uint64_t d : r.dims) write_u64(file.f, d);
        write_f64(file.f, r.data.data(), r.data.size());
    }
    if (std::fflush(file.f) != 0) throw ParamError("checkpoint: flush failed for " + path);
}

TensorFile load_tensors(const std::string& path) {
    File file;
    file.f = std::fopen(path.c_str(), "rb");
    if (!file.f) throw ParamError("checkpoint: cannot open " + path);
    char magic[8];
    if (std::fread(magic, 1, 8, file.f) != 8 || std::memcmp(magic, kMagic, 8) != 0)
        throw ParamError("checkpoint: bad magic in " + path);
    TensorFile tf;
    std::uint64_t name_len;
    while (read_u64(file.f, name_len)) {
        long offset = std::ftell(file.f);
        if (name_len > kMaxName)
            throw ParamError(strfmt("checkpoint: name length %llu at offset %ld exceeds limit",
                                    (unsigned long long)name_len, offset));
        TensorRecord r;
        r.name.resize(name_len);
        if (name_len && std::fread(r.name.data(), 1, name_len, file.f) != name_len)
            throw ParamError(strfmt("checkpoint: truncated name at offset %ld", offset));
        std::uint64_t rank;
        if (!read_u64(file.f, rank))
            throw ParamError("checkpoint: truncated rank for tensor " + r.name);
        if (rank > kMaxRank)
            throw ParamError(strfmt("checkpoint: tensor %s rank %llu exceeds limit", r.name.c_str(),
                                    (unsigned long long)rank));
        std::uint64_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            std::uint64_t d;
            if (!read_u64(file.f, d))
                throw ParamError("checkpoint: truncated dims for tensor " + r.name);
            if (d == 0 || (count != 0 && d > kMaxCount / std::max<std::uint64_t>(count, 1)))
                throw ParamError(strfmt("checkpoint: tensor %s dimension overflow", r.name.c_str()));
            r.dims.push_back(d);
            count *= d;
        }
        r.data.resize(count);
        if (count && std::fread(r.data.data(), sizeof(double), count, file.f) != count)
            throw ParamError(strfmt("checkpoint: truncated payload for tensor %s (offset %ld)",
                                    r.name.c_str(), offset));
        tf.tensors.push_back(std::move(r));
    }
    return tf;
}

void add_mlp_tensors(TensorFile& tf, const std::string& prefix, const Mlp& net) {
    for (std::size_t i = 0; i < net.w.size(); ++i) {
        tf.add(strfmt("%s/w%zu", prefix.c_str(), i),
               {static_cast<std::uint64_t>(net.w[i].rows), static_cast<std::uint64_t>(net.w[i].cols)},
               net.w[i].a.data());
        tf.add(strfmt("%s/b%zu", prefix.c_str(), i), {net.b[i].size()}, net.b[i].data());
    }
}

void read_mlp_tensors(const TensorFile& tf, const std::string& prefix, Mlp& net) {
    for (std::size_t i = 0; i < net.w.size(); ++i) {
        const TensorRecord& rw = tf.require(strfmt("%s/w%zu", prefix.c_str(), i));
        if (rw.dims.size() != 2 || rw.dims[0] != static_cast<std::uint64_t>(net.w[i].rows) ||
            rw.dims[1] != static_cast<std::uint64_t>(net.w[i].cols))
            throw ParamError("checkpoint: shape mismatch for tensor " + rw.name);
        net.w[i].a = rw.data;
        const TensorRecord& rb = tf.require(strfmt("%s/b%zu", prefix.c_str(), i));
        if (rb.dims.size() != 1 || rb.dims[0] != net.b[i].size())
            throw ParamError("checkpoint: shape mismatch for tensor " + rb.name);
        net.b[i] = rb.data;
    }
}

void save_flow(const NormalizingFlow& flow, const std::string& path) {
    TensorFile tf;
    const FlowConfig& c = flow.cfg;
    double meta[8] = {static_cast<double>(c.dim),
                      static_cast<double>(c.layers),
                      static_cast<double>(static_cast<int>(c.kind)),
                      static_cast<double>(c.bins),
                      static_cast<double>(static_cast<int>(c.partition)),
                      c.one_blob ? 1.0 : 0.0,
                      static_cast<double>(c.blob_k),
                      0.0};
    tf.add("flow/meta", {8}, meta);
    std::vector<double> shape;
    shape.push_back(c.net.ushape && c.net.hidden.empty() ? 1.0 : 0.0);
    shape.push_back(c.net.outermost);
    shape.push_back(c.net.levels);
    for (int h : c.net.hidden) shape.push_back(h);
    tf.add("flow/net_shape", {shape.size()}, shape.data());
    for (int i = 0; i < c.conditioning.count(); ++i) {
        const auto& f = c.conditioning.features[static_cast<std::size_t>(i)];
        double range[2] = {f.lo, f.hi};
        tf.add(strfmt("flow/cond/%02d/%s", i, f.name.c_str()), {2}, range);
    }
    for (std::size_t l = 0; l < flow.layers.size(); ++l)
        add_mlp_tensors(tf, strfmt("layer%zu", l), flow.layers[l].net);
    save_tensors(tf, path);
}

NormalizingFlow load_flow(const std::string& path) {
    TensorFile tf = load_tensors(path);
    const TensorRecord& meta = tf.require("flow/meta");
    if (meta.data.size() < 7) throw ParamError("checkpoint: flow/meta too short");
    FlowConfig cfg;
    cfg.dim = static_cast<int>(meta.data[0]);
    cfg.layers = static_cast<int>(meta.data[1]);
    cfg.kind = static_cast<Transform>(static_cast<int>(meta.data[2]));
    cfg.bins = static_cast<int>(meta.data[3]);
    cfg.partition = static_cast<Partition>(static_cast<int>(meta.data[4]));
    cfg.one_blob = meta.data[5] != 0.0;
    cfg.blob_k = static_cast<int>(meta.data[6]);
    const TensorRecord& shape = tf.require("flow/net_shape");
    cfg.net.ushape = shape.data[0] != 0.0;
    cfg.net.outermost = static_cast<int>(shape.data[1]);
    cfg.net.levels = static_cast<int>(shape.data[2]);
    for (std::size_t i = 3; i < shape.data.size(); ++i)
        cfg.net.hidden.push_back(static_cast<int>(shape.data[i]));
    for (const TensorRecord& r : tf.tensors) {
        if (r.name.rfind("flow/cond/", 0) != 0) continue;
        ConditioningSpec::Feature f;
        f.name = r.name.substr(r.name.find('/', 10) + 1);
        if (r.data.size() != 2) throw ParamError("checkpoint: bad conditioning range " + r.name);
        f.lo = r.data[0];
        f.hi = r.data[1];
        cfg.conditioning.features.push_back(std::move(f));
    }
    NormalizingFlow flow = build_flow(cfg, 0);
    for (std::size_t l = 0; l < flow.layers.size(); ++l)
        read_mlp_tensors(tf, strfmt("layer%zu", l), flow.layers[l].net);
    return flow;
}

}  // namespace flowmc
