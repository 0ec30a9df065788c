#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowmc/flow.hpp"
#include "flowmc/mlp.hpp"

namespace flowmc {

// Named tensor container. File layout: 8-byte magic "FLOWMC01", then per
// tensor: u64 name length, name bytes, u64 rank, u64 dims[rank], and the
// row-major float64 payload. All integers and floats are little-endian.
struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;

    std::uint64_t count() const;
};

struct TensorFile {
    std::vector<TensorRecord> tensors;

    void add(const std::string& name, std::vector<std::uint64_t> dims,
             const double* data);
    void add_scalar(const std::string& name, double v);
    const TensorRecord* find(const std::string& name) const;
    const TensorRecord& require(const std::string& name) const;
};

void save_tensors(const TensorFile& tf, const std::string& path);
TensorFile load_tensors(const std::string& path);

// Network parameters under `prefix` ("<prefix>/w0", "<prefix>/b0", ...).
void add_mlp_tensors(TensorFile& tf, const std::string& prefix, const Mlp& net);
void read_mlp_tensors(const TensorFile& tf, const std::string& prefix, Mlp& net);

// Full flow checkpoint: configuration header plus every layer's parameters.
void save_flow(const NormalizingFlow& flow, const std::string& path);
NormalizingFlow load_flow(const std::string& path);

}  // namespace flowmc
