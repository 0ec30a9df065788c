#pragma once

#include <cstdint>

namespace flowmc {

// Fixed stream ids. Every component draws from its own stream of the same
// seed so that adding draws in one component never perturbs another.
enum : std::uint64_t {
    kStreamInit = 1,       // parameter initialization
    kStreamSampler = 2,    // proposal draws
    kStreamTrainer = 3,    // minibatch selection
    kStreamSelection = 4,  // technique selection coin flips
    kStreamEval = 5,       // held-out evaluation draws
};

// Counter-based generator (Philox 4x32-10). State is a key derived from
// (seed, stream) plus a 64-bit block counter; identical (seed, stream)
// sequences are reproducible regardless of what other streams consumed.
class Rng {
public:
    Rng(std::uint64_t seed, std::uint64_t stream);

    std::uint32_t next_u32();
    std::uint64_t next_u64();

    // Uniform in [0, 1) with 53 random bits.
    double uniform();

    // Standard normal via Box-Muller; caches the second variate.
    double normal();

    // Uniform integer in [0, n), unbiased. n must be > 0.
    std::uint64_t below(std::uint64_t n);

private:
    void refill();

    std::uint32_t key_[2];
    std::uint64_t counter_ = 0;
    std::uint32_t block_[4];
    int block_pos_ = 4;
    double spare_normal_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace flowmc
