#ifndef IOSVD_TOY_HPP
#define IOSVD_TOY_HPP

#include <cstdint>
#include <random>
#include <vector>

#include "iosvd/netmodel.hpp"

namespace iosvd {

// Dense MLP shape: input -> hidden... -> vocab, activation between linears.
struct ToyShape {
    Index input_dim = 48;
    std::vector<Index> hidden{32, 32};
    Index vocab_size = 24;
    Index tokens = 256;
    Activation activation = Activation::tanh;
    bool bias = true;
    double teacher_shift = 0.5;  // relative size of the teacher head perturbation

    void validate() const;
};

struct ToyData {
    NetworkSpec net;
    CalibrationBatch batch;
};

// The one generator all randomness is drawn from.
using Rng = std::mt19937_64;

// Weights have a decaying singular spectrum and inputs an anisotropic
// covariance, so whitening has something to work with. Targets are sampled
// from a teacher that shares the student's hidden layers but has a
// perturbed head, which keeps calibration gradients well away from zero.
ToyData generate_toy(std::uint64_t seed, const ToyShape& shape = {});

}  // namespace iosvd

#endif
