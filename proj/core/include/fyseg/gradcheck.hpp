#pragma once

#include <functional>
#include <string>
#include <vector>

namespace fyseg {

struct GradCheckReport {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t worst_coord = 0;
    double tolerance = 0.0;
    bool passed = false;
};

// Central finite differences against an analytic gradient. `loss` must be a
// pure function of the coordinate vector; callers are responsible for
// choosing base points away from activation/pooling kinks (see the
// *_kink_margin helpers).
GradCheckReport grad_check(const std::string& name,
                           const std::function<double(const std::vector<double>&)>& loss,
                           const std::vector<double>& base_coords,
                           const std::vector<double>& analytic_grad,
                           double tolerance, double step = 1e-5);

// Canned fragments: conv, conv+leaky stack, pool/unpool sandwich, detector
// head with its training loss, segmenter with its weighted cross-entropy.
// Inputs are resampled until kink margins exceed 1e-3.
std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed);

}  // namespace fyseg
