#pragma once

#include <string>

#include "m2m/evalbench.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

/// Accuracy-vs-compute scatter; efficient records drawn highlighted with the
/// frontier polyline.
std::string pareto_svg(const ParetoReport& report);

/// Patch-by-expert probability heatmap of one router snapshot.
std::string router_heatmap_svg(const Tensor& probs, const std::string& title);

}  // namespace m2m
