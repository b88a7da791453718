#pragma once

#include <cstdint>

#include "scl/net.hpp"

namespace scl {

// Central-difference verification of the hand-derived adjoints. The
// objective is the inner product of the forward output with a fixed random
// probe, so every gradient component is exercised. Errors are relative with
// an absolute floor: |fd - analytic| / max(1e-10, |fd| + |analytic|).
struct LayerGradCheck {
  double kernel = 0.0;
  double base_weight = 0.0;
  double shape_weight = 0.0;
  double bias = 0.0;
  double input = 0.0;

  double worst() const;
};

// One random shapeconv layer instance (random geometry, perturbed weights).
LayerGradCheck gradcheck_shapeconv_layer(std::uint64_t seed, double eps = 1e-5);

// Whole micro-network check (a few hundred parameters): finite differences
// of the probe objective against backward() for every trainable tensor.
// Returns the worst relative error.
double gradcheck_network(std::uint64_t seed, double eps, LayerKind kind);

}  // namespace scl
