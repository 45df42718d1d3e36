#pragma once

// Baseline attachments for the toy backbone. Each attach_* replaces any
// previous attachment of the same kind; the backbone itself is untouched.

#include <cstdint>

#include "flownav/gnnlayer.hpp"
#include "flownav/model.hpp"

namespace flownav::peft {

// A: N(0, 1/r), B: zero, so the wrapped projections start as no-ops.
void attach_lora(model::Model& m, std::size_t rank, double alpha, std::uint64_t seed);
// Virtual key/value rows, N(0, 0.02).
void attach_prefix(model::Model& m, std::size_t n_virtual, std::uint64_t seed);
// down: N(0, 0.02), up: zero, so every adapter starts as the identity.
void attach_adapter(model::Model& m, std::size_t bottleneck, std::uint64_t seed);

// Virtual-token count whose prefix size is closest to the navigation layer's
// parameter count: max(1, round(gnn_count / (2 · n_layers · d_model))).
std::size_t matched_prefix_tokens(const model::ModelConfig& cfg, gnn::Kind kind);

}  // namespace flownav::peft
