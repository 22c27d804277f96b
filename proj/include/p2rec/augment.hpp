#pragma once

#include <cstdint>
#include <vector>

#include "p2rec/pregroup.hpp"
#include "p2rec/tensor.hpp"

namespace p2rec {

// Per-item knowledge embeddings and inferred category distributions, produced
// by running every item through the fine-tuned proxy as a one-item prompt.
struct EnhancedItemSet {
    Tensor<float> knowledge;      // H: N x d_model
    Tensor<float> distributions;  // G: N x K, rows on the simplex

    int32_t num_items() const { return static_cast<int32_t>(knowledge.rows()); }
};

enum class FusionMode { gate_concat, gate_scalar, sum };

// Gate override: `learned` uses the sigmoid gate; the two saturation modes
// bypass it exactly, reproducing the pure id / pure knowledge paths.
enum class GateOverride { learned, always_id, always_knowledge };

struct FusionConfig {
    FusionMode mode = FusionMode::gate_concat;
    GateOverride gate = GateOverride::learned;
    // Whether the fused table also replaces the tied output embeddings.
    bool tie_output = true;
};

struct CategoryAgreement {
    double c1 = 0;  // argmax of G_v equals the pre-grouping index
    double c2 = 0;  // pre-grouping index in top-3 of G_v but not argmax
    double c3 = 0;  // remainder
};

// Ties in G_v are broken toward the lowest group index, both for the argmax
// and for top-n membership.
CategoryAgreement category_agreement(const Tensor<float>& distributions, const GroupModel& gm,
                                     int top_n = 3);

}  // namespace p2rec
