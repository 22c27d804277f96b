#pragma once

#include <cstdint>
#include <vector>

#include "p2rec/dataset.hpp"
#include "p2rec/tensor.hpp"

namespace p2rec {

// Latent-category prior: k-means centroids over trained item embeddings plus
// the item -> group map.
struct GroupModel {
    int32_t k = 0;
    Tensor<float> centroids;          // k x d
    std::vector<int32_t> assignment;  // item -> group
    double sse = 0.0;

    int32_t group_of(int32_t item) const { return assignment[item]; }
};

struct KMeansOptions {
    int max_iters = 300;
    int restarts = 5;
    // Filled per restart for the SSE-monotonicity property checks.
    std::vector<std::vector<double>>* sse_trace = nullptr;
};

// Lloyd iterations with k-means++ seeding until the assignment reaches a
// fixpoint; empty clusters are repaired by splitting the largest cluster at
// its farthest point. Best of `restarts` runs by final SSE.
GroupModel fit_kmeans(const Tensor<float>& embeddings, int32_t k, uint64_t seed,
                      const KMeansOptions& opts = {});

// Per-user normalized interaction-frequency vectors over the K groups,
// counted on the train split only. Rows sum to 1 for every included user.
struct PreferenceTargets {
    int32_t k = 0;
    Tensor<float> targets;  // num_users x k
    int64_t excluded_users = 0;
};

PreferenceTargets build_targets(const InteractionDataset& data, const GroupModel& gm,
                                bool count_distinct = false);

// Similarity of two labelings, chance-corrected; 1.0 means identical partitions.
double adjusted_rand_index(const std::vector<int32_t>& a, const std::vector<int32_t>& b);

}  // namespace p2rec
