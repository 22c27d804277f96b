#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p2rec/common.hpp"

namespace p2rec {

// Users and items are dense 0-based indices. Each sequence is time-ordered and
// at least 3 long; the leave-one-out split is positional: last item = test,
// penultimate = valid, rest = train.
struct InteractionDataset {
    int32_t num_users = 0;
    int32_t num_items = 0;
    std::vector<std::vector<int32_t>> sequences;
    // Inverse of the dense reindexing, for report readability.
    std::vector<std::string> user_labels;
    std::vector<std::string> item_labels;
    // Users dropped at ingestion for having fewer than 3 interactions.
    int64_t dropped_users = 0;

    std::span<const int32_t> train_items(int32_t u) const {
        const auto& s = sequences[u];
        return {s.data(), s.size() - 2};
    }
    int32_t valid_item(int32_t u) const { return sequences[u][sequences[u].size() - 2]; }
    int32_t test_item(int32_t u) const { return sequences[u].back(); }

    int64_t total_interactions() const {
        int64_t n = 0;
        for (const auto& s : sequences) n += static_cast<int64_t>(s.size());
        return n;
    }

    uint64_t content_hash() const;
    void validate() const;
};

// Loads a UTF-8 TSV of (user_id, item_id, timestamp) rows. A header line is
// auto-detected by a non-numeric timestamp field. Rows are sorted per user by
// timestamp ascending with ties broken by file order; users with fewer than 3
// interactions are dropped and counted.
InteractionDataset load_interactions(const std::string& path);

struct SyntheticSpec {
    int32_t num_users = 200;
    int32_t num_items = 100;
    int32_t num_categories = 8;   // K_true
    double alpha = 50.0;          // sharpness of each user's category preference
    int32_t seq_len_min = 8;
    int32_t seq_len_max = 24;
    double corruption_rate = 0.0;  // fraction of planted labels flipped in the corrupted copy
    uint64_t seed = 1;
};

struct SyntheticData {
    InteractionDataset data;
    std::vector<int32_t> planted_labels;    // item -> true category
    std::vector<int32_t> corrupted_labels;  // planted with corruption_rate * N flips
};

// Items are assigned round-robin to categories, so every category owns at
// least one item when num_items >= num_categories. Each user samples a
// preferred category, forms the preference weights (alpha on the preferred
// category, 1 elsewhere), and draws items category-first. Deterministic in
// spec.seed.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace p2rec
