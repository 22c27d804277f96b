#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "p2rec/dataset.hpp"
#include "p2rec/tensor.hpp"

namespace p2rec {

// Single-relevant-item forms with ideal DCG = 1. rank is 1-based.
double hr_at_k(int64_t rank, int k);
double ndcg_at_k(int64_t rank, int k);

// Pessimistic tie handling: every non-target item scoring >= the target
// counts as ranked ahead, so reported metrics are a lower bound.
int64_t pessimistic_rank(const float* scores, size_t n, int32_t target);

// Batched scorer: histories -> [U x N] score matrix. masks[i] lists items
// whose scores row i must set to -inf; callers build masks from the history
// minus the ranking target, so a repeated target is never masked out.
using BatchScorer = std::function<Tensor<float>(
    const std::vector<std::vector<int32_t>>& histories,
    const std::vector<std::vector<int32_t>>& masks)>;

struct EvalResult {
    std::vector<int32_t> users;      // test users, dataset order
    std::vector<int64_t> ranks;      // 1-based rank of each user's test item
    std::vector<int64_t> train_lens; // train-split length per user, for activity grouping
    std::map<int, double> hr;        // k -> mean over users
    std::map<int, double> ndcg;

    std::vector<double> per_user_metric(const std::string& metric, int k) const;
};

// Full-catalog ranking of each user's held-out test item. The scored history
// is the train split plus the validation item.
EvalResult evaluate(const BatchScorer& scorer, const InteractionDataset& data,
                    const std::vector<int>& ks, bool mask_history);

struct ActivityBucket {
    int64_t min_len = 0, max_len = 0;
    size_t size = 0;
    std::map<int, double> hr, ndcg;  // empty bucket -> metrics absent (null in reports)
};

// Users sorted ascending by (train length, user index), then split into
// n_buckets equal-count groups by sorted position (left-closed rule).
std::vector<ActivityBucket> grouped_evaluate(const EvalResult& res, int n_buckets,
                                             const std::vector<int>& ks);

struct WelchResult {
    double t = 0, df = 0, p = 1;
};

// Welch's two-sample t-test, two-sided p. Both samples with zero variance and
// equal means give p = 1.
WelchResult welch_ttest(const std::vector<double>& a, const std::vector<double>& b);

// Regularized incomplete beta function, exposed for the t-distribution CDF.
double incomplete_beta(double a, double b, double x);

}  // namespace p2rec
