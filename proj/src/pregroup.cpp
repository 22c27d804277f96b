#include "p2rec/pregroup.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "p2rec/rng.hpp"

namespace p2rec {

namespace {

double sq_dist(const float* a, const float* b, size_t d) {
    double acc = 0;
    for (size_t j = 0; j < d; ++j) {
        double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
        acc += diff * diff;
    }
    return acc;
}

// Nearest centroid, ties to the lowest index.
int32_t nearest(const float* x, const Tensor<float>& centroids, size_t d, double* dist_out) {
    int32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < centroids.rows(); ++c) {
        double dd = sq_dist(x, centroids.data() + c * d, d);
        if (dd < best_d) {
            best_d = dd;
            best = static_cast<int32_t>(c);
        }
    }
    if (dist_out) *dist_out = best_d;
    return best;
}

Tensor<float> kmeanspp_init(const Tensor<float>& e, int32_t k, Rng& rng) {
    size_t n = e.rows(), d = e.cols();
    Tensor<float> centroids({static_cast<size_t>(k), d});
    size_t first = rng.uniform_index(n);
    std::copy_n(e.data() + first * d, d, centroids.data());
    std::vector<double> min_dist(n);
    for (size_t i = 0; i < n; ++i) min_dist[i] = sq_dist(e.data() + i * d, centroids.data(), d);
    for (int32_t c = 1; c < k; ++c) {
        double total = 0;
        for (double x : min_dist) total += x;
        size_t chosen;
        if (total <= 0) {
            chosen = rng.uniform_index(n);  // all points coincide with a centroid
        } else {
            double x = rng.uniform() * total, acc = 0;
            chosen = n - 1;
            for (size_t i = 0; i < n; ++i) {
                acc += min_dist[i];
                if (x < acc) {
                    chosen = i;
                    break;
                }
            }
        }
        std::copy_n(e.data() + chosen * d, d, centroids.data() + static_cast<size_t>(c) * d);
        for (size_t i = 0; i < n; ++i)
            min_dist[i] = std::min(min_dist[i],
                                   sq_dist(e.data() + i * d,
                                           centroids.data() + static_cast<size_t>(c) * d, d));
    }
    return centroids;
}

struct LloydResult {
    Tensor<float> centroids;
    std::vector<int32_t> assignment;
    double sse = 0;
    std::vector<double> sse_trace;
};

LloydResult lloyd(const Tensor<float>& e, int32_t k, Rng& rng, int max_iters) {
    size_t n = e.rows(), d = e.cols();
    LloydResult res;
    res.centroids = kmeanspp_init(e, k, rng);
    res.assignment.assign(n, -1);
    std::vector<int64_t> counts(k);
    for (int iter = 0; iter < max_iters; ++iter) {
        int changed_flag = 0;
        double sse = 0;
#pragma omp parallel for schedule(static) reduction(+ : sse) reduction(| : changed_flag) \
    if (n * static_cast<size_t>(k) * d > (1u << 16))
        for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) {
            double dist;
            int32_t a = nearest(e.data() + static_cast<size_t>(i) * d, res.centroids, d, &dist);
            if (a != res.assignment[i]) {
                res.assignment[i] = a;
                changed_flag = 1;
            }
            sse += dist;
        }
        bool changed = changed_flag != 0;
        std::fill(counts.begin(), counts.end(), 0);
        for (size_t i = 0; i < n; ++i) ++counts[res.assignment[i]];

        // Repair empty clusters: move the farthest point of the largest
        // cluster onto the empty centroid, then continue iterating.
        for (int32_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            int32_t largest = static_cast<int32_t>(
                std::max_element(counts.begin(), counts.end()) - counts.begin());
            size_t far_idx = 0;
            double far_d = -1;
            for (size_t i = 0; i < n; ++i) {
                if (res.assignment[i] != largest) continue;
                double dd = sq_dist(e.data() + i * d,
                                    res.centroids.data() + static_cast<size_t>(largest) * d, d);
                if (dd > far_d) {
                    far_d = dd;
                    far_idx = i;
                }
            }
            std::copy_n(e.data() + far_idx * d, d,
                        res.centroids.data() + static_cast<size_t>(c) * d);
            res.assignment[far_idx] = c;
            --counts[largest];
            ++counts[c];
            changed = true;
        }

        res.sse_trace.push_back(sse);
        res.sse = sse;
        if (!changed) break;

        // Update step: centroid = mean of assigned points.
        res.centroids.fill(0.0f);
        for (size_t i = 0; i < n; ++i) {
            float* cr = res.centroids.data() + static_cast<size_t>(res.assignment[i]) * d;
            const float* x = e.data() + i * d;
            for (size_t j = 0; j < d; ++j) cr[j] += x[j];
        }
        for (int32_t c = 0; c < k; ++c) {
            float inv = 1.0f / static_cast<float>(counts[c]);
            float* cr = res.centroids.data() + static_cast<size_t>(c) * d;
            for (size_t j = 0; j < d; ++j) cr[j] *= inv;
        }
    }
    return res;
}

}  // namespace

GroupModel fit_kmeans(const Tensor<float>& embeddings, int32_t k, uint64_t seed,
                      const KMeansOptions& opts) {
    size_t n = embeddings.rows();
    if (k < 1) throw ConfigError("fit_kmeans: k must be >= 1");
    if (static_cast<size_t>(k) > n)
        throw ConfigError(format("fit_kmeans: k=%d exceeds item count %zu", k, n));

    LloydResult best;
    bool have = false;
    for (int r = 0; r < std::max(1, opts.restarts); ++r) {
        Rng rng = Rng::derive(seed, "kmeans-restart-" + std::to_string(r));
        LloydResult cur = lloyd(embeddings, k, rng, opts.max_iters);
        if (opts.sse_trace) opts.sse_trace->push_back(cur.sse_trace);
        if (!have || cur.sse < best.sse) {
            best = std::move(cur);
            have = true;
        }
    }
    GroupModel gm;
    gm.k = k;
    gm.centroids = std::move(best.centroids);
    gm.assignment = std::move(best.assignment);
    gm.sse = best.sse;
    return gm;
}

PreferenceTargets build_targets(const InteractionDataset& data, const GroupModel& gm,
                                bool count_distinct) {
    PreferenceTargets out;
    out.k = gm.k;
    out.targets = Tensor<float>({static_cast<size_t>(data.num_users), static_cast<size_t>(gm.k)});
    std::vector<double> counts(gm.k);
    std::vector<char> seen;
    for (int32_t u = 0; u < data.num_users; ++u) {
        std::fill(counts.begin(), counts.end(), 0.0);
        if (count_distinct) seen.assign(data.num_items, 0);
        double total = 0;
        for (int32_t v : data.train_items(u)) {
            if (v >= static_cast<int32_t>(gm.assignment.size()))
                throw ConfigError(format("build_targets: item %d missing from group model", v));
            if (count_distinct) {
                if (seen[v]) continue;
                seen[v] = 1;
            }
            counts[gm.assignment[v]] += 1.0;
            total += 1.0;
        }
        if (total == 0) {
            ++out.excluded_users;
            continue;
        }
        for (int32_t c = 0; c < gm.k; ++c)
            out.targets.at(u, c) = static_cast<float>(counts[c] / total);
    }
    return out;
}

double adjusted_rand_index(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
    if (a.size() != b.size()) throw ConfigError("adjusted_rand_index: size mismatch");
    size_t n = a.size();
    int32_t ka = 0, kb = 0;
    for (size_t i = 0; i < n; ++i) {
        ka = std::max(ka, a[i] + 1);
        kb = std::max(kb, b[i] + 1);
    }
    std::vector<int64_t> table(static_cast<size_t>(ka) * kb, 0);
    std::vector<int64_t> ra(ka, 0), rb(kb, 0);
    for (size_t i = 0; i < n; ++i) {
        ++table[static_cast<size_t>(a[i]) * kb + b[i]];
        ++ra[a[i]];
        ++rb[b[i]];
    }
    auto choose2 = [](int64_t x) { return x * (x - 1) / 2; };
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (int64_t x : table) sum_ij += static_cast<double>(choose2(x));
    for (int64_t x : ra) sum_a += static_cast<double>(choose2(x));
    for (int64_t x : rb) sum_b += static_cast<double>(choose2(x));
    double total = static_cast<double>(choose2(static_cast<int64_t>(n)));
    double expected = sum_a * sum_b / total;
    double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return 1.0;  // both partitions trivial
    return (sum_ij - expected) / (max_index - expected);
}

}  // namespace p2rec
