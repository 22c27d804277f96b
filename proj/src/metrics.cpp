#include "p2rec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "p2rec/common.hpp"

namespace p2rec {

double hr_at_k(int64_t rank, int k) {
    if (k <= 0) throw ConfigError("hr_at_k: k must be positive");
    if (rank < 1) throw ConfigError("hr_at_k: rank must be >= 1");
    return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(int64_t rank, int k) {
    if (k <= 0) throw ConfigError("ndcg_at_k: k must be positive");
    if (rank < 1) throw ConfigError("ndcg_at_k: rank must be >= 1");
    if (rank > k) return 0.0;
    return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

int64_t pessimistic_rank(const float* scores, size_t n, int32_t target) {
    if (target < 0 || static_cast<size_t>(target) >= n)
        throw ConfigError("pessimistic_rank: target out of range");
    const float s = scores[target];
    int64_t ahead = 0;
    for (size_t j = 0; j < n; ++j) {
        if (static_cast<int32_t>(j) == target) continue;
        if (scores[j] >= s) ++ahead;
    }
    return ahead + 1;
}

std::vector<double> EvalResult::per_user_metric(const std::string& metric, int k) const {
    std::vector<double> out(ranks.size());
    for (size_t i = 0; i < ranks.size(); ++i)
        out[i] = metric == "hr" ? hr_at_k(ranks[i], k) : ndcg_at_k(ranks[i], k);
    return out;
}

EvalResult evaluate(const BatchScorer& scorer, const InteractionDataset& data,
                    const std::vector<int>& ks, bool mask_history) {
    EvalResult res;
    std::vector<std::vector<int32_t>> histories;
    std::vector<int32_t> targets;
    for (int32_t u = 0; u < static_cast<int32_t>(data.num_users); ++u) {
        auto tr = data.train_items(u);
        std::vector<int32_t> hist(tr.begin(), tr.end());
        hist.push_back(data.valid_item(u));
        histories.push_back(std::move(hist));
        targets.push_back(data.test_item(u));
        res.users.push_back(u);
        res.train_lens.push_back(static_cast<int64_t>(tr.size()));
    }
    std::vector<std::vector<int32_t>> masks(histories.size());
    if (mask_history) {
        for (size_t i = 0; i < histories.size(); ++i)
            for (int32_t it : histories[i])
                if (it != targets[i]) masks[i].push_back(it);
    }
    Tensor<float> scores = scorer(histories, masks);
    if (scores.rows() != histories.size() || scores.cols() != static_cast<size_t>(data.num_items))
        throw ShapeError("evaluate: scorer returned wrong shape");
    res.ranks.resize(histories.size());
    for (size_t i = 0; i < histories.size(); ++i)
        res.ranks[i] = pessimistic_rank(&scores.v[i * scores.cols()], scores.cols(), targets[i]);
    for (int k : ks) {
        double h = 0, n = 0;
        for (int64_t r : res.ranks) {
            h += hr_at_k(r, k);
            n += ndcg_at_k(r, k);
        }
        const double denom = res.ranks.empty() ? 1.0 : static_cast<double>(res.ranks.size());
        res.hr[k] = h / denom;
        res.ndcg[k] = n / denom;
    }
    return res;
}

std::vector<ActivityBucket> grouped_evaluate(const EvalResult& res, int n_buckets,
                                             const std::vector<int>& ks) {
    if (n_buckets <= 0) throw ConfigError("grouped_evaluate: n_buckets must be positive");
    const size_t n = res.ranks.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (res.train_lens[a] != res.train_lens[b]) return res.train_lens[a] < res.train_lens[b];
        return res.users[a] < res.users[b];
    });
    std::vector<ActivityBucket> out(static_cast<size_t>(n_buckets));
    for (int b = 0; b < n_buckets; ++b) {
        const size_t lo = n * static_cast<size_t>(b) / static_cast<size_t>(n_buckets);
        const size_t hi = n * static_cast<size_t>(b + 1) / static_cast<size_t>(n_buckets);
        ActivityBucket& bk = out[static_cast<size_t>(b)];
        bk.size = hi - lo;
        if (bk.size == 0) continue;
        bk.min_len = res.train_lens[order[lo]];
        bk.max_len = res.train_lens[order[hi - 1]];
        for (int k : ks) {
            double h = 0, nd = 0;
            for (size_t i = lo; i < hi; ++i) {
                h += hr_at_k(res.ranks[order[i]], k);
                nd += ndcg_at_k(res.ranks[order[i]], k);
            }
            bk.hr[k] = h / static_cast<double>(bk.size);
            bk.ndcg[k] = nd / static_cast<double>(bk.size);
        }
    }
    return out;
}

namespace {

// Continued-fraction evaluation of the incomplete beta (Lentz's method).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-14, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double lbeta = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
    const double front = std::exp(lbeta + a * std::log(x) + b * std::log(1.0 - x));
    // Symmetry keeps the continued fraction in its fast-converging region.
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

WelchResult welch_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw ConfigError("welch_ttest: each sample needs at least 2 values");
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    double ma = 0, mb = 0;
    for (double v : a) ma += v;
    for (double v : b) mb += v;
    ma /= na;
    mb /= nb;
    double va = 0, vb = 0;
    for (double v : a) va += (v - ma) * (v - ma);
    for (double v : b) vb += (v - mb) * (v - mb);
    va /= na - 1.0;
    vb /= nb - 1.0;

    WelchResult res;
    const double sa = va / na, sb = vb / nb;
    if (sa + sb == 0.0) {
        // Degenerate samples: identical constants are indistinguishable,
        // distinct constants are separated with certainty.
        res.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
        res.df = na + nb - 2.0;
        res.p = ma == mb ? 1.0 : 0.0;
        return res;
    }
    res.t = (ma - mb) / std::sqrt(sa + sb);
    res.df = (sa + sb) * (sa + sb) /
             (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    const double x = res.df / (res.df + res.t * res.t);
    res.p = incomplete_beta(res.df / 2.0, 0.5, x);
    res.p = std::min(1.0, std::max(0.0, res.p));
    return res;
}

}  // namespace p2rec
