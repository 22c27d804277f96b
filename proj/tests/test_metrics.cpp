#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "p2rec/metrics.hpp"
#include "p2rec/rng.hpp"

using namespace p2rec;

namespace {

const float kNegInf = -std::numeric_limits<float>::infinity();

// 20 hand-built users over 30 items with assorted lengths.
InteractionDataset hand_dataset() {
    InteractionDataset ds;
    ds.num_users = 20;
    ds.num_items = 30;
    Rng rng(501);
    for (int32_t u = 0; u < 20; ++u) {
        size_t len = 3 + rng.uniform_index(8);
        std::vector<int32_t> s;
        for (size_t i = 0; i < len; ++i) s.push_back(static_cast<int32_t>(rng.uniform_index(30)));
        ds.sequences.push_back(std::move(s));
    }
    return ds;
}

// Deterministic length-aware scoring rule shared by the scorer under test and
// the naive re-derivation below.
float rule_score(size_t hist_len, size_t item) {
    return std::sin(static_cast<float>(item * 7 + hist_len * 3));
}

}  // namespace

TEST_CASE("hit rate and ndcg closed forms") {
    CHECK(hr_at_k(1, 1) == 1.0);
    CHECK(hr_at_k(1, 10) == 1.0);
    CHECK(ndcg_at_k(1, 5) == 1.0);
    CHECK(ndcg_at_k(3, 5) == 0.5);  // 1/log2(4)
    CHECK(ndcg_at_k(2, 5) == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-15));
    CHECK(hr_at_k(7, 5) == 0.0);
    CHECK(ndcg_at_k(7, 5) == 0.0);
    CHECK(hr_at_k(5, 5) == 1.0);
    CHECK(ndcg_at_k(5, 5) == doctest::Approx(1.0 / std::log2(6.0)).epsilon(1e-15));
}

TEST_CASE("metrics never improve as k shrinks") {
    for (int64_t rank = 1; rank <= 12; ++rank)
        for (int k = 1; k < 12; ++k) {
            CHECK(hr_at_k(rank, k) <= hr_at_k(rank, k + 1));
            CHECK(ndcg_at_k(rank, k) <= ndcg_at_k(rank, k + 1));
        }
}

TEST_CASE("rank counts ties against the target") {
    std::vector<float> s = {0.5f, 0.9f, 0.5f, 0.5f};
    CHECK(pessimistic_rank(s.data(), s.size(), 0) == 4);
    CHECK(pessimistic_rank(s.data(), s.size(), 1) == 1);
    std::vector<float> eq(5, 1.0f);
    CHECK(pessimistic_rank(eq.data(), eq.size(), 2) == 5);
    std::vector<float> asc = {0.1f, 0.2f, 0.3f};
    CHECK(pessimistic_rank(asc.data(), asc.size(), 0) == 3);
    CHECK(pessimistic_rank(asc.data(), asc.size(), 2) == 1);
}

TEST_CASE("evaluate masks the history but never the ranking target") {
    InteractionDataset ds;
    ds.num_users = 1;
    ds.num_items = 12;
    ds.sequences = {{5, 5, 9, 5}};  // history [5,5,9], target 5 repeats in history
    std::vector<std::vector<int32_t>> seen_masks;
    auto scorer = [&](const std::vector<std::vector<int32_t>>& hists,
                      const std::vector<std::vector<int32_t>>& masks) {
        seen_masks = masks;
        Tensor<float> s({hists.size(), 12});
        s.fill(0.0f);
        for (size_t i = 0; i < masks.size(); ++i)
            for (int32_t m : masks[i]) s.at(i, m) = kNegInf;
        s.at(0, 5) = 1.0f;
        return s;
    };
    auto res = evaluate(scorer, ds, {1}, true);
    REQUIRE(seen_masks.size() == 1);
    REQUIRE(seen_masks[0].size() == 1);
    CHECK(seen_masks[0][0] == 9);  // 5 stays unmasked despite appearing in the history
    CHECK(res.ranks[0] == 1);

    auto res_unmasked = evaluate(scorer, ds, {1}, false);
    CHECK(seen_masks[0].empty());
}

TEST_CASE("evaluate agrees with a naive per-user re-derivation") {
    auto ds = hand_dataset();
    auto scorer = [&](const std::vector<std::vector<int32_t>>& hists,
                      const std::vector<std::vector<int32_t>>& masks) {
        Tensor<float> s({hists.size(), static_cast<size_t>(ds.num_items)});
        for (size_t i = 0; i < hists.size(); ++i)
            for (size_t j = 0; j < s.cols(); ++j) s.at(i, j) = rule_score(hists[i].size(), j);
        for (size_t i = 0; i < masks.size(); ++i)
            for (int32_t m : masks[i]) s.at(i, m) = kNegInf;
        return s;
    };
    std::vector<int> ks = {1, 5, 10};
    auto res = evaluate(scorer, ds, ks, true);
    REQUIRE(res.ranks.size() == 20);

    // Independent recount: rebuild each user's scores and count placements.
    std::vector<int64_t> oracle_ranks;
    for (int32_t u = 0; u < 20; ++u) {
        const auto& seq = ds.sequences[u];
        size_t hist_len = seq.size() - 1;
        int32_t target = seq.back();
        std::vector<float> s(30);
        for (size_t j = 0; j < 30; ++j) s[j] = rule_score(hist_len, j);
        for (size_t i = 0; i + 1 < seq.size(); ++i)
            if (seq[i] != target) s[seq[i]] = kNegInf;
        int64_t rank = 1;
        for (size_t j = 0; j < 30; ++j)
            if (static_cast<int32_t>(j) != target && s[j] >= s[target]) ++rank;
        oracle_ranks.push_back(rank);
    }
    CHECK(res.ranks == oracle_ranks);
    for (int k : ks) {
        double h = 0, n = 0;
        for (int64_t r : oracle_ranks) {
            h += r <= k ? 1.0 : 0.0;
            n += r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
        }
        CHECK(res.hr.at(k) == h / 20.0);
        CHECK(res.ndcg.at(k) == n / 20.0);
    }
}

TEST_CASE("evaluate rejects a wrong-shaped score matrix") {
    InteractionDataset ds;
    ds.num_users = 1;
    ds.num_items = 5;
    ds.sequences = {{0, 1, 2}};
    auto bad = [](const std::vector<std::vector<int32_t>>& h,
                  const std::vector<std::vector<int32_t>>&) {
        return Tensor<float>({h.size(), 3});
    };
    CHECK_THROWS_AS(evaluate(bad, ds, {5}, false), ShapeError);
}

TEST_CASE("uniform random scores hit the top 10 of 100 about a tenth of the time") {
    InteractionDataset ds;
    ds.num_users = 400;
    ds.num_items = 100;
    Rng gen(42);
    for (int32_t u = 0; u < 400; ++u) {
        std::vector<int32_t> s = {static_cast<int32_t>(gen.uniform_index(100)),
                                  static_cast<int32_t>(gen.uniform_index(100)),
                                  static_cast<int32_t>(gen.uniform_index(100))};
        ds.sequences.push_back(std::move(s));
    }
    auto scorer = [](const std::vector<std::vector<int32_t>>& hists,
                     const std::vector<std::vector<int32_t>>&) {
        Tensor<float> s({hists.size(), 100});
        Rng r(7);
        for (auto& v : s.v) v = static_cast<float>(r.uniform());
        return s;
    };
    auto res = evaluate(scorer, ds, {10}, false);
    CHECK(res.hr.at(10) == doctest::Approx(0.1).epsilon(0.5));
    CHECK(std::fabs(res.hr.at(10) - 0.1) < 0.05);
}

TEST_CASE("one bucket reproduces the global metrics") {
    auto ds = hand_dataset();
    auto scorer = [&](const std::vector<std::vector<int32_t>>& hists,
                      const std::vector<std::vector<int32_t>>& masks) {
        Tensor<float> s({hists.size(), static_cast<size_t>(ds.num_items)});
        for (size_t i = 0; i < hists.size(); ++i)
            for (size_t j = 0; j < s.cols(); ++j) s.at(i, j) = rule_score(hists[i].size(), j);
        for (size_t i = 0; i < masks.size(); ++i)
            for (int32_t m : masks[i]) s.at(i, m) = kNegInf;
        return s;
    };
    std::vector<int> ks = {5, 10};
    auto res = evaluate(scorer, ds, ks, true);
    auto buckets = grouped_evaluate(res, 1, ks);
    REQUIRE(buckets.size() == 1);
    CHECK(buckets[0].size == 20);
    for (int k : ks) {
        CHECK(buckets[0].hr.at(k) == doctest::Approx(res.hr.at(k)).epsilon(1e-12));
        CHECK(buckets[0].ndcg.at(k) == doctest::Approx(res.ndcg.at(k)).epsilon(1e-12));
    }
    // Size-weighted bucket means recombine to the global mean for any count.
    for (int nb : {2, 3, 7}) {
        auto bs = grouped_evaluate(res, nb, ks);
        for (int k : ks) {
            double acc = 0;
            size_t total = 0;
            for (const auto& b : bs) {
                if (b.size == 0) continue;
                acc += b.hr.at(k) * static_cast<double>(b.size);
                total += b.size;
            }
            CHECK(total == 20);
            CHECK(acc / 20.0 == doctest::Approx(res.hr.at(k)).epsilon(1e-12));
        }
    }
}

TEST_CASE("activity buckets split sorted train lengths into equal counts") {
    EvalResult res;
    res.users = {0, 1, 2, 3, 4, 5};
    res.train_lens = {9, 3, 50, 4, 9, 3};
    res.ranks = {1, 2, 3, 4, 5, 6};  // rank u+1, to track which users landed where
    auto buckets = grouped_evaluate(res, 3, {1});
    REQUIRE(buckets.size() == 3);
    // Sorted by (length, user): u1(3), u5(3), u3(4), u0(9), u4(9), u2(50).
    CHECK(buckets[0].min_len == 3);
    CHECK(buckets[0].max_len == 3);
    CHECK(buckets[1].min_len == 4);
    CHECK(buckets[1].max_len == 9);
    CHECK(buckets[2].min_len == 9);
    CHECK(buckets[2].max_len == 50);
    for (const auto& b : buckets) CHECK(b.size == 2);
    // Bucket 1 holds users 3 and 0, whose ranks are 4 and 1: HR@1 = 0.5.
    CHECK(buckets[1].hr.at(1) == 0.5);
    CHECK(buckets[0].hr.at(1) == 0.0);
}

TEST_CASE("surplus buckets beyond the user count stay empty") {
    EvalResult res;
    res.users = {0, 1};
    res.train_lens = {4, 8};
    res.ranks = {1, 2};
    auto buckets = grouped_evaluate(res, 5, {1});
    REQUIRE(buckets.size() == 5);
    size_t filled = 0, total = 0;
    for (const auto& b : buckets) {
        total += b.size;
        if (b.size > 0) {
            ++filled;
            CHECK(!b.hr.empty());
        } else {
            CHECK(b.hr.empty());
            CHECK(b.ndcg.empty());
        }
    }
    CHECK(total == 2);
    CHECK(filled == 2);
    CHECK_THROWS_AS(grouped_evaluate(res, 0, {1}), ConfigError);
}

TEST_CASE("welch test: identical constant samples are indistinguishable") {
    // Exactly representable constants so the sample variance is exactly zero.
    std::vector<double> a = {0.5, 0.5, 0.5};
    auto r = welch_ttest(a, a);
    CHECK(r.t == 0.0);
    CHECK(r.p == 1.0);
    // Distinct constants separate with certainty.
    std::vector<double> b = {0.75, 0.75, 0.75};
    auto r2 = welch_ttest(a, b);
    CHECK(std::isinf(r2.t));
    CHECK(r2.t < 0);
    CHECK(r2.p == 0.0);
    CHECK_THROWS_AS(welch_ttest({1.0}, {1.0, 2.0}), ConfigError);
}

TEST_CASE("welch test matches a reference computation") {
    // Reference values computed independently with a standard statistics
    // package (two-sided, unequal variances).
    std::vector<double> a = {27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1,
                             21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4};
    std::vector<double> b = {27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0,
                             24.8, 20.2, 21.9, 22.1, 22.9, 30.0, 23.9};
    auto r = welch_ttest(a, b);
    CHECK(r.t == doctest::Approx(-2.8352638007).epsilon(1e-8));
    CHECK(r.df == doctest::Approx(27.7136259681).epsilon(1e-8));
    CHECK(r.p == doctest::Approx(0.0084527324).epsilon(1e-7));
}

TEST_CASE("welch test separates shifted normals decisively") {
    Rng rng(88);
    std::vector<double> a(1000), b(1000);
    for (auto& v : a) v = rng.normal(0.0, 1.0);
    for (auto& v : b) v = rng.normal(1.0, 1.0);
    auto r = welch_ttest(a, b);
    CHECK(r.p < 1e-10);
    CHECK(r.t < -10.0);
}

TEST_CASE("regularized incomplete beta closed forms") {
    CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
    CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
    CHECK(incomplete_beta(0.5, 0.5, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(incomplete_beta(1.0, 1.0, 0.3) == doctest::Approx(0.3).epsilon(1e-12));
    // I_x(2,3) = sum_{j=2}^{4} C(4,j) x^j (1-x)^(4-j) at x = 0.4 is 0.5248.
    CHECK(incomplete_beta(2.0, 3.0, 0.4) == doctest::Approx(0.5248).epsilon(1e-12));
}
