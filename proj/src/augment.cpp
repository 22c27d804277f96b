#include "p2rec/augment.hpp"

#include <algorithm>

namespace p2rec {

CategoryAgreement category_agreement(const Tensor<float>& g, const GroupModel& gm, int top_n) {
    size_t n = g.rows(), k = g.cols();
    if (static_cast<size_t>(gm.k) != k)
        throw ConfigError(format("category_agreement: K mismatch (%zu vs %d)", k, gm.k));
    if (gm.assignment.size() != n)
        throw ConfigError("category_agreement: item count mismatch");
    int64_t n1 = 0, n2 = 0;
    std::vector<size_t> idx(k);
    for (size_t v = 0; v < n; ++v) {
        const float* row = g.data() + v * k;
        for (size_t c = 0; c < k; ++c) idx[c] = c;
        // descending by probability, ties toward the lower index
        std::stable_sort(idx.begin(), idx.end(),
                         [&](size_t a, size_t b) { return row[a] > row[b]; });
        auto assigned = static_cast<size_t>(gm.assignment[v]);
        if (idx[0] == assigned) {
            ++n1;
            continue;
        }
        size_t limit = std::min(static_cast<size_t>(top_n), k);
        for (size_t r = 1; r < limit; ++r)
            if (idx[r] == assigned) {
                ++n2;
                break;
            }
    }
    CategoryAgreement out;
    out.c1 = static_cast<double>(n1) / static_cast<double>(n);
    out.c2 = static_cast<double>(n2) / static_cast<double>(n);
    out.c3 = 1.0 - out.c1 - out.c2;
    return out;
}

}  // namespace p2rec
