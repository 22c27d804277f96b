#include "p2rec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <unordered_map>

#include "p2rec/rng.hpp"

namespace p2rec {

uint64_t InteractionDataset::content_hash() const {
    uint64_t h = fnv1a64("p2rec-dataset");
    h = fnv1a64(&num_users, sizeof(num_users), h);
    h = fnv1a64(&num_items, sizeof(num_items), h);
    for (const auto& s : sequences) {
        uint64_t len = s.size();
        h = fnv1a64(&len, sizeof(len), h);
        h = fnv1a64(s.data(), s.size() * sizeof(int32_t), h);
    }
    return h;
}

void InteractionDataset::validate() const {
    if (static_cast<size_t>(num_users) != sequences.size())
        throw ParseError("dataset: num_users does not match sequence count");
    for (int32_t u = 0; u < num_users; ++u) {
        if (sequences[u].size() < 3)
            throw ParseError(format("dataset: user %d has fewer than 3 interactions", u));
        for (int32_t v : sequences[u])
            if (v < 0 || v >= num_items)
                throw ParseError(format("dataset: item index %d out of range for user %d", v, u));
    }
}

namespace {

bool parse_double(std::string_view s, double& out) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

struct RawRow {
    std::string user, item;
    double ts;
    int64_t order;  // file order, breaks timestamp ties
};

}  // namespace

InteractionDataset load_interactions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open interaction log: " + path);

    std::vector<RawRow> rows;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t t1 = line.find('\t');
        size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw ParseError(format("%s:%lld: expected 3 tab-separated fields", path.c_str(),
                                    static_cast<long long>(line_no)));
        std::string_view user(line.data(), t1);
        std::string_view item(line.data() + t1 + 1, t2 - t1 - 1);
        std::string_view ts_field(line.data() + t2 + 1, line.size() - t2 - 1);
        double ts;
        if (!parse_double(ts_field, ts)) {
            // A non-numeric timestamp on the first line is an optional header.
            if (line_no == 1) continue;
            throw ParseError(format("%s:%lld: timestamp '%.*s' is not numeric", path.c_str(),
                                    static_cast<long long>(line_no),
                                    static_cast<int>(ts_field.size()), ts_field.data()));
        }
        if (user.empty() || item.empty())
            throw ParseError(format("%s:%lld: empty user or item id", path.c_str(),
                                    static_cast<long long>(line_no)));
        rows.push_back({std::string(user), std::string(item), ts,
                        static_cast<int64_t>(rows.size())});
    }

    // Group by user in first-appearance order.
    std::unordered_map<std::string, size_t> user_slot;
    std::vector<std::string> user_order;
    std::vector<std::vector<RawRow*>> per_user;
    for (auto& r : rows) {
        auto [it, inserted] = user_slot.try_emplace(r.user, per_user.size());
        if (inserted) {
            user_order.push_back(r.user);
            per_user.emplace_back();
        }
        per_user[it->second].push_back(&r);
    }

    InteractionDataset ds;
    std::unordered_map<std::string, int32_t> item_index;
    int64_t dropped = 0;
    for (size_t ui = 0; ui < per_user.size(); ++ui) {
        auto& ev = per_user[ui];
        if (ev.size() < 3) {
            ++dropped;
            continue;
        }
        std::stable_sort(ev.begin(), ev.end(), [](const RawRow* a, const RawRow* b) {
            if (a->ts != b->ts) return a->ts < b->ts;
            return a->order < b->order;
        });
        std::vector<int32_t> seq;
        seq.reserve(ev.size());
        for (const RawRow* r : ev) {
            auto [it, inserted] =
                item_index.try_emplace(r->item, static_cast<int32_t>(ds.item_labels.size()));
            if (inserted) ds.item_labels.push_back(r->item);
            seq.push_back(it->second);
        }
        ds.sequences.push_back(std::move(seq));
        ds.user_labels.push_back(user_order[ui]);
    }
    ds.num_users = static_cast<int32_t>(ds.sequences.size());
    ds.num_items = static_cast<int32_t>(ds.item_labels.size());
    ds.dropped_users = dropped;
    ds.validate();
    return ds;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.num_categories < 2) throw ConfigError("synthetic: num_categories must be >= 2");
    if (spec.num_items < spec.num_categories)
        throw ConfigError("synthetic: num_items must be >= num_categories");
    if (spec.num_users < 1) throw ConfigError("synthetic: num_users must be >= 1");
    if (spec.seq_len_min < 3) throw ConfigError("synthetic: seq_len_min must be >= 3");
    if (spec.seq_len_max < spec.seq_len_min)
        throw ConfigError("synthetic: seq_len_max must be >= seq_len_min");
    if (spec.alpha <= 0) throw ConfigError("synthetic: alpha must be positive");
    if (spec.corruption_rate < 0 || spec.corruption_rate >= 1)
        throw ConfigError("synthetic: corruption_rate must be in [0, 1)");

    SyntheticData out;
    int32_t n = spec.num_items, k = spec.num_categories;
    out.planted_labels.resize(n);
    std::vector<std::vector<int32_t>> category_items(k);
    for (int32_t v = 0; v < n; ++v) {
        out.planted_labels[v] = v % k;
        category_items[v % k].push_back(v);
    }

    Rng rng = Rng::derive(spec.seed, "synthetic");
    InteractionDataset& ds = out.data;
    ds.num_users = spec.num_users;
    ds.num_items = n;
    ds.sequences.resize(spec.num_users);
    std::vector<double> weights(k);
    for (int32_t u = 0; u < spec.num_users; ++u) {
        int32_t preferred = static_cast<int32_t>(rng.uniform_index(k));
        for (int32_t c = 0; c < k; ++c) weights[c] = c == preferred ? spec.alpha : 1.0;
        int32_t len = rng.uniform_int(spec.seq_len_min, spec.seq_len_max);
        auto& seq = ds.sequences[u];
        seq.reserve(len);
        for (int32_t t = 0; t < len; ++t) {
            auto c = rng.categorical(weights);
            const auto& pool = category_items[c];
            seq.push_back(pool[rng.uniform_index(pool.size())]);
        }
    }
    ds.user_labels.resize(spec.num_users);
    ds.item_labels.resize(n);
    for (int32_t u = 0; u < spec.num_users; ++u) ds.user_labels[u] = "u" + std::to_string(u);
    for (int32_t v = 0; v < n; ++v) ds.item_labels[v] = "v" + std::to_string(v);

    out.corrupted_labels = out.planted_labels;
    auto n_flip = static_cast<size_t>(spec.corruption_rate * n);
    if (n_flip > 0) {
        Rng flip_rng = Rng::derive(spec.seed, "synthetic-corruption");
        std::vector<int32_t> order(n);
        for (int32_t v = 0; v < n; ++v) order[v] = v;
        flip_rng.shuffle(order);
        for (size_t i = 0; i < n_flip; ++i) {
            int32_t v = order[i];
            int32_t shift = 1 + static_cast<int32_t>(flip_rng.uniform_index(k - 1));
            out.corrupted_labels[v] = (out.planted_labels[v] + shift) % k;
        }
    }
    ds.validate();
    return out;
}

}  // namespace p2rec
