#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "p2rec/backbone.hpp"
#include "p2rec/proxy_lm.hpp"

using namespace p2rec;

namespace {

Tensor<float> random_f32(std::vector<size_t> shape, uint64_t seed, double sd = 0.5) {
    Tensor<float> t(std::move(shape));
    Rng rng(seed);
    for (auto& x : t.v) x = static_cast<float>(rng.normal(0.0, sd));
    return t;
}

ProxyConfig tiny_proxy_cfg() {
    ProxyConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    cfg.max_prompt_len = 30;
    cfg.lora_rank = 2;
    cfg.batch_size = 4;  // force chunked catalog sweeps
    return cfg;
}

BackboneConfig tiny_backbone_cfg() {
    BackboneConfig cfg;
    cfg.d = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 10;
    cfg.dropout = 0.0;
    cfg.lr = 1e-2;
    cfg.batch_size = 64;
    cfg.max_epochs = 3;
    cfg.patience = 5;
    return cfg;
}

// Value of the fused input table for a given model configuration.
Tensor<float> table_value(SeqRecModel<float>& m) {
    Tape<float> tape(false);
    auto t = item_table(tape, m);
    return tape.value(t);
}

}  // namespace

TEST_CASE("the catalog sweep runs one prompt per item, deterministically") {
    auto cfg = tiny_proxy_cfg();
    const size_t n = 11;  // not a multiple of the chunk size
    auto m = make_proxy(cfg, 3, random_f32({n, 6}, 9), 41);
    CHECK(m.forward_count == 0);
    auto e1 = embed_all_items(m);
    CHECK(m.forward_count == static_cast<int64_t>(n));
    CHECK(e1.num_items() == static_cast<int32_t>(n));
    CHECK(e1.knowledge.rows() == n);
    CHECK(e1.knowledge.cols() == cfg.d_model);
    CHECK(e1.distributions.rows() == n);
    CHECK(e1.distributions.cols() == 3);
    for (size_t v = 0; v < n; ++v) {
        float sum = 0;
        for (size_t j = 0; j < 3; ++j) {
            CHECK(e1.distributions.at(v, j) > 0.0f);
            sum += e1.distributions.at(v, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
    auto e2 = embed_all_items(m);
    CHECK(m.forward_count == static_cast<int64_t>(2 * n));
    CHECK(std::memcmp(e1.knowledge.data(), e2.knowledge.data(),
                      sizeof(float) * e1.knowledge.numel()) == 0);
    CHECK(std::memcmp(e1.distributions.data(), e2.distributions.data(),
                      sizeof(float) * e1.distributions.numel()) == 0);
}

TEST_CASE("category agreement on a hand-scored catalog") {
    // 10 items, K = 4. Expected shares worked out by hand below.
    Tensor<float> g({10, 4});
    GroupModel gm;
    gm.k = 4;
    gm.assignment = {0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
    auto set_row = [&](size_t v, float a, float b, float c, float d) {
        g.at(v, 0) = a;
        g.at(v, 1) = b;
        g.at(v, 2) = c;
        g.at(v, 3) = d;
    };
    set_row(0, 0.7f, 0.1f, 0.1f, 0.1f);   // argmax 0 == assigned 0 -> C1
    set_row(1, 0.1f, 0.6f, 0.2f, 0.1f);   // argmax 1 == assigned 1 -> C1
    set_row(2, 0.5f, 0.3f, 0.1f, 0.1f);   // assigned 2 ranks 3rd -> C2
    set_row(3, 0.4f, 0.3f, 0.2f, 0.1f);   // assigned 3 ranks 4th -> C3
    set_row(4, 0.3f, 0.3f, 0.2f, 0.2f);   // tie at top; lower index 0 wins -> C1
    set_row(5, 0.4f, 0.1f, 0.3f, 0.2f);   // assigned 1 ranks 4th -> C3
    set_row(6, 0.2f, 0.3f, 0.25f, 0.25f); // assigned 2 ranks 2nd -> C2
    set_row(7, 0.25f, 0.25f, 0.25f, 0.25f); // full tie; order 0,1,2; 3 last -> C3
    set_row(8, 0.1f, 0.2f, 0.3f, 0.4f);   // assigned 0 ranks 4th -> C3
    set_row(9, 0.1f, 0.1f, 0.4f, 0.4f);   // assigned 1 behind 2,3 and tied 0 -> C3
    auto agree = category_agreement(g, gm);
    CHECK(agree.c1 == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(agree.c2 == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(agree.c3 == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(agree.c1 + agree.c2 + agree.c3 == doctest::Approx(1.0).epsilon(1e-9));

    // Independent brute-force recount.
    int c1 = 0, c2 = 0;
    for (size_t v = 0; v < 10; ++v) {
        std::vector<std::pair<float, size_t>> row;
        for (size_t c = 0; c < 4; ++c) row.push_back({g.at(v, c), c});
        std::stable_sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
            return a.first > b.first;
        });
        size_t assigned = static_cast<size_t>(gm.assignment[v]);
        if (row[0].second == assigned)
            ++c1;
        else if (row[1].second == assigned || row[2].second == assigned)
            ++c2;
    }
    CHECK(agree.c1 == doctest::Approx(c1 / 10.0));
    CHECK(agree.c2 == doctest::Approx(c2 / 10.0));
}

TEST_CASE("one-hot distributions at the assignment give perfect agreement") {
    GroupModel gm;
    gm.k = 3;
    gm.assignment = {2, 0, 1, 1, 2};
    Tensor<float> g({5, 3});
    for (size_t v = 0; v < 5; ++v) g.at(v, static_cast<size_t>(gm.assignment[v])) = 1.0f;
    auto agree = category_agreement(g, gm);
    CHECK(agree.c1 == 1.0);
    CHECK(agree.c2 == 0.0);
    CHECK(agree.c3 == 0.0);
}

TEST_CASE("category agreement input validation") {
    GroupModel gm;
    gm.k = 3;
    gm.assignment = {0, 1};
    Tensor<float> wrong_k({2, 4});
    CHECK_THROWS_AS(category_agreement(wrong_k, gm), ConfigError);
    Tensor<float> wrong_n({3, 3});
    CHECK_THROWS_AS(category_agreement(wrong_n, gm), ConfigError);
}

TEST_CASE("gate saturation reproduces the pure paths exactly") {
    auto cfg = tiny_backbone_cfg();
    const int32_t n = 7;
    Tensor<float> knowledge = random_f32({n, 5}, 3);

    FusionConfig id_only;
    id_only.gate = GateOverride::always_id;
    auto m_id = make_fused_backbone<float>(cfg, n, knowledge, id_only, 77);
    Tensor<float> t_id = table_value(m_id);
    CHECK(std::memcmp(t_id.data(), m_id.params.get("item_emb").value.data(),
                      sizeof(float) * t_id.numel()) == 0);

    FusionConfig know_only;
    know_only.gate = GateOverride::always_knowledge;
    auto m_kn = make_fused_backbone<float>(cfg, n, knowledge, know_only, 77);
    Tensor<float> t_kn = table_value(m_kn);
    // Hand-computed projection: row v of H times P^T.
    const Tensor<float>& P = m_kn.params.get("fuse.p").value;
    Tensor<float> expect({static_cast<size_t>(n), cfg.d});
    gemm_nt_acc(knowledge.data(), P.data(), expect.data(), n, knowledge.cols(), cfg.d);
    CHECK(std::memcmp(t_kn.data(), expect.data(), sizeof(float) * expect.numel()) == 0);
}

TEST_CASE("sum fusion adds the two tables elementwise") {
    auto cfg = tiny_backbone_cfg();
    const int32_t n = 5;
    Tensor<float> knowledge = random_f32({n, 4}, 6);
    FusionConfig fus;
    fus.mode = FusionMode::sum;
    auto m = make_fused_backbone<float>(cfg, n, knowledge, fus, 13);
    Tensor<float> t = table_value(m);
    const Tensor<float>& e = m.params.get("item_emb").value;
    const Tensor<float>& P = m.params.get("fuse.p").value;
    Tensor<float> hp({static_cast<size_t>(n), cfg.d});
    gemm_nt_acc(knowledge.data(), P.data(), hp.data(), n, knowledge.cols(), cfg.d);
    for (size_t i = 0; i < t.numel(); ++i) CHECK(t.v[i] == e.v[i] + hp.v[i]);
}

TEST_CASE("a learned gate blends strictly between the two paths") {
    auto cfg = tiny_backbone_cfg();
    const int32_t n = 6;
    Tensor<float> knowledge = random_f32({n, 4}, 10, 1.0);
    FusionConfig fus;  // gate_concat, learned
    auto m = make_fused_backbone<float>(cfg, n, knowledge, fus, 29);
    // Nudge the gate bias away from zero so the sigmoid is clearly interior.
    m.params.get("fuse.bg").value.fill(0.3f);
    Tensor<float> t = table_value(m);
    const Tensor<float>& e = m.params.get("item_emb").value;
    const Tensor<float>& P = m.params.get("fuse.p").value;
    Tensor<float> hp({static_cast<size_t>(n), cfg.d});
    gemm_nt_acc(knowledge.data(), P.data(), hp.data(), n, knowledge.cols(), cfg.d);
    size_t interior = 0;
    for (size_t i = 0; i < t.numel(); ++i) {
        float lo = std::min(e.v[i], hp.v[i]), hi = std::max(e.v[i], hp.v[i]);
        CHECK(t.v[i] >= lo - 1e-6f);
        CHECK(t.v[i] <= hi + 1e-6f);
        if (t.v[i] > lo + 1e-7f && t.v[i] < hi - 1e-7f) ++interior;
    }
    CHECK(interior > t.numel() / 2);
}

TEST_CASE("the scalar gate applies one coefficient per item row") {
    auto cfg = tiny_backbone_cfg();
    const int32_t n = 6;
    Tensor<float> knowledge = random_f32({n, 4}, 15, 1.0);
    FusionConfig fus;
    fus.mode = FusionMode::gate_scalar;
    auto m = make_fused_backbone<float>(cfg, n, knowledge, fus, 31);
    Tensor<float> t = table_value(m);
    const Tensor<float>& e = m.params.get("item_emb").value;
    const Tensor<float>& P = m.params.get("fuse.p").value;
    Tensor<float> hp({static_cast<size_t>(n), cfg.d});
    gemm_nt_acc(knowledge.data(), P.data(), hp.data(), n, knowledge.cols(), cfg.d);
    for (int32_t v = 0; v < n; ++v) {
        // Recover the per-row coefficient from each coordinate; all must agree.
        double g_first = -1;
        for (size_t j = 0; j < cfg.d; ++j) {
            double denom = static_cast<double>(e.at(v, j)) - static_cast<double>(hp.at(v, j));
            if (std::fabs(denom) < 1e-4) continue;
            double gj = (static_cast<double>(t.at(v, j)) - static_cast<double>(hp.at(v, j))) /
                        denom;
            if (g_first < 0)
                g_first = gj;
            else
                CHECK(gj == doctest::Approx(g_first).epsilon(1e-3));
        }
        CHECK(g_first > 0.0);
        CHECK(g_first < 1.0);
    }
}

TEST_CASE("untied output logits fall back to the id table") {
    auto cfg = tiny_backbone_cfg();
    const int32_t n = 5;
    Tensor<float> knowledge = random_f32({n, 4}, 18);
    FusionConfig fus;
    fus.tie_output = false;
    auto m = make_fused_backbone<float>(cfg, n, knowledge, fus, 40);
    Tape<float> tape(false);
    auto in_table = item_table(tape, m);
    auto out_table = output_table(tape, m, in_table);
    CHECK(in_table != out_table);
    CHECK(std::memcmp(tape.value(out_table).data(), m.params.get("item_emb").value.data(),
                      sizeof(float) * m.params.get("item_emb").value.numel()) == 0);
    // Tied configuration reuses the fused node itself.
    FusionConfig tied;
    auto m2 = make_fused_backbone<float>(cfg, n, knowledge, tied, 40);
    Tape<float> tape2(false);
    auto t2 = item_table(tape2, m2);
    CHECK(output_table(tape2, m2, t2) == t2);
}

TEST_CASE("fused training moves the gate but never the knowledge matrix") {
    InteractionDataset ds;
    ds.num_users = 16;
    ds.num_items = 9;
    Rng rng(64);
    for (int32_t u = 0; u < 16; ++u) {
        size_t len = 4 + rng.uniform_index(5);
        std::vector<int32_t> s;
        for (size_t t = 0; t < len; ++t) s.push_back(static_cast<int32_t>(rng.uniform_index(9)));
        ds.sequences.push_back(std::move(s));
    }
    auto cfg = tiny_backbone_cfg();
    Tensor<float> knowledge = random_f32({9, 6}, 8);
    Tensor<float> knowledge_copy = knowledge;
    FusionConfig fus;
    auto m = make_fused_backbone<float>(cfg, 9, knowledge, fus, 3);
    Tensor<float> wg_before = m.params.get("fuse.wg").value;
    auto res = train_backbone(m, ds, 12);
    CHECK(!res.diverged);
    CHECK(std::memcmp(m.knowledge.data(), knowledge_copy.data(),
                      sizeof(float) * knowledge_copy.numel()) == 0);
    bool gate_moved = std::memcmp(wg_before.data(), m.params.get("fuse.wg").value.data(),
                                  sizeof(float) * wg_before.numel()) != 0;
    CHECK(gate_moved);
}
