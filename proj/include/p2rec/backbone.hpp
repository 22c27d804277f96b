#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "p2rec/augment.hpp"
#include "p2rec/dataset.hpp"
#include "p2rec/metrics.hpp"
#include "p2rec/optim.hpp"
#include "p2rec/tape.hpp"
#include "p2rec/transformer.hpp"

namespace p2rec {

enum class BackboneArch { self_attention, recurrent };

struct BackboneConfig {
    BackboneArch arch = BackboneArch::self_attention;
    size_t d = 64;
    size_t n_layers = 2;
    size_t n_heads = 2;
    size_t max_seq_len = 50;
    double dropout = 0.1;
    double lr = 1e-3;
    size_t batch_size = 256;
    int max_epochs = 200;
    int patience = 10;
};

// Sequential recommender with a tied item embedding table. When `knowledge`
// is non-empty the table is the gated fusion of the id embeddings and the
// projected knowledge embeddings; the knowledge matrix itself stays frozen.
template <typename T>
struct SeqRecModel {
    BackboneConfig cfg;
    FusionConfig fusion;
    int32_t num_items = 0;
    Tensor<T> knowledge;  // N x d_model, empty for the plain backbone
    ParamSet<T> params;

    bool has_fusion() const { return knowledge.numel() > 0; }
};

inline BlockSpec backbone_block_spec(const BackboneConfig& cfg) {
    BlockSpec spec;
    spec.d = cfg.d;
    spec.ffn_hidden = cfg.d;  // d -> d feed-forward, matching the tied-table design
    spec.n_heads = cfg.n_heads;
    spec.act = Activation::relu;
    spec.lora = false;
    return spec;
}

template <typename T>
void build_backbone_params(SeqRecModel<T>& m, uint64_t seed) {
    const double w_std = 0.02;
    ParamSet<T>& ps = m.params;
    ps.add_normal("item_emb", {static_cast<size_t>(m.num_items), m.cfg.d}, w_std, seed);
    if (m.cfg.arch == BackboneArch::self_attention) {
        ps.add_normal("pos_emb", {m.cfg.max_seq_len, m.cfg.d}, w_std, seed);
        BlockSpec spec = backbone_block_spec(m.cfg);
        for (size_t l = 0; l < m.cfg.n_layers; ++l)
            add_transformer_block_params(ps, format("block%zu", l), spec, seed);
        ps.add_ones("lnf.g", {m.cfg.d});
        ps.add_zeros("lnf.b", {m.cfg.d});
    } else {
        size_t d = m.cfg.d;
        ps.add_normal("gru.wz", {d, d}, w_std, seed);
        ps.add_normal("gru.uz", {d, d}, w_std, seed);
        ps.add_zeros("gru.bz", {d});
        ps.add_normal("gru.wr", {d, d}, w_std, seed);
        ps.add_normal("gru.ur", {d, d}, w_std, seed);
        ps.add_zeros("gru.br", {d});
        ps.add_normal("gru.wn", {d, d}, w_std, seed);
        ps.add_normal("gru.un", {d, d}, w_std, seed);
        ps.add_zeros("gru.bn", {d});
    }
    if (m.has_fusion()) {
        ps.add_normal("fuse.p", {m.cfg.d, m.knowledge.cols()}, w_std, seed);
        if (m.fusion.mode == FusionMode::gate_concat) {
            ps.add_normal("fuse.wg", {m.cfg.d, 2 * m.cfg.d}, w_std, seed);
            ps.add_zeros("fuse.bg", {m.cfg.d});
        } else if (m.fusion.mode == FusionMode::gate_scalar) {
            ps.add_normal("fuse.wg", {1, 2 * m.cfg.d}, w_std, seed);
            ps.add_zeros("fuse.bg", {1});
        }
    }
}

template <typename T>
SeqRecModel<T> make_backbone(const BackboneConfig& cfg, int32_t num_items, uint64_t seed) {
    if (num_items <= 0) throw ConfigError("make_backbone: need at least one item");
    SeqRecModel<T> m;
    m.cfg = cfg;
    m.num_items = num_items;
    build_backbone_params(m, seed);
    return m;
}

template <typename T>
SeqRecModel<T> make_fused_backbone(const BackboneConfig& cfg, int32_t num_items,
                                   Tensor<T> knowledge, const FusionConfig& fusion,
                                   uint64_t seed) {
    if (num_items <= 0) throw ConfigError("make_fused_backbone: need at least one item");
    if (knowledge.rows() != static_cast<size_t>(num_items))
        throw ShapeError("make_fused_backbone: knowledge rows != item count");
    SeqRecModel<T> m;
    m.cfg = cfg;
    m.fusion = fusion;
    m.num_items = num_items;
    m.knowledge = std::move(knowledge);
    build_backbone_params(m, seed);
    return m;
}

// Item table node used for both the input lookups and the tied output logits.
//   fused_v = g . e_id + (1 - g) . (P h_v),  g = sigmoid(Wg [e_id ; P h_v] + bg)
// Saturation overrides return the pure path directly, with no sigmoid in the
// graph, so "gate stuck at 1" reproduces the plain backbone bit for bit.
template <typename T>
typename Tape<T>::Var item_table(Tape<T>& tape, SeqRecModel<T>& m) {
    using Var = typename Tape<T>::Var;
    Var e_id = tape.param(m.params.get("item_emb"));
    if (!m.has_fusion() || m.fusion.gate == GateOverride::always_id) return e_id;
    Var h = tape.input(m.knowledge);
    Var hp = tape.matmul_nt(h, tape.param(m.params.get("fuse.p")));  // N x d
    if (m.fusion.gate == GateOverride::always_knowledge) return hp;
    if (m.fusion.mode == FusionMode::sum) return tape.add(e_id, hp);
    Var cat = tape.concat_cols(e_id, hp);
    Var gate = tape.sigmoid(
        tape.linear(cat, tape.param(m.params.get("fuse.wg")), tape.param(m.params.get("fuse.bg"))));
    if (m.fusion.mode == FusionMode::gate_concat)
        return tape.add(tape.mul(gate, e_id), tape.mul(tape.one_minus(gate), hp));
    // gate_scalar: one gate value per item
    return tape.add(tape.mul_colvec(e_id, gate), tape.mul_colvec(hp, tape.one_minus(gate)));
}

// Table used for the output logits: the fused table when tied (the default),
// otherwise the plain id embeddings.
template <typename T>
typename Tape<T>::Var output_table(Tape<T>& tape, SeqRecModel<T>& m,
                                   typename Tape<T>::Var input_table) {
    if (!m.has_fusion() || m.fusion.tie_output) return input_table;
    return tape.param(m.params.get("item_emb"));
}

// Hidden states for a right-padded batch, [batch*seq_len x d]. Pad slots hold
// item 0; causality (attention masking / left-to-right recurrence) guarantees
// the pad tail cannot influence any valid position, and only valid rows are
// ever read downstream.
template <typename T>
typename Tape<T>::Var backbone_hidden(Tape<T>& tape, SeqRecModel<T>& m,
                                      typename Tape<T>::Var table,
                                      const std::vector<int32_t>& ids, size_t batch,
                                      size_t seq_len, DropoutCtx* drop) {
    using Var = typename Tape<T>::Var;
    if (ids.size() != batch * seq_len) throw ShapeError("backbone_hidden: ids != batch*seq_len");
    auto P = [&](const char* n) { return tape.param(m.params.get(n)); };
    Var x = tape.embedding_rows(table, ids);
    if (m.cfg.arch == BackboneArch::self_attention) {
        if (seq_len > m.cfg.max_seq_len)
            throw ShapeError(format("backbone_hidden: seq_len %zu > max %zu", seq_len,
                                    m.cfg.max_seq_len));
        x = tape.scale(x, static_cast<T>(std::sqrt(static_cast<double>(m.cfg.d))));
        std::vector<int32_t> pos(batch * seq_len);
        for (size_t b = 0; b < batch; ++b)
            for (size_t t = 0; t < seq_len; ++t) pos[b * seq_len + t] = static_cast<int32_t>(t);
        x = tape.add(x, tape.embedding_rows(P("pos_emb"), pos));
        if (drop && drop->p > 0) x = tape.dropout(x, drop->p, drop->next());
        BlockSpec spec = backbone_block_spec(m.cfg);
        for (size_t l = 0; l < m.cfg.n_layers; ++l)
            x = transformer_block_forward(tape, x, m.params, format("block%zu", l), spec, batch,
                                          seq_len, false, drop);
        x = tape.layer_norm(x, P("lnf.g"), P("lnf.b"));
    } else {
        if (drop && drop->p > 0) x = tape.dropout(x, drop->p, drop->next());
        x = tape.gru_seq(x, P("gru.wz"), P("gru.uz"), P("gru.bz"), P("gru.wr"), P("gru.ur"),
                         P("gru.br"), P("gru.wn"), P("gru.un"), P("gru.bn"), batch, seq_len);
    }
    return x;
}

struct PaddedBatch {
    size_t batch = 0, seq_len = 0;
    std::vector<int32_t> ids;        // batch*seq_len, right-padded with item 0
    std::vector<size_t> valid_rows;  // training: rows carrying a next-item target
    std::vector<int32_t> targets;    // aligned with valid_rows
    std::vector<size_t> last_rows;   // scoring: final valid row per sequence
};

// Next-item training batch: inputs s[0..n-2], targets s[1..n-1], keeping only
// the last max_len input positions of longer sequences.
inline PaddedBatch make_train_batch(const std::vector<std::vector<int32_t>>& seqs,
                                    size_t max_len) {
    PaddedBatch pb;
    pb.batch = seqs.size();
    std::vector<size_t> off(seqs.size()), len(seqs.size());
    for (size_t r = 0; r < seqs.size(); ++r) {
        if (seqs[r].size() < 2) throw ConfigError("make_train_batch: sequence shorter than 2");
        size_t n_in = seqs[r].size() - 1;
        len[r] = std::min(n_in, max_len);
        off[r] = n_in - len[r];
        pb.seq_len = std::max(pb.seq_len, len[r]);
    }
    pb.ids.assign(pb.batch * pb.seq_len, 0);
    for (size_t r = 0; r < seqs.size(); ++r) {
        for (size_t t = 0; t < len[r]; ++t) {
            pb.ids[r * pb.seq_len + t] = seqs[r][off[r] + t];
            pb.valid_rows.push_back(r * pb.seq_len + t);
            pb.targets.push_back(seqs[r][off[r] + t + 1]);
        }
    }
    return pb;
}

// Scoring batch: each full history truncated to its last max_len items.
inline PaddedBatch make_score_batch(const std::vector<std::vector<int32_t>>& hists,
                                    size_t max_len) {
    PaddedBatch pb;
    pb.batch = hists.size();
    std::vector<size_t> off(hists.size()), len(hists.size());
    for (size_t r = 0; r < hists.size(); ++r) {
        if (hists[r].empty()) throw ConfigError("make_score_batch: empty history");
        len[r] = std::min(hists[r].size(), max_len);
        off[r] = hists[r].size() - len[r];
        pb.seq_len = std::max(pb.seq_len, len[r]);
    }
    pb.ids.assign(pb.batch * pb.seq_len, 0);
    pb.last_rows.resize(pb.batch);
    for (size_t r = 0; r < hists.size(); ++r) {
        for (size_t t = 0; t < len[r]; ++t) pb.ids[r * pb.seq_len + t] = hists[r][off[r] + t];
        pb.last_rows[r] = r * pb.seq_len + len[r] - 1;
    }
    return pb;
}

// Full-catalog scores [U x N] from the last hidden state against the tied
// table. masks[i] (optional) lists items forced to -inf in row i.
template <typename T>
Tensor<float> score_all_items(SeqRecModel<T>& m,
                              const std::vector<std::vector<int32_t>>& histories,
                              const std::vector<std::vector<int32_t>>& masks) {
    if (!masks.empty() && masks.size() != histories.size())
        throw ShapeError("score_all_items: mask count != history count");
    Tensor<float> out({histories.size(), static_cast<size_t>(m.num_items)});
    size_t bs = std::max<size_t>(1, m.cfg.batch_size);
    for (size_t start = 0; start < histories.size(); start += bs) {
        size_t end = std::min(histories.size(), start + bs);
        std::vector<std::vector<int32_t>> chunk(histories.begin() + start,
                                                histories.begin() + end);
        PaddedBatch pb = make_score_batch(chunk, m.cfg.max_seq_len);
        Tape<T> tape(false);
        auto table = item_table(tape, m);
        auto hid = backbone_hidden(tape, m, table, pb.ids, pb.batch, pb.seq_len, nullptr);
        auto last = tape.gather_rows(hid, pb.last_rows);
        auto logits = tape.matmul_nt(last, output_table(tape, m, table));
        const Tensor<T>& lv = tape.value(logits);
        for (size_t r = 0; r < pb.batch; ++r)
            for (size_t j = 0; j < static_cast<size_t>(m.num_items); ++j)
                out.v[(start + r) * out.cols() + j] = static_cast<float>(lv.v[r * lv.cols() + j]);
    }
    constexpr float ninf = -std::numeric_limits<float>::infinity();
    for (size_t i = 0; i < masks.size(); ++i)
        for (int32_t it : masks[i]) {
            if (it < 0 || it >= m.num_items) throw ShapeError("score_all_items: mask id range");
            out.v[i * out.cols() + static_cast<size_t>(it)] = ninf;
        }
    return out;
}

template <typename T>
BatchScorer make_scorer(SeqRecModel<T>& m) {
    return [&m](const std::vector<std::vector<int32_t>>& h,
                const std::vector<std::vector<int32_t>>& masks) {
        return score_all_items(m, h, masks);
    };
}

// Mean NDCG@10 of each user's validation item given the train prefix.
template <typename T>
double validation_ndcg(SeqRecModel<T>& m, const InteractionDataset& data, bool mask_history) {
    std::vector<std::vector<int32_t>> hists, masks;
    std::vector<int32_t> targets;
    for (int32_t u = 0; u < data.num_users; ++u) {
        auto tr = data.train_items(u);
        hists.emplace_back(tr.begin(), tr.end());
        targets.push_back(data.valid_item(u));
        std::vector<int32_t> mk;
        if (mask_history)
            for (int32_t it : tr)
                if (it != targets.back()) mk.push_back(it);
        masks.push_back(std::move(mk));
    }
    Tensor<float> scores = score_all_items(m, hists, masks);
    double acc = 0;
    for (size_t i = 0; i < hists.size(); ++i) {
        int64_t rk = pessimistic_rank(&scores.v[i * scores.cols()], scores.cols(), targets[i]);
        acc += ndcg_at_k(rk, 10);
    }
    return hists.empty() ? 0.0 : acc / static_cast<double>(hists.size());
}

struct EpochLog {
    int epoch = 0;
    double train_loss = 0;
    double val_ndcg10 = 0;
};

struct TrainResult {
    int best_epoch = -1;
    double best_val_ndcg = 0;
    std::vector<EpochLog> epochs;
    bool diverged = false;  // non-finite loss/grad; best checkpoint was restored
};

// Next-item cross-entropy training over the train split, early-stopped on
// validation NDCG@10. The model is left holding the best-epoch parameters.
template <typename T>
TrainResult train_backbone(SeqRecModel<T>& m, const InteractionDataset& data, uint64_t seed,
                           bool mask_history_for_val = true) {
    TrainResult res;
    std::vector<int32_t> train_users;
    for (int32_t u = 0; u < data.num_users; ++u)
        if (data.train_items(u).size() >= 2) train_users.push_back(u);
    if (train_users.empty())
        throw StageError("train_backbone: no user has 2 or more train items");

    AdamConfig ocfg;
    ocfg.lr = m.cfg.lr;
    Adam<T> opt(m.params, ocfg);
    std::vector<Tensor<T>> best = snapshot_values(m.params);
    double best_val = -std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < m.cfg.max_epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(seed, format("backbone-shuffle-%d", epoch)));
        std::vector<int32_t> order = train_users;
        shuffle_rng.shuffle(order);
        DropoutCtx drop{m.cfg.dropout, Rng::derive_seed(seed, format("backbone-drop-%d", epoch)), 0};

        double loss_sum = 0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size() && !res.diverged;
             start += m.cfg.batch_size) {
            size_t end = std::min(order.size(), start + m.cfg.batch_size);
            std::vector<std::vector<int32_t>> seqs;
            for (size_t i = start; i < end; ++i) {
                auto tr = data.train_items(order[i]);
                seqs.emplace_back(tr.begin(), tr.end());
            }
            PaddedBatch pb = make_train_batch(seqs, m.cfg.max_seq_len);
            Tape<T> tape;
            auto table = item_table(tape, m);
            auto hid = backbone_hidden(tape, m, table, pb.ids, pb.batch, pb.seq_len, &drop);
            auto valid_h = tape.gather_rows(hid, pb.valid_rows);
            auto logits = tape.matmul_nt(valid_h, output_table(tape, m, table));
            auto loss = tape.cross_entropy_rows(logits, pb.targets);
            double lv = static_cast<double>(tape.value(loss).v[0]);
            if (!std::isfinite(lv)) {
                res.diverged = true;
                break;
            }
            m.params.zero_grads();
            tape.backward(loss);
            try {
                opt.step();
            } catch (const OptimError&) {
                res.diverged = true;
                break;
            }
            loss_sum += lv;
            ++batches;
        }
        if (res.diverged) break;

        double val = validation_ndcg(m, data, mask_history_for_val);
        res.epochs.push_back({epoch, batches ? loss_sum / static_cast<double>(batches) : 0, val});
        if (val > best_val) {
            best_val = val;
            res.best_epoch = epoch;
            best = snapshot_values(m.params);
        } else if (epoch - res.best_epoch >= m.cfg.patience) {
            break;
        }
    }
    restore_values(m.params, best);
    res.best_val_ndcg = best_val == -std::numeric_limits<double>::infinity() ? 0.0 : best_val;
    return res;
}

}  // namespace p2rec
