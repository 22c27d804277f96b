#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "p2rec/augment.hpp"
#include "p2rec/dataset.hpp"
#include "p2rec/optim.hpp"
#include "p2rec/pregroup.hpp"
#include "p2rec/tape.hpp"
#include "p2rec/transformer.hpp"

namespace p2rec {

// Token inventory for the preference-parsing prompts: four specials, the
// instruction words (the group count is spelled as a literal token), and the
// response marker. Interaction items enter prompts as projected embedding
// slots, not as vocabulary tokens.
struct Vocabulary {
    std::vector<std::string> tokens;   // id -> text
    int32_t pad = 0, bos = 1, eos = 2, unk = 3;
    int32_t response = 0;              // "Response:" marker id
    std::vector<int32_t> instruction;  // instruction word ids, in prompt order

    size_t size() const { return tokens.size(); }
};

Vocabulary build_vocabulary(int32_t num_groups);

// One right-padded batch of prompts. Non-slot tokens and item slots live in
// two compact pools; `sel` places pool rows into the padded layout.
struct PromptBatch {
    size_t batch = 0, seq_len = 0;
    std::vector<int32_t> tok_ids;              // non-slot token pool
    std::vector<int32_t> slot_item_ids;        // item-slot pool
    std::vector<std::pair<int, size_t>> sel;   // padded row -> (0, tok idx) | (1, slot idx)
    std::vector<int32_t> pos_ids;              // position within prompt, per padded row
    std::vector<size_t> resp_rows;             // row of the final response token per prompt
};

// Preference prompt: [bos] instruction [item slots] response-marker [eos].
// Slots keep the most recent items that fit within max_prompt_len.
PromptBatch make_preference_prompts(const Vocabulary& vocab,
                                    const std::vector<std::vector<int32_t>>& item_seqs,
                                    size_t max_prompt_len);

// Next-item pretraining prompt: [bos] [item slots]. Every position predicts
// the following item; pred_rows/targets come back aligned.
PromptBatch make_pretrain_prompts(const Vocabulary& vocab,
                                  const std::vector<std::vector<int32_t>>& item_seqs,
                                  size_t max_prompt_len, std::vector<size_t>* pred_rows,
                                  std::vector<int32_t>* targets);

// Mean total-variation distance between row-aligned distribution matrices.
double mean_tv_distance(const Tensor<float>& a, const Tensor<float>& b);

struct ProxyConfig {
    size_t d_model = 128;
    size_t n_layers = 4;
    size_t n_heads = 4;
    size_t ffn_mult = 4;
    size_t max_prompt_len = 50;
    double dropout = 0.0;
    size_t lora_rank = 8;
    double lora_alpha = 16.0;
    bool freeze_proj = false;        // keep the slot projection frozen during adaptation
    double pretrain_lr = 1e-3;
    int pretrain_epochs = 5;
    size_t batch_size = 64;
    double sft_lr = 1e-3;
    int sft_max_epochs = 50;
    int sft_patience = 5;
    double holdout_fraction = 0.1;   // users held out of adaptation for early stopping
    bool mean_over_users = true;     // loss reduction; raw sum when false
};

// Compact decoder-only LM that reads interaction prompts and emits a
// preference distribution over the K item groups. The base weights are frozen
// after pretraining; adaptation trains only the low-rank adapters, the slot
// projection (unless frozen), and the preference head.
template <typename T>
struct ProxyLM {
    ProxyConfig cfg;
    Vocabulary vocab;
    int32_t num_groups = 0;
    Tensor<T> item_emb;  // frozen backbone item embeddings, N x d_backbone
    ParamSet<T> params;
    bool lora_enabled = false;
    int64_t forward_count = 0;  // prompts pushed through the model, cumulative
};

template <typename T>
BlockSpec proxy_block_spec(const ProxyConfig& cfg) {
    BlockSpec spec;
    spec.d = cfg.d_model;
    spec.ffn_hidden = cfg.ffn_mult * cfg.d_model;
    spec.n_heads = cfg.n_heads;
    spec.act = Activation::gelu;
    spec.lora = true;
    spec.lora_rank = cfg.lora_rank;
    spec.lora_alpha = cfg.lora_alpha;
    return spec;
}

template <typename T>
ProxyLM<T> make_proxy(const ProxyConfig& cfg, int32_t num_groups, Tensor<T> item_emb,
                      uint64_t seed) {
    if (num_groups <= 0) throw ConfigError("make_proxy: need at least one group");
    if (item_emb.rows() == 0) throw ConfigError("make_proxy: empty item embedding table");
    ProxyLM<T> m;
    m.cfg = cfg;
    m.num_groups = num_groups;
    m.item_emb = std::move(item_emb);
    m.vocab = build_vocabulary(num_groups);
    const double w_std = 0.02;
    ParamSet<T>& ps = m.params;
    ps.add_normal("tok_emb", {m.vocab.size(), cfg.d_model}, w_std, seed);
    ps.add_normal("pos_emb", {cfg.max_prompt_len, cfg.d_model}, w_std, seed);
    BlockSpec spec = proxy_block_spec<T>(cfg);
    for (size_t l = 0; l < cfg.n_layers; ++l)
        add_transformer_block_params(ps, format("block%zu", l), spec, seed);
    ps.add_ones("lnf.g", {cfg.d_model});
    ps.add_zeros("lnf.b", {cfg.d_model});
    ps.add_normal("proj.w", {cfg.d_model, m.item_emb.cols()}, w_std, seed);
    ps.add_zeros("proj.b", {cfg.d_model});
    ps.add_normal("head.w", {static_cast<size_t>(num_groups), cfg.d_model}, w_std, seed);
    ps.add_zeros("head.b", {static_cast<size_t>(num_groups)});
    return m;
}

// Final-norm hidden states for every padded row, [batch*seq_len x d_model].
// Counts one forward per prompt.
template <typename T>
typename Tape<T>::Var proxy_hidden(Tape<T>& tape, ProxyLM<T>& m, const PromptBatch& pb,
                                   DropoutCtx* drop) {
    using Var = typename Tape<T>::Var;
    auto P = [&](const char* n) { return tape.param(m.params.get(n)); };
    Var toks = tape.embedding_rows(P("tok_emb"), pb.tok_ids);
    Var items = tape.input(m.item_emb);
    Var slot_src = tape.embedding_rows(items, pb.slot_item_ids);
    Var slots = tape.linear(slot_src, P("proj.w"), P("proj.b"));
    Var x = tape.interleave_rows(toks, slots, pb.sel);
    x = tape.add(x, tape.embedding_rows(P("pos_emb"), pb.pos_ids));
    if (drop && drop->p > 0) x = tape.dropout(x, drop->p, drop->next());
    BlockSpec spec = proxy_block_spec<T>(m.cfg);
    for (size_t l = 0; l < m.cfg.n_layers; ++l)
        x = transformer_block_forward(tape, x, m.params, format("block%zu", l), spec, pb.batch,
                                      pb.seq_len, m.lora_enabled, drop);
    x = tape.layer_norm(x, P("lnf.g"), P("lnf.b"));
    m.forward_count += static_cast<int64_t>(pb.batch);
    return x;
}

// Per-prompt summary state: the hidden row of the final response token.
template <typename T>
typename Tape<T>::Var proxy_summary(Tape<T>& tape, ProxyLM<T>& m, const PromptBatch& pb,
                                    DropoutCtx* drop) {
    return tape.gather_rows(proxy_hidden(tape, m, pb, drop), pb.resp_rows);
}

// g_hat = softmax(W h + b) over the K groups, [batch x K].
template <typename T>
typename Tape<T>::Var proxy_distribution(Tape<T>& tape, ProxyLM<T>& m,
                                         typename Tape<T>::Var h) {
    return tape.softmax_rows(
        tape.linear(h, tape.param(m.params.get("head.w")), tape.param(m.params.get("head.b"))));
}

// Freeze everything except the adapters, the preference head, and (unless
// configured frozen) the slot projection.
template <typename T>
void freeze_proxy_base(ProxyLM<T>& m) {
    for (auto& p : m.params) {
        bool is_proj = p->name.rfind("proj.", 0) == 0;
        bool adaptable = p->name.find(".lora.") != std::string::npos || is_proj ||
                         p->name.rfind("head.", 0) == 0;
        if (is_proj && m.cfg.freeze_proj) adaptable = false;
        p->trainable = adaptable;
    }
}

// Next-item pretraining of the base LM over the train splits, with the item
// logits tied to the projected slot table. Freezes the base afterwards.
// Returns per-epoch mean losses.
template <typename T>
std::vector<double> pretrain_proxy_base(ProxyLM<T>& m, const InteractionDataset& data,
                                        uint64_t seed) {
    if (m.lora_enabled)
        throw StageError("pretrain_proxy_base: adapters must be disabled during pretraining");
    std::vector<int32_t> users;
    for (int32_t u = 0; u < data.num_users; ++u)
        if (!data.train_items(u).empty()) users.push_back(u);
    if (users.empty()) throw StageError("pretrain_proxy_base: no train interactions");

    AdamConfig ocfg;
    ocfg.lr = m.cfg.pretrain_lr;
    Adam<T> opt(m.params, ocfg);
    std::vector<double> epoch_losses;
    std::vector<int32_t> all_items(static_cast<size_t>(m.item_emb.rows()));
    for (size_t i = 0; i < all_items.size(); ++i) all_items[i] = static_cast<int32_t>(i);

    for (int epoch = 0; epoch < m.cfg.pretrain_epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(seed, format("proxy-pre-shuffle-%d", epoch)));
        std::vector<int32_t> order = users;
        shuffle_rng.shuffle(order);
        DropoutCtx drop{m.cfg.dropout, Rng::derive_seed(seed, format("proxy-pre-drop-%d", epoch)), 0};
        double loss_sum = 0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += m.cfg.batch_size) {
            size_t end = std::min(order.size(), start + m.cfg.batch_size);
            std::vector<std::vector<int32_t>> seqs;
            for (size_t i = start; i < end; ++i) {
                auto tr = data.train_items(order[i]);
                seqs.emplace_back(tr.begin(), tr.end());
            }
            std::vector<size_t> pred_rows;
            std::vector<int32_t> targets;
            PromptBatch pb = make_pretrain_prompts(m.vocab, seqs, m.cfg.max_prompt_len,
                                                   &pred_rows, &targets);
            Tape<T> tape;
            auto hid = proxy_hidden(tape, m, pb, &drop);
            auto h_pred = tape.gather_rows(hid, pred_rows);
            auto items = tape.input(m.item_emb);
            auto table = tape.linear(tape.embedding_rows(items, all_items),
                                     tape.param(m.params.get("proj.w")),
                                     tape.param(m.params.get("proj.b")));
            auto logits = tape.matmul_nt(h_pred, table);
            auto loss = tape.cross_entropy_rows(logits, targets);
            double lv = static_cast<double>(tape.value(loss).v[0]);
            if (!std::isfinite(lv))
                throw StageError(format("pretrain_proxy_base: non-finite loss at epoch %d", epoch));
            m.params.zero_grads();
            tape.backward(loss);
            opt.step();
            loss_sum += lv;
            ++batches;
        }
        epoch_losses.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    }
    freeze_proxy_base(m);
    return epoch_losses;
}

// Skip pretraining but still freeze the randomly initialized base, for runs
// that only exercise the adaptation path.
template <typename T>
void freeze_random_base(ProxyLM<T>& m) {
    freeze_proxy_base(m);
}

struct SftEpochLog {
    int epoch = 0;
    double train_loss = 0;
    double holdout_loss = 0;  // NaN when no holdout users
    double holdout_tv = 0;    // mean total variation on holdout, NaN when none
    int64_t train_forwards = 0;  // forward-count delta of the training phase
};

struct SftResult {
    std::vector<SftEpochLog> epochs;
    int best_epoch = -1;
    bool diverged = false;
    std::vector<int32_t> train_users, holdout_users;
};

// Predicted preference distributions for the given users (train-split
// prompts), [users x K] in float.
template <typename T>
Tensor<float> predict_preferences(ProxyLM<T>& m, const InteractionDataset& data,
                                  const std::vector<int32_t>& users) {
    Tensor<float> out({users.size(), static_cast<size_t>(m.num_groups)});
    for (size_t start = 0; start < users.size(); start += m.cfg.batch_size) {
        size_t end = std::min(users.size(), start + m.cfg.batch_size);
        std::vector<std::vector<int32_t>> seqs;
        for (size_t i = start; i < end; ++i) {
            auto tr = data.train_items(users[i]);
            seqs.emplace_back(tr.begin(), tr.end());
        }
        PromptBatch pb = make_preference_prompts(m.vocab, seqs, m.cfg.max_prompt_len);
        Tape<T> tape(false);
        auto g = proxy_distribution(tape, m, proxy_summary(tape, m, pb, nullptr));
        const Tensor<T>& gv = tape.value(g);
        for (size_t r = 0; r < pb.batch; ++r)
            for (size_t j = 0; j < gv.cols(); ++j)
                out.v[(start + r) * out.cols() + j] = static_cast<float>(gv.v[r * gv.cols() + j]);
    }
    return out;
}

// User-level adaptation: squared error between the predicted and observed
// preference distributions, trained on the adapter/projection/head subset.
// Early-stopped on holdout loss; the model keeps the best-epoch weights.
template <typename T>
SftResult sft_train(ProxyLM<T>& m, const InteractionDataset& data,
                    const PreferenceTargets& targets, uint64_t seed) {
    if (targets.k != m.num_groups) throw ShapeError("sft_train: target K != model K");
    if (targets.targets.rows() != static_cast<size_t>(data.num_users))
        throw ShapeError("sft_train: target rows != user count");
    m.lora_enabled = true;

    SftResult res;
    std::vector<int32_t> users(static_cast<size_t>(data.num_users));
    for (size_t i = 0; i < users.size(); ++i) users[i] = static_cast<int32_t>(i);
    Rng split_rng(Rng::derive(seed, "sft-holdout"));
    split_rng.shuffle(users);
    size_t n_hold = static_cast<size_t>(m.cfg.holdout_fraction * static_cast<double>(users.size()));
    res.holdout_users.assign(users.begin(), users.begin() + n_hold);
    res.train_users.assign(users.begin() + n_hold, users.end());
    if (res.train_users.empty()) throw StageError("sft_train: holdout leaves no training users");

    AdamConfig ocfg;
    ocfg.lr = m.cfg.sft_lr;
    Adam<T> opt(m.params, ocfg);
    std::vector<Tensor<T>> best = snapshot_values(m.params);
    double best_score = std::numeric_limits<double>::infinity();
    const double nan = std::numeric_limits<double>::quiet_NaN();

    auto target_rows = [&](const std::vector<int32_t>& batch_users) {
        Tensor<T> t({batch_users.size(), static_cast<size_t>(m.num_groups)});
        for (size_t r = 0; r < batch_users.size(); ++r)
            for (size_t j = 0; j < t.cols(); ++j)
                t.v[r * t.cols() + j] = static_cast<T>(
                    targets.targets.v[static_cast<size_t>(batch_users[r]) * t.cols() + j]);
        return t;
    };
    auto holdout_eval = [&](double* tv) -> double {
        if (res.holdout_users.empty()) {
            *tv = nan;
            return nan;
        }
        Tensor<float> pred = predict_preferences(m, data, res.holdout_users);
        Tensor<float> tgt({res.holdout_users.size(), static_cast<size_t>(m.num_groups)});
        for (size_t r = 0; r < res.holdout_users.size(); ++r)
            for (size_t j = 0; j < tgt.cols(); ++j)
                tgt.v[r * tgt.cols() + j] =
                    targets.targets.v[static_cast<size_t>(res.holdout_users[r]) * tgt.cols() + j];
        *tv = mean_tv_distance(pred, tgt);
        double acc = 0;
        for (size_t i = 0; i < pred.numel(); ++i) {
            double d = static_cast<double>(pred.v[i]) - static_cast<double>(tgt.v[i]);
            acc += d * d;
        }
        return m.cfg.mean_over_users ? acc / static_cast<double>(pred.rows()) : acc;
    };

    for (int epoch = 0; epoch < m.cfg.sft_max_epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(seed, format("sft-shuffle-%d", epoch)));
        std::vector<int32_t> order = res.train_users;
        shuffle_rng.shuffle(order);
        DropoutCtx drop{m.cfg.dropout, Rng::derive_seed(seed, format("sft-drop-%d", epoch)), 0};
        int64_t forwards_before = m.forward_count;
        double loss_sum = 0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size() && !res.diverged;
             start += m.cfg.batch_size) {
            size_t end = std::min(order.size(), start + m.cfg.batch_size);
            std::vector<int32_t> batch_users(order.begin() + start, order.begin() + end);
            std::vector<std::vector<int32_t>> seqs;
            for (int32_t u : batch_users) {
                auto tr = data.train_items(u);
                seqs.emplace_back(tr.begin(), tr.end());
            }
            PromptBatch pb = make_preference_prompts(m.vocab, seqs, m.cfg.max_prompt_len);
            Tape<T> tape;
            auto g = proxy_distribution(tape, m, proxy_summary(tape, m, pb, &drop));
            auto tgt = tape.input(target_rows(batch_users));
            auto loss = tape.mse_loss(g, tgt, m.cfg.mean_over_users);
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
        int64_t train_forwards = m.forward_count - forwards_before;
        if (res.diverged) break;

        double tv = nan;
        double hold = holdout_eval(&tv);
        double train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        res.epochs.push_back({epoch, train_loss, hold, tv, train_forwards});
        double score = res.holdout_users.empty() ? train_loss : hold;
        if (score < best_score) {
            best_score = score;
            res.best_epoch = epoch;
            best = snapshot_values(m.params);
        } else if (epoch - res.best_epoch >= m.cfg.sft_patience) {
            break;
        }
    }
    restore_values(m.params, best);
    return res;
}

// One single-item prompt per catalog item; the response-token hidden state
// becomes the knowledge embedding and the head output the group distribution.
template <typename T>
EnhancedItemSet embed_all_items(ProxyLM<T>& m) {
    size_t n = m.item_emb.rows();
    EnhancedItemSet out;
    out.knowledge = Tensor<float>({n, m.cfg.d_model});
    out.distributions = Tensor<float>({n, static_cast<size_t>(m.num_groups)});
    for (size_t start = 0; start < n; start += m.cfg.batch_size) {
        size_t end = std::min(n, start + m.cfg.batch_size);
        std::vector<std::vector<int32_t>> seqs;
        for (size_t v = start; v < end; ++v) seqs.push_back({static_cast<int32_t>(v)});
        PromptBatch pb = make_preference_prompts(m.vocab, seqs, m.cfg.max_prompt_len);
        Tape<T> tape(false);
        auto h = proxy_summary(tape, m, pb, nullptr);
        auto g = proxy_distribution(tape, m, h);
        const Tensor<T>& hv = tape.value(h);
        const Tensor<T>& gv = tape.value(g);
        for (size_t r = 0; r < pb.batch; ++r) {
            for (size_t j = 0; j < hv.cols(); ++j)
                out.knowledge.v[(start + r) * hv.cols() + j] =
                    static_cast<float>(hv.v[r * hv.cols() + j]);
            for (size_t j = 0; j < gv.cols(); ++j)
                out.distributions.v[(start + r) * gv.cols() + j] =
                    static_cast<float>(gv.v[r * gv.cols() + j]);
        }
    }
    return out;
}

}  // namespace p2rec
