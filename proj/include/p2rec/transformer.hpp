#pragma once

#include <string>

#include "p2rec/tape.hpp"

namespace p2rec {

enum class Activation { relu, gelu };

// Per-forward dropout stream; nullptr means eval mode (no dropout).
struct DropoutCtx {
    double p = 0.0;
    uint64_t base_seed = 0;
    uint64_t counter = 0;

    uint64_t next() {
        uint64_t c = counter++;
        return fnv1a64(&c, sizeof(c), base_seed);
    }
};

struct BlockSpec {
    size_t d = 64;
    size_t ffn_hidden = 64;
    size_t n_heads = 2;
    Activation act = Activation::relu;
    bool lora = false;  // adapters on the query/value projections
    size_t lora_rank = 8;
    double lora_alpha = 16.0;
};

// Pre-norm block: x + attn(ln1(x)), then x + ffn(ln2(x)).
template <typename T>
void add_transformer_block_params(ParamSet<T>& ps, const std::string& prefix,
                                  const BlockSpec& spec, uint64_t seed) {
    const double w_std = 0.02;
    ps.add_ones(prefix + ".ln1.g", {spec.d});
    ps.add_zeros(prefix + ".ln1.b", {spec.d});
    ps.add_normal(prefix + ".wq", {spec.d, spec.d}, w_std, seed);
    ps.add_zeros(prefix + ".bq", {spec.d});
    ps.add_normal(prefix + ".wk", {spec.d, spec.d}, w_std, seed);
    ps.add_zeros(prefix + ".bk", {spec.d});
    ps.add_normal(prefix + ".wv", {spec.d, spec.d}, w_std, seed);
    ps.add_zeros(prefix + ".bv", {spec.d});
    ps.add_normal(prefix + ".wo", {spec.d, spec.d}, w_std, seed);
    ps.add_zeros(prefix + ".bo", {spec.d});
    ps.add_ones(prefix + ".ln2.g", {spec.d});
    ps.add_zeros(prefix + ".ln2.b", {spec.d});
    ps.add_normal(prefix + ".wf1", {spec.ffn_hidden, spec.d}, w_std, seed);
    ps.add_zeros(prefix + ".bf1", {spec.ffn_hidden});
    ps.add_normal(prefix + ".wf2", {spec.d, spec.ffn_hidden}, w_std, seed);
    ps.add_zeros(prefix + ".bf2", {spec.d});
    if (spec.lora) {
        // A ~ N(0, 0.02^2), B = 0: adapters start as an exact no-op.
        ps.add_normal(prefix + ".lora.aq", {spec.lora_rank, spec.d}, w_std, seed);
        ps.add_zeros(prefix + ".lora.bq", {spec.d, spec.lora_rank});
        ps.add_normal(prefix + ".lora.av", {spec.lora_rank, spec.d}, w_std, seed);
        ps.add_zeros(prefix + ".lora.bv", {spec.d, spec.lora_rank});
    }
}

template <typename T>
typename Tape<T>::Var transformer_block_forward(Tape<T>& tape, typename Tape<T>::Var x,
                                                ParamSet<T>& ps, const std::string& prefix,
                                                const BlockSpec& spec, size_t batch,
                                                size_t seq_len, bool lora_enabled,
                                                DropoutCtx* drop) {
    using Var = typename Tape<T>::Var;
    auto P = [&](const std::string& n) { return tape.param(ps.get(prefix + n)); };
    Var xn = tape.layer_norm(x, P(".ln1.g"), P(".ln1.b"));
    Var q, v;
    if (lora_enabled) {
        T scaling = static_cast<T>(spec.lora_alpha / static_cast<double>(spec.lora_rank));
        q = tape.lora_linear(xn, P(".wq"), P(".bq"), P(".lora.aq"), P(".lora.bq"), scaling);
        v = tape.lora_linear(xn, P(".wv"), P(".bv"), P(".lora.av"), P(".lora.bv"), scaling);
    } else {
        q = tape.linear(xn, P(".wq"), P(".bq"));
        v = tape.linear(xn, P(".wv"), P(".bv"));
    }
    Var k = tape.linear(xn, P(".wk"), P(".bk"));
    Var a = tape.causal_attention(q, k, v, batch, seq_len, spec.n_heads);
    a = tape.linear(a, P(".wo"), P(".bo"));
    if (drop && drop->p > 0) a = tape.dropout(a, drop->p, drop->next());
    x = tape.add(x, a);

    Var xn2 = tape.layer_norm(x, P(".ln2.g"), P(".ln2.b"));
    Var f = tape.linear(xn2, P(".wf1"), P(".bf1"));
    f = spec.act == Activation::relu ? tape.relu(f) : tape.gelu(f);
    f = tape.linear(f, P(".wf2"), P(".bf2"));
    if (drop && drop->p > 0) f = tape.dropout(f, drop->p, drop->next());
    return tape.add(x, f);
}

}  // namespace p2rec
