#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "p2rec/params.hpp"
#include "p2rec/rng.hpp"
#include "p2rec/tensor.hpp"

namespace p2rec {

// Reverse-mode tape. A graph is built per forward pass; backward() walks the
// nodes in reverse creation order (a valid topological order) and accumulates
// parameter gradients into the bound ParamSet entries. Gradient accumulation
// is sequential per tensor element, so repeated runs are bit-identical.
template <typename T>
class Tape {
public:
    using Var = int;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    const Tensor<T>& value(Var id) const { return nodes_[id].value; }
    const Tensor<T>& grad(Var id) const { return nodes_[id].grad; }

    Var input(Tensor<T> val, bool requires_grad = false) {
        return push(std::move(val), requires_grad && grad_enabled_, {});
    }

    Var param(Param<T>& p) {
        Var id = push_view(p.value, grad_enabled_ && p.trainable);
        Param<T>* pp = &p;
        nodes_[id].back = [this, id, pp]() {
            if (!nodes_[id].requires_grad) return;
            const Tensor<T>& g = nodes_[id].grad;
            for (size_t i = 0; i < g.numel(); ++i) pp->grad.v[i] += g.v[i];
        };
        return id;
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        for (size_t i = 0; i < out.numel(); ++i) out.v[i] += bv.v[i];
        Var id = push(std::move(out), needs(a) || needs(b), {a, b});
        nodes_[id].back = [this, id, a, b]() {
            const Tensor<T>& g = nodes_[id].grad;
            if (needs(a)) {
                Tensor<T>& ga = grad_buf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
            }
            if (needs(b)) {
                Tensor<T>& gb = grad_buf(b);
                for (size_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i];
            }
        };
        return id;
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        for (size_t i = 0; i < out.numel(); ++i) out.v[i] *= bv.v[i];
        Var id = push(std::move(out), needs(a) || needs(b), {a, b});
        nodes_[id].back = [this, id, a, b]() {
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>& av = nodes_[a].value;
            const Tensor<T>& bv = nodes_[b].value;
            if (needs(a)) {
                Tensor<T>& ga = grad_buf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * bv.v[i];
            }
            if (needs(b)) {
                Tensor<T>& gb = grad_buf(b);
                for (size_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i] * av.v[i];
            }
        };
        return id;
    }

    Var scale(Var a, T c) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.v) x *= c;
        Var id = push(std::move(out), needs(a), {a});
        nodes_[id].back = [this, id, a, c]() {
            if (!needs(a)) return;
            const Tensor<T>& g = nodes_[id].grad;
            Tensor<T>& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i) ga.v[i] += c * g.v[i];
        };
        return id;
    }

    // out[i][j] = x[i][j] * col[i], col is [rows x 1]
    Var mul_colvec(Var x, Var col) {
        const Tensor<T>&xv = nodes_[x].value, &cv = nodes_[col].value;
        if (cv.numel() != xv.rows()) throw ShapeError("mul_colvec: column length != rows");
        Tensor<T> out = xv;
        size_t r = out.rows(), c = out.cols();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) out.v[i * c + j] *= cv.v[i];
        Var id = push(std::move(out), needs(x) || needs(col), {x, col});
        nodes_[id].back = [this, id, x, col]() {
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>&xv = nodes_[x].value, &cv = nodes_[col].value;
            size_t r = g.rows(), c = g.cols();
            if (needs(x)) {
                Tensor<T>& gx = grad_buf(x);
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gx.v[i * c + j] += g.v[i * c + j] * cv.v[i];
            }
            if (needs(col)) {
                Tensor<T>& gc = grad_buf(col);
                for (size_t i = 0; i < r; ++i) {
                    T acc = 0;
                    for (size_t j = 0; j < c; ++j) acc += g.v[i * c + j] * xv.v[i * c + j];
                    gc.v[i] += acc;
                }
            }
        };
        return id;
    }

    Var one_minus(Var a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.v) x = T(1) - x;
        Var id = push(std::move(out), needs(a), {a});
        nodes_[id].back = [this, id, a]() {
            if (!needs(a)) return;
            const Tensor<T>& g = nodes_[id].grad;
            Tensor<T>& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i) ga.v[i] -= g.v[i];
        };
        return id;
    }

    Var relu(Var a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.v) x = x > T(0) ? x : T(0);
        Var id = push(std::move(out), needs(a), {a});
        nodes_[id].back = [this, id, a]() {
            if (!needs(a)) return;
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>& av = nodes_[a].value;
            Tensor<T>& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i)
                if (av.v[i] > T(0)) ga.v[i] += g.v[i];
        };
        return id;
    }

    // Exact GELU (erf form), smooth for finite-difference checks.
    Var gelu(Var a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.v) {
            double xv = static_cast<double>(x);
            x = static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * M_SQRT1_2)));
        }
        Var id = push(std::move(out), needs(a), {a});
        nodes_[id].back = [this, id, a]() {
            if (!needs(a)) return;
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>& av = nodes_[a].value;
            Tensor<T>& ga = grad_buf(a);
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            for (size_t i = 0; i < g.numel(); ++i) {
                double x = static_cast<double>(av.v[i]);
                double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                ga.v[i] += g.v[i] * static_cast<T>(cdf + x * pdf);
            }
        };
        return id;
    }

    Var sigmoid(Var a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.v) {
            double xv = static_cast<double>(x);
            x = static_cast<T>(xv >= 0 ? 1.0 / (1.0 + std::exp(-xv))
                                       : std::exp(xv) / (1.0 + std::exp(xv)));
        }
        Var id = push(std::move(out), needs(a), {a});
        nodes_[id].back = [this, id, a]() {
            if (!needs(a)) return;
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>& ov = nodes_[id].value;
            Tensor<T>& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i)
                ga.v[i] += g.v[i] * ov.v[i] * (T(1) - ov.v[i]);
        };
        return id;
    }

    // ---- matrix ops ----

    // out = a * b, shapes [m x k] * [k x n]
    Var matmul(Var a, Var b) {
        const Tensor<T>&av = nodes_[a].value, &bv = nodes_[b].value;
        if (av.cols() != bv.rows())
            throw ShapeError(format("matmul: inner dims %zu vs %zu", av.cols(), bv.rows()));
        Tensor<T> out({av.rows(), bv.cols()});
        gemm_nn_acc(av.data(), bv.data(), out.data(), av.rows(), av.cols(), bv.cols());
        Var id = push(std::move(out), needs(a) || needs(b), {a, b});
        nodes_[id].back = [this, id, a, b]() {
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>&av = nodes_[a].value, &bv = nodes_[b].value;
            size_t m = av.rows(), k = av.cols(), n = bv.cols();
            if (needs(a))  // dA = dC * B^T
                gemm_nt_acc(g.data(), bv.data(), grad_buf(a).data(), m, n, k);
            if (needs(b))  // dB = A^T * dC
                gemm_tn_acc(av.data(), g.data(), grad_buf(b).data(), k, m, n);
        };
        return id;
    }

    // out = a * b^T, shapes [m x k] * [n x k]. Used for y = x W^T with W[out x in].
    Var matmul_nt(Var a, Var b) {
        const Tensor<T>&av = nodes_[a].value, &bv = nodes_[b].value;
        if (av.cols() != bv.cols())
            throw ShapeError(format("matmul_nt: inner dims %zu vs %zu", av.cols(), bv.cols()));
        Tensor<T> out({av.rows(), bv.rows()});
        gemm_nt_acc(av.data(), bv.data(), out.data(), av.rows(), av.cols(), bv.rows());
        Var id = push(std::move(out), needs(a) || needs(b), {a, b});
        nodes_[id].back = [this, id, a, b]() {
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>&av = nodes_[a].value, &bv = nodes_[b].value;
            size_t m = av.rows(), k = av.cols(), n = bv.rows();
            if (needs(a))  // dA = dC * B
                gemm_nn_acc(g.data(), bv.data(), grad_buf(a).data(), m, n, k);
            if (needs(b))  // dB = dC^T * A
                gemm_tn_acc(g.data(), av.data(), grad_buf(b).data(), n, m, k);
        };
        return id;
    }

    Var add_bias(Var x, Var b) {
        const Tensor<T>&xv = nodes_[x].value, &bv = nodes_[b].value;
        if (xv.cols() != bv.numel())
            throw ShapeError(format("add_bias: %zu cols vs bias %zu", xv.cols(), bv.numel()));
        Tensor<T> out = xv;
        size_t r = out.rows(), c = out.cols();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) out.v[i * c + j] += bv.v[j];
        Var id = push(std::move(out), needs(x) || needs(b), {x, b});
        nodes_[id].back = [this, id, x, b]() {
            const Tensor<T>& g = nodes_[id].grad;
            size_t r = g.rows(), c = g.cols();
            if (needs(x)) {
                Tensor<T>& gx = grad_buf(x);
                for (size_t i = 0; i < g.numel(); ++i) gx.v[i] += g.v[i];
            }
            if (needs(b)) {
                Tensor<T>& gb = grad_buf(b);
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gb.v[j] += g.v[i * c + j];
            }
        };
        return id;
    }

    // y = x W^T + b
    Var linear(Var x, Var w, Var b) { return add_bias(matmul_nt(x, w), b); }

    // y = x W^T + scaling * (x A^T) B^T + b. Base W and bias may be frozen;
    // with B == 0 the LoRA branch contributes exact zeros.
    Var lora_linear(Var x, Var w, Var b, Var a_lr, Var b_lr, T scaling) {
        Var base = linear(x, w, b);
        Var low = matmul_nt(x, a_lr);
        Var up = matmul_nt(low, b_lr);
        return add(base, scale(up, scaling));
    }

    Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
        const Tensor<T>& xv = nodes_[x].value;
        size_t r = xv.rows(), c = xv.cols();
        Tensor<T> out({r, c});
        Tensor<T> xhat({r, c});
        std::vector<T> inv_std(r);
        const Tensor<T>&gv = nodes_[gain].value, &bv = nodes_[bias].value;
        for (size_t i = 0; i < r; ++i) {
            const T* row = xv.data() + i * c;
            T mean = 0;
            for (size_t j = 0; j < c; ++j) mean += row[j];
            mean /= static_cast<T>(c);
            T var = 0;
            for (size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
            var /= static_cast<T>(c);
            T istd = T(1) / std::sqrt(var + eps);
            inv_std[i] = istd;
            for (size_t j = 0; j < c; ++j) {
                T xh = (row[j] - mean) * istd;
                xhat.v[i * c + j] = xh;
                out.v[i * c + j] = gv.v[j] * xh + bv.v[j];
            }
        }
        Var id = push(std::move(out), needs(x) || needs(gain) || needs(bias), {x, gain, bias});
        auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
        auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
        nodes_[id].back = [this, id, x, gain, bias, xh, istd]() {
            const Tensor<T>& g = nodes_[id].grad;
            size_t r = g.rows(), c = g.cols();
            const Tensor<T>& gv = nodes_[gain].value;
            if (needs(gain)) {
                Tensor<T>& gg = grad_buf(gain);
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gg.v[j] += g.v[i * c + j] * xh->v[i * c + j];
            }
            if (needs(bias)) {
                Tensor<T>& gb = grad_buf(bias);
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gb.v[j] += g.v[i * c + j];
            }
            if (needs(x)) {
                Tensor<T>& gx = grad_buf(x);
                for (size_t i = 0; i < r; ++i) {
                    T sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (size_t j = 0; j < c; ++j) {
                        T dxh = g.v[i * c + j] * gv.v[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh->v[i * c + j];
                    }
                    T inv_c = T(1) / static_cast<T>(c);
                    for (size_t j = 0; j < c; ++j) {
                        T dxh = g.v[i * c + j] * gv.v[j];
                        gx.v[i * c + j] += (*istd)[i] * (dxh - inv_c * sum_dxhat -
                                                         xh->v[i * c + j] * inv_c * sum_dxhat_xhat);
                    }
                }
            }
        };
        return id;
    }

    // Numerically stable row-wise softmax.
    Var softmax_rows(Var x) {
        const Tensor<T>& xv = nodes_[x].value;
        size_t r = xv.rows(), c = xv.cols();
        Tensor<T> out({r, c});
        for (size_t i = 0; i < r; ++i) {
            const T* row = xv.data() + i * c;
            T mx = row[0];
            for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            T sum = 0;
            for (size_t j = 0; j < c; ++j) {
                T e = std::exp(row[j] - mx);
                out.v[i * c + j] = e;
                sum += e;
            }
            T inv = T(1) / sum;
            for (size_t j = 0; j < c; ++j) out.v[i * c + j] *= inv;
        }
        Var id = push(std::move(out), needs(x), {x});
        nodes_[id].back = [this, id, x]() {
            if (!needs(x)) return;
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>& p = nodes_[id].value;
            Tensor<T>& gx = grad_buf(x);
            size_t r = g.rows(), c = g.cols();
            for (size_t i = 0; i < r; ++i) {
                T dot = 0;
                for (size_t j = 0; j < c; ++j) dot += g.v[i * c + j] * p.v[i * c + j];
                for (size_t j = 0; j < c; ++j)
                    gx.v[i * c + j] += p.v[i * c + j] * (g.v[i * c + j] - dot);
            }
        };
        return id;
    }

    // ---- structural ops ----

    Var embedding_rows(Var table, std::vector<int32_t> ids) {
        const Tensor<T>& tv = nodes_[table].value;
        size_t c = tv.cols();
        Tensor<T> out({ids.size(), c});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= tv.rows())
                throw ShapeError(format("embedding_rows: id %d out of range %zu", ids[i], tv.rows()));
            std::copy_n(tv.data() + static_cast<size_t>(ids[i]) * c, c, out.data() + i * c);
        }
        Var id = push(std::move(out), needs(table), {table});
        auto ids_p = std::make_shared<std::vector<int32_t>>(std::move(ids));
        nodes_[id].back = [this, id, table, ids_p]() {
            if (!needs(table)) return;
            const Tensor<T>& g = nodes_[id].grad;
            Tensor<T>& gt = grad_buf(table);
            size_t c = g.cols();
            for (size_t i = 0; i < ids_p->size(); ++i) {
                T* dst = gt.data() + static_cast<size_t>((*ids_p)[i]) * c;
                const T* src = g.data() + i * c;
                for (size_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        };
        return id;
    }

    Var gather_rows(Var x, std::vector<size_t> rows) {
        const Tensor<T>& xv = nodes_[x].value;
        size_t c = xv.cols();
        Tensor<T> out({rows.size(), c});
        for (size_t i = 0; i < rows.size(); ++i)
            std::copy_n(xv.data() + rows[i] * c, c, out.data() + i * c);
        Var id = push(std::move(out), needs(x), {x});
        auto rows_p = std::make_shared<std::vector<size_t>>(std::move(rows));
        nodes_[id].back = [this, id, x, rows_p]() {
            if (!needs(x)) return;
            const Tensor<T>& g = nodes_[id].grad;
            Tensor<T>& gx = grad_buf(x);
            size_t c = g.cols();
            for (size_t i = 0; i < rows_p->size(); ++i) {
                T* dst = gx.data() + (*rows_p)[i] * c;
                const T* src = g.data() + i * c;
                for (size_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        };
        return id;
    }

    // Output row i is sel[i].second-th row of a (sel[i].first == 0) or b (== 1).
    // Used to interleave token embeddings with projected item-embedding slots.
    Var interleave_rows(Var a, Var b, std::vector<std::pair<int, size_t>> sel) {
        const Tensor<T>&av = nodes_[a].value, &bv = nodes_[b].value;
        if (av.cols() != bv.cols()) throw ShapeError("interleave_rows: column mismatch");
        size_t c = av.cols();
        Tensor<T> out({sel.size(), c});
        for (size_t i = 0; i < sel.size(); ++i) {
            const Tensor<T>& src = sel[i].first == 0 ? av : bv;
            std::copy_n(src.data() + sel[i].second * c, c, out.data() + i * c);
        }
        Var id = push(std::move(out), needs(a) || needs(b), {a, b});
        auto sel_p = std::make_shared<std::vector<std::pair<int, size_t>>>(std::move(sel));
        nodes_[id].back = [this, id, a, b, sel_p]() {
            const Tensor<T>& g = nodes_[id].grad;
            size_t c = g.cols();
            for (size_t i = 0; i < sel_p->size(); ++i) {
                Var target = (*sel_p)[i].first == 0 ? a : b;
                if (!needs(target)) continue;
                T* dst = grad_buf(target).data() + (*sel_p)[i].second * c;
                const T* src = g.data() + i * c;
                for (size_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        };
        return id;
    }

    Var concat_cols(Var a, Var b) {
        const Tensor<T>&av = nodes_[a].value, &bv = nodes_[b].value;
        if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row mismatch");
        size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
        Tensor<T> out({r, ca + cb});
        for (size_t i = 0; i < r; ++i) {
            std::copy_n(av.data() + i * ca, ca, out.data() + i * (ca + cb));
            std::copy_n(bv.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
        }
        Var id = push(std::move(out), needs(a) || needs(b), {a, b});
        nodes_[id].back = [this, id, a, b, ca, cb]() {
            const Tensor<T>& g = nodes_[id].grad;
            size_t r = g.rows();
            if (needs(a)) {
                Tensor<T>& ga = grad_buf(a);
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < ca; ++j) ga.v[i * ca + j] += g.v[i * (ca + cb) + j];
            }
            if (needs(b)) {
                Tensor<T>& gb = grad_buf(b);
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < cb; ++j) gb.v[i * cb + j] += g.v[i * (ca + cb) + ca + j];
            }
        };
        return id;
    }

    // Inverted dropout with a mask derived from the given seed.
    Var dropout(Var x, double p, uint64_t seed) {
        if (p <= 0.0) return x;
        const Tensor<T>& xv = nodes_[x].value;
        Tensor<T> out = xv;
        auto mask = std::make_shared<std::vector<T>>(xv.numel());
        Rng rng(seed);
        T keep_scale = static_cast<T>(1.0 / (1.0 - p));
        for (size_t i = 0; i < out.numel(); ++i) {
            T m = rng.uniform() >= p ? keep_scale : T(0);
            (*mask)[i] = m;
            out.v[i] *= m;
        }
        Var id = push(std::move(out), needs(x), {x});
        nodes_[id].back = [this, id, x, mask]() {
            if (!needs(x)) return;
            const Tensor<T>& g = nodes_[id].grad;
            Tensor<T>& gx = grad_buf(x);
            for (size_t i = 0; i < g.numel(); ++i) gx.v[i] += g.v[i] * (*mask)[i];
        };
        return id;
    }

    // ---- fused sequence ops ----

    // Multi-head causal self-attention over a batch of padded rows.
    // q, k, v are [batch*seq_len x d]; row b*seq_len + t is position t of row b.
    // Queries attend only to keys at positions <= their own.
    Var causal_attention(Var q, Var k, Var v, size_t batch, size_t seq_len, size_t n_heads) {
        const Tensor<T>& qv = nodes_[q].value;
        size_t d = qv.cols();
        if (d % n_heads != 0)
            throw ShapeError(format("causal_attention: d=%zu not divisible by heads=%zu", d, n_heads));
        if (qv.rows() != batch * seq_len)
            throw ShapeError("causal_attention: rows != batch*seq_len");
        size_t dh = n_heads ? d / n_heads : 0;
        T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor<T> out({batch * seq_len, d});
        // probs[(b*H + h)][i*L + j] for j <= i
        auto probs = std::make_shared<std::vector<Tensor<T>>>();
        probs->assign(batch * n_heads, Tensor<T>({seq_len, seq_len}));
        const Tensor<T>& kv = nodes_[k].value;
        const Tensor<T>& vv = nodes_[v].value;
#pragma omp parallel for schedule(static) if (batch * n_heads > 1)
        for (ptrdiff_t bh = 0; bh < static_cast<ptrdiff_t>(batch * n_heads); ++bh) {
            size_t b = static_cast<size_t>(bh) / n_heads, h = static_cast<size_t>(bh) % n_heads;
            size_t row0 = b * seq_len, col0 = h * dh;
            Tensor<T>& prob = (*probs)[bh];
            for (size_t i = 0; i < seq_len; ++i) {
                const T* qi = qv.data() + (row0 + i) * d + col0;
                // scores over j <= i, stable softmax
                T mx = -std::numeric_limits<T>::infinity();
                std::vector<T> s(i + 1);
                for (size_t j = 0; j <= i; ++j) {
                    const T* kj = kv.data() + (row0 + j) * d + col0;
                    T acc = 0;
                    for (size_t p = 0; p < dh; ++p) acc += qi[p] * kj[p];
                    s[j] = acc * inv_sqrt;
                    mx = std::max(mx, s[j]);
                }
                T sum = 0;
                for (size_t j = 0; j <= i; ++j) {
                    s[j] = std::exp(s[j] - mx);
                    sum += s[j];
                }
                T inv = T(1) / sum;
                T* orow = out.data() + (row0 + i) * d + col0;
                for (size_t j = 0; j <= i; ++j) {
                    T pij = s[j] * inv;
                    prob.v[i * seq_len + j] = pij;
                    const T* vj = vv.data() + (row0 + j) * d + col0;
                    for (size_t p = 0; p < dh; ++p) orow[p] += pij * vj[p];
                }
            }
        }
        Var id = push(std::move(out), needs(q) || needs(k) || needs(v), {q, k, v});
        nodes_[id].back = [this, id, q, k, v, batch, seq_len, n_heads, dh, d, inv_sqrt, probs]() {
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>& qv = nodes_[q].value;
            const Tensor<T>& kv = nodes_[k].value;
            const Tensor<T>& vv = nodes_[v].value;
            bool nq = needs(q), nk = needs(k), nv = needs(v);
            Tensor<T>* gq = nq ? &grad_buf(q) : nullptr;
            Tensor<T>* gk = nk ? &grad_buf(k) : nullptr;
            Tensor<T>* gv = nv ? &grad_buf(v) : nullptr;
            // (b, h) blocks touch disjoint row/col ranges of the grads.
#pragma omp parallel for schedule(static) if (batch * n_heads > 1)
            for (ptrdiff_t bh = 0; bh < static_cast<ptrdiff_t>(batch * n_heads); ++bh) {
                size_t b = static_cast<size_t>(bh) / n_heads, h = static_cast<size_t>(bh) % n_heads;
                size_t row0 = b * seq_len, col0 = h * dh;
                const Tensor<T>& prob = (*probs)[bh];
                std::vector<T> dp(seq_len), ds(seq_len);
                for (size_t i = 0; i < seq_len; ++i) {
                    const T* grow = g.data() + (row0 + i) * d + col0;
                    // dV and dP
                    T dot = 0;
                    for (size_t j = 0; j <= i; ++j) {
                        const T* vj = vv.data() + (row0 + j) * d + col0;
                        T acc = 0;
                        for (size_t p = 0; p < dh; ++p) acc += grow[p] * vj[p];
                        dp[j] = acc;
                        dot += acc * prob.v[i * seq_len + j];
                        if (nv) {
                            T* dvj = gv->data() + (row0 + j) * d + col0;
                            T pij = prob.v[i * seq_len + j];
                            for (size_t p = 0; p < dh; ++p) dvj[p] += pij * grow[p];
                        }
                    }
                    // softmax backward, then dQ/dK
                    for (size_t j = 0; j <= i; ++j)
                        ds[j] = prob.v[i * seq_len + j] * (dp[j] - dot) * inv_sqrt;
                    if (nq) {
                        T* dqi = gq->data() + (row0 + i) * d + col0;
                        for (size_t j = 0; j <= i; ++j) {
                            const T* kj = kv.data() + (row0 + j) * d + col0;
                            for (size_t p = 0; p < dh; ++p) dqi[p] += ds[j] * kj[p];
                        }
                    }
                    if (nk) {
                        const T* qi = qv.data() + (row0 + i) * d + col0;
                        for (size_t j = 0; j <= i; ++j) {
                            T* dkj = gk->data() + (row0 + j) * d + col0;
                            for (size_t p = 0; p < dh; ++p) dkj[p] += ds[j] * qi[p];
                        }
                    }
                }
            }
        };
        return id;
    }

    // Single-layer GRU unrolled over time. x is [batch*seq_len x d_in], output
    // hidden states [batch*seq_len x d_h]. Initial hidden state is zero.
    //   z = sigm(x Wz^T + h Uz^T + bz), r = sigm(x Wr^T + h Ur^T + br)
    //   n = tanh(x Wn^T + r . (h Un^T) + bn), h' = (1-z).n + z.h
    Var gru_seq(Var x, Var wz, Var uz, Var bz, Var wr, Var ur, Var br, Var wn, Var un, Var bn,
                size_t batch, size_t seq_len) {
        const Tensor<T>& xv = nodes_[x].value;
        size_t din = xv.cols();
        size_t dh = nodes_[wz].value.rows();
        if (xv.rows() != batch * seq_len) throw ShapeError("gru_seq: rows != batch*seq_len");
        struct StepCache {
            Tensor<T> z, r, n, m;  // m = h_prev Un^T
        };
        auto cache = std::make_shared<std::vector<StepCache>>(seq_len);
        auto hs = std::make_shared<Tensor<T>>(Tensor<T>({batch * seq_len, dh}));  // h_t per step
        Tensor<T> h_prev({batch, dh});
        Tensor<T> xt({batch, din});
        const Tensor<T>&wzv = nodes_[wz].value, &uzv = nodes_[uz].value, &bzv = nodes_[bz].value;
        const Tensor<T>&wrv = nodes_[wr].value, &urv = nodes_[ur].value, &brv = nodes_[br].value;
        const Tensor<T>&wnv = nodes_[wn].value, &unv = nodes_[un].value, &bnv = nodes_[bn].value;
        for (size_t t = 0; t < seq_len; ++t) {
            for (size_t b = 0; b < batch; ++b)
                std::copy_n(xv.data() + (b * seq_len + t) * din, din, xt.data() + b * din);
            StepCache& sc = (*cache)[t];
            sc.z = Tensor<T>({batch, dh});
            sc.r = Tensor<T>({batch, dh});
            sc.n = Tensor<T>({batch, dh});
            sc.m = Tensor<T>({batch, dh});
            Tensor<T> az({batch, dh}), ar({batch, dh}), an({batch, dh});
            gemm_nt_acc(xt.data(), wzv.data(), az.data(), batch, din, dh);
            gemm_nt_acc(h_prev.data(), uzv.data(), az.data(), batch, dh, dh);
            gemm_nt_acc(xt.data(), wrv.data(), ar.data(), batch, din, dh);
            gemm_nt_acc(h_prev.data(), urv.data(), ar.data(), batch, dh, dh);
            gemm_nt_acc(h_prev.data(), unv.data(), sc.m.data(), batch, dh, dh);
            gemm_nt_acc(xt.data(), wnv.data(), an.data(), batch, din, dh);
            for (size_t b = 0; b < batch; ++b) {
                for (size_t j = 0; j < dh; ++j) {
                    size_t ix = b * dh + j;
                    T zv = sigmoid_scalar(az.v[ix] + bzv.v[j]);
                    T rv = sigmoid_scalar(ar.v[ix] + brv.v[j]);
                    T nv = std::tanh(an.v[ix] + rv * sc.m.v[ix] + bnv.v[j]);
                    sc.z.v[ix] = zv;
                    sc.r.v[ix] = rv;
                    sc.n.v[ix] = nv;
                    T hv = (T(1) - zv) * nv + zv * h_prev.v[ix];
                    hs->v[(b * seq_len + t) * dh + j] = hv;
                }
            }
            for (size_t b = 0; b < batch; ++b)
                std::copy_n(hs->data() + (b * seq_len + t) * dh, dh, h_prev.data() + b * dh);
        }
        Tensor<T> out = *hs;
        bool rg = needs(x) || needs(wz) || needs(uz) || needs(bz) || needs(wr) || needs(ur) ||
                  needs(br) || needs(wn) || needs(un) || needs(bn);
        Var id = push(std::move(out), rg, {x, wz, uz, bz, wr, ur, br, wn, un, bn});
        nodes_[id].back = [this, id, x, wz, uz, bz, wr, ur, br, wn, un, bn, batch, seq_len, din,
                           dh, cache, hs]() {
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>& xv = nodes_[x].value;
            const Tensor<T>&wzv = nodes_[wz].value, &uzv = nodes_[uz].value;
            const Tensor<T>&wrv = nodes_[wr].value, &urv = nodes_[ur].value;
            const Tensor<T>&wnv = nodes_[wn].value, &unv = nodes_[un].value;
            Tensor<T> dh_carry({batch, dh});
            Tensor<T> xt({batch, din}), hprev({batch, dh});
            Tensor<T> dht({batch, dh}), daz({batch, dh}), dar({batch, dh}), dan({batch, dh}),
                dm({batch, dh}), dxt({batch, din});
            for (size_t tt = seq_len; tt-- > 0;) {
                const StepCache& sc = (*cache)[tt];
                for (size_t b = 0; b < batch; ++b) {
                    std::copy_n(xv.data() + (b * seq_len + tt) * din, din, xt.data() + b * din);
                    if (tt == 0)
                        std::fill_n(hprev.data() + b * dh, dh, T(0));
                    else
                        std::copy_n(hs->data() + (b * seq_len + tt - 1) * dh, dh,
                                    hprev.data() + b * dh);
                    for (size_t j = 0; j < dh; ++j)
                        dht.v[b * dh + j] =
                            dh_carry.v[b * dh + j] + g.v[(b * seq_len + tt) * dh + j];
                }
                for (size_t ix = 0; ix < batch * dh; ++ix) {
                    T zv = sc.z.v[ix], rv = sc.r.v[ix], nv = sc.n.v[ix];
                    T dz = dht.v[ix] * (hprev.v[ix] - nv);
                    T dn = dht.v[ix] * (T(1) - zv);
                    daz.v[ix] = dz * zv * (T(1) - zv);
                    dan.v[ix] = dn * (T(1) - nv * nv);
                    T dr = dan.v[ix] * sc.m.v[ix];
                    dm.v[ix] = dan.v[ix] * rv;
                    dar.v[ix] = dr * rv * (T(1) - rv);
                    dh_carry.v[ix] = dht.v[ix] * zv;  // direct path; matmul paths added below
                }
                // parameter grads
                if (needs(wz)) gemm_tn_acc(daz.data(), xt.data(), grad_buf(wz).data(), dh, batch, din);
                if (needs(uz)) gemm_tn_acc(daz.data(), hprev.data(), grad_buf(uz).data(), dh, batch, dh);
                if (needs(wr)) gemm_tn_acc(dar.data(), xt.data(), grad_buf(wr).data(), dh, batch, din);
                if (needs(ur)) gemm_tn_acc(dar.data(), hprev.data(), grad_buf(ur).data(), dh, batch, dh);
                if (needs(wn)) gemm_tn_acc(dan.data(), xt.data(), grad_buf(wn).data(), dh, batch, din);
                if (needs(un)) gemm_tn_acc(dm.data(), hprev.data(), grad_buf(un).data(), dh, batch, dh);
                if (needs(bz) || needs(br) || needs(bn)) {
                    for (size_t b = 0; b < batch; ++b)
                        for (size_t j = 0; j < dh; ++j) {
                            if (needs(bz)) grad_buf(bz).v[j] += daz.v[b * dh + j];
                            if (needs(br)) grad_buf(br).v[j] += dar.v[b * dh + j];
                            if (needs(bn)) grad_buf(bn).v[j] += dan.v[b * dh + j];
                        }
                }
                // input grads
                if (needs(x)) {
                    dxt.fill(T(0));
                    gemm_nn_acc(daz.data(), wzv.data(), dxt.data(), batch, dh, din);
                    gemm_nn_acc(dar.data(), wrv.data(), dxt.data(), batch, dh, din);
                    gemm_nn_acc(dan.data(), wnv.data(), dxt.data(), batch, dh, din);
                    Tensor<T>& gx = grad_buf(x);
                    for (size_t b = 0; b < batch; ++b)
                        for (size_t j = 0; j < din; ++j)
                            gx.v[(b * seq_len + tt) * din + j] += dxt.v[b * din + j];
                }
                // carry into h_{t-1}
                gemm_nn_acc(daz.data(), uzv.data(), dh_carry.data(), batch, dh, dh);
                gemm_nn_acc(dar.data(), urv.data(), dh_carry.data(), batch, dh, dh);
                gemm_nn_acc(dm.data(), unv.data(), dh_carry.data(), batch, dh, dh);
            }
        };
        return id;
    }

    // ---- losses ----

    // Sum of squared differences; divided by rows when mean_over_rows.
    Var mse_loss(Var pred, Var target, bool mean_over_rows) {
        check_same(pred, target, "mse_loss");
        const Tensor<T>&pv = nodes_[pred].value, &tv = nodes_[target].value;
        T denom = mean_over_rows ? static_cast<T>(pv.rows()) : T(1);
        T acc = 0;
        for (size_t i = 0; i < pv.numel(); ++i) {
            T d = pv.v[i] - tv.v[i];
            acc += d * d;
        }
        Tensor<T> out({1});
        out.v[0] = acc / denom;
        Var id = push(std::move(out), needs(pred) || needs(target), {pred, target});
        nodes_[id].back = [this, id, pred, target, denom]() {
            const Tensor<T>& g = nodes_[id].grad;
            const Tensor<T>&pv = nodes_[pred].value, &tv = nodes_[target].value;
            T c = T(2) * g.v[0] / denom;
            if (needs(pred)) {
                Tensor<T>& gp = grad_buf(pred);
                for (size_t i = 0; i < pv.numel(); ++i) gp.v[i] += c * (pv.v[i] - tv.v[i]);
            }
            if (needs(target)) {
                Tensor<T>& gt = grad_buf(target);
                for (size_t i = 0; i < pv.numel(); ++i) gt.v[i] -= c * (pv.v[i] - tv.v[i]);
            }
        };
        return id;
    }

    // Mean negative log-likelihood over rows with target >= 0 (fused log-softmax).
    Var cross_entropy_rows(Var logits, std::vector<int32_t> targets) {
        const Tensor<T>& lv = nodes_[logits].value;
        size_t r = lv.rows(), c = lv.cols();
        if (targets.size() != r) throw ShapeError("cross_entropy_rows: target count != rows");
        auto probs = std::make_shared<Tensor<T>>(Tensor<T>({r, c}));
        size_t n_valid = 0;
        double loss = 0;
        for (size_t i = 0; i < r; ++i) {
            if (targets[i] < 0) continue;
            ++n_valid;
            const T* row = lv.data() + i * c;
            T mx = row[0];
            for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            T sum = 0;
            for (size_t j = 0; j < c; ++j) {
                T e = std::exp(row[j] - mx);
                probs->v[i * c + j] = e;
                sum += e;
            }
            T inv = T(1) / sum;
            for (size_t j = 0; j < c; ++j) probs->v[i * c + j] *= inv;
            loss -= std::log(static_cast<double>(probs->v[i * c + static_cast<size_t>(targets[i])]) +
                             1e-300);
        }
        if (n_valid == 0) throw ShapeError("cross_entropy_rows: no valid targets");
        Tensor<T> out({1});
        out.v[0] = static_cast<T>(loss / static_cast<double>(n_valid));
        Var id = push(std::move(out), needs(logits), {logits});
        auto tg = std::make_shared<std::vector<int32_t>>(std::move(targets));
        nodes_[id].back = [this, id, logits, probs, tg, n_valid]() {
            if (!needs(logits)) return;
            const Tensor<T>& g = nodes_[id].grad;
            Tensor<T>& gl = grad_buf(logits);
            size_t r = gl.rows(), c = gl.cols();
            T scale = g.v[0] / static_cast<T>(n_valid);
            for (size_t i = 0; i < r; ++i) {
                if ((*tg)[i] < 0) continue;
                for (size_t j = 0; j < c; ++j) {
                    T p = probs->v[i * c + j];
                    T y = static_cast<size_t>((*tg)[i]) == j ? T(1) : T(0);
                    gl.v[i * c + j] += scale * (p - y);
                }
            }
        };
        return id;
    }

    // ---- engine ----

    void backward(Var loss) {
        Tensor<T>& g = grad_buf(loss);
        if (g.numel() != 1) throw ShapeError("backward: loss must be scalar");
        g.v[0] = T(1);
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.grad.numel() > 0 && n.back) n.back();
        }
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void()> back;
    };

    static T sigmoid_scalar(T x) {
        double xv = static_cast<double>(x);
        return static_cast<T>(xv >= 0 ? 1.0 / (1.0 + std::exp(-xv))
                                      : std::exp(xv) / (1.0 + std::exp(xv)));
    }

    bool needs(Var id) const { return nodes_[id].requires_grad; }

    Tensor<T>& grad_buf(Var id) {
        Node& n = nodes_[id];
        if (n.grad.numel() == 0) n.grad = Tensor<T>(n.value.shape);
        return n.grad;
    }

    Var push(Tensor<T> val, bool requires_grad, std::initializer_list<Var>) {
#ifndef NDEBUG
        if (!val.all_finite()) throw ShapeError("non-finite value produced by tape op");
#endif
        nodes_.push_back(Node{std::move(val), {}, requires_grad, nullptr});
        return static_cast<Var>(nodes_.size() - 1);
    }

    Var push_view(const Tensor<T>& val, bool requires_grad) {
        nodes_.push_back(Node{val, {}, requires_grad, nullptr});
        return static_cast<Var>(nodes_.size() - 1);
    }

    void check_same(Var a, Var b, const char* op) const {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw ShapeError(format("%s: shape mismatch (%zu vs %zu elements)", op,
                                    nodes_[a].value.numel(), nodes_[b].value.numel()));
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

}  // namespace p2rec
