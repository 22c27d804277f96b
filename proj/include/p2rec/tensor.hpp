#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "p2rec/common.hpp"

namespace p2rec {

// Dense row-major tensor over float (training) or double (gradient checks).
template <typename T>
struct Tensor {
    std::vector<size_t> shape;
    std::vector<T> v;

    Tensor() = default;
    Tensor(std::initializer_list<size_t> s) : shape(s) { v.assign(numel_of(shape), T(0)); }
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) { v.assign(numel_of(shape), T(0)); }

    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t d : s) n *= d;
        return n;
    }

    size_t numel() const { return v.size(); }
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& at(size_t r, size_t c) { return v[r * cols() + c]; }
    T at(size_t r, size_t c) const { return v[r * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

// Matmul kernels. Each output element is produced by exactly one thread with a
// fixed inner summation order, so results do not depend on the thread count.
namespace gemm_detail {
constexpr size_t kParallelThreshold = 1u << 16;
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > gemm_detail::kParallelThreshold)
    for (ptrdiff_t ii = 0; ii < static_cast<ptrdiff_t>(m); ++ii) {
        size_t i = static_cast<size_t>(ii);
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T  (dot products of rows)
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > gemm_detail::kParallelThreshold)
    for (ptrdiff_t ii = 0; ii < static_cast<ptrdiff_t>(m); ++ii) {
        size_t i = static_cast<size_t>(ii);
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]  (rank-1 updates, used for weight grads)
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > gemm_detail::kParallelThreshold)
    for (ptrdiff_t ii = 0; ii < static_cast<ptrdiff_t>(m); ++ii) {
        size_t i = static_cast<size_t>(ii);
        T* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            T av = a[p * m + i];
            const T* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace p2rec
