#pragma once

#include <cmath>
#include <vector>

#include "p2rec/params.hpp"

namespace p2rec {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimError : std::runtime_error {
    explicit OptimError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bias-corrected Adam over the trainable subset of a ParamSet. Frozen
// parameters are never touched. A non-finite gradient aborts the step before
// any state is mutated.
template <typename T>
class Adam {
public:
    Adam(ParamSet<T>& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].value.numel(), T(0));
            v_[i].assign(params[i].value.numel(), T(0));
        }
    }

    void step() {
        for (size_t i = 0; i < params_->size(); ++i) {
            const Param<T>& p = (*params_)[i];
            if (!p.trainable) continue;
            for (T g : p.grad.v)
                if (!std::isfinite(static_cast<double>(g)))
                    throw OptimError("non-finite gradient in parameter " + p.name);
        }
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t i = 0; i < params_->size(); ++i) {
            Param<T>& p = (*params_)[i];
            if (!p.trainable) continue;
            T* val = p.value.data();
            const T* g = p.grad.data();
            T* m = m_[i].data();
            T* v = v_[i].data();
            size_t n = p.value.numel();
            for (size_t j = 0; j < n; ++j) {
                double gj = static_cast<double>(g[j]);
                double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                m[j] = static_cast<T>(mj);
                v[j] = static_cast<T>(vj);
                double mhat = mj / bc1;
                double vhat = vj / bc2;
                val[j] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    long step_count() const { return t_; }
    AdamConfig& config() { return cfg_; }

private:
    ParamSet<T>* params_;
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace p2rec
