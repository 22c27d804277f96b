#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2rec/rng.hpp"
#include "p2rec/tensor.hpp"

namespace p2rec {

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;  // accumulated by Tape::backward
    bool trainable = true;
};

// Owns a model's parameters in registration order. Registration order fixes
// the optimizer update order and the checkpoint layout.
template <typename T>
class ParamSet {
public:
    Param<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
        if (index_.count(name)) throw ShapeError("duplicate parameter name: " + name);
        auto p = std::make_unique<Param<T>>();
        p->name = name;
        p->grad = Tensor<T>(value.shape);
        p->value = std::move(value);
        p->trainable = trainable;
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    // Each parameter gets its own derived stream, so adding or removing a
    // parameter does not shift the init of the others.
    Param<T>& add_normal(const std::string& name, std::vector<size_t> shape, double stddev,
                         uint64_t seed, bool trainable = true) {
        Tensor<T> t(std::move(shape));
        Rng rng = Rng::derive(seed, name);
        for (auto& x : t.v) x = static_cast<T>(rng.normal(0.0, stddev));
        return add(name, std::move(t), trainable);
    }

    Param<T>& add_zeros(const std::string& name, std::vector<size_t> shape, bool trainable = true) {
        return add(name, Tensor<T>(std::move(shape)), trainable);
    }

    Param<T>& add_ones(const std::string& name, std::vector<size_t> shape, bool trainable = true) {
        Tensor<T> t(std::move(shape));
        t.fill(T(1));
        return add(name, std::move(t), trainable);
    }

    Param<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    const Param<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    Param<T>& get(const std::string& name) {
        Param<T>* p = find(name);
        if (!p) throw ShapeError("unknown parameter: " + name);
        return *p;
    }

    void zero_grads() {
        for (auto& p : params_) p->grad.fill(T(0));
    }

    void freeze_all() {
        for (auto& p : params_) p->trainable = false;
    }

    size_t size() const { return params_.size(); }
    Param<T>& operator[](size_t i) { return *params_[i]; }
    const Param<T>& operator[](size_t i) const { return *params_[i]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& p : params_) out.add(p->name, p->value.template cast<U>(), p->trainable);
        return out;
    }

    // Copy values (not grads) from a same-layout set, used for checkpoints.
    void load_values(const ParamSet<T>& other) {
        for (const auto& p : other.params_) {
            Param<T>& mine = get(p->name);
            if (mine.value.shape != p->value.shape)
                throw ShapeError("parameter shape mismatch on load: " + p->name);
            mine.value = p->value;
        }
    }

private:
    template <typename U>
    friend class ParamSet;
    std::vector<std::unique_ptr<Param<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// Value-only snapshots, used for best-epoch restore during training.
template <typename T>
std::vector<Tensor<T>> snapshot_values(const ParamSet<T>& ps) {
    std::vector<Tensor<T>> out;
    out.reserve(ps.size());
    for (const auto& p : ps) out.push_back(p->value);
    return out;
}

template <typename T>
void restore_values(ParamSet<T>& ps, const std::vector<Tensor<T>>& snap) {
    if (snap.size() != ps.size()) throw ShapeError("restore_values: snapshot size mismatch");
    for (size_t i = 0; i < snap.size(); ++i) {
        if (ps[i].value.shape != snap[i].shape)
            throw ShapeError("restore_values: shape mismatch for " + ps[i].name);
        ps[i].value = snap[i];
    }
}

}  // namespace p2rec
