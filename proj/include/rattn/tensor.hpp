#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <utility>

#include "rattn/common.hpp"

namespace rattn {

template <class T>
class Tape;

/// Dense row-major n-d array. Copies are shallow (shared storage); use clone()
/// for a deep copy. A tensor may carry a tape handle, in which case ops that
/// consume it are recorded for reverse-mode differentiation.
template <class T>
class Tensor {
public:
    using Storage = std::shared_ptr<std::vector<T>>;

    Tensor() = default;
    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(numel_of(shape_), T(0))) {}
    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if (numel_of(shape_) != static_cast<int64_t>(data_->size()))
            shape_error("Tensor", "shape " + shape_str(shape_) + " does not match " +
                                      std::to_string(data_->size()) + " values");
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }
    static Tensor ones(Shape s) { return full(std::move(s), T(1)); }
    static Tensor eye(int64_t n) {
        Tensor t({n, n});
        for (int64_t i = 0; i < n; ++i) (*t.data_)[i * n + i] = T(1);
        return t;
    }
    static Tensor uniform(Shape s, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
        Tensor t(std::move(s));
        std::uniform_real_distribution<double> d(lo, hi);
        for (auto& v : *t.data_) v = static_cast<T>(d(rng));
        return t;
    }
    static Tensor normal(Shape s, std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(s));
        std::normal_distribution<double> d(mean, stddev);
        for (auto& v : *t.data_) v = static_cast<T>(d(rng));
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[i < 0 ? shape_.size() + i : i]; }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    const Storage& storage() const { return data_; }

    T& operator[](int64_t i) { return (*data_)[i]; }
    const T& operator[](int64_t i) const { return (*data_)[i]; }

    T& at(std::initializer_list<int64_t> idx) { return (*data_)[flat_index(idx)]; }
    const T& at(std::initializer_list<int64_t> idx) const { return (*data_)[flat_index(idx)]; }

    T item() const {
        if (numel() != 1) shape_error("item", "tensor has " + std::to_string(numel()) + " elements");
        return (*data_)[0];
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    /// Same storage, new shape. Does not touch tape state.
    Tensor reshaped(Shape s) const {
        if (numel_of(s) != numel())
            shape_error("reshape", shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    bool requires_grad() const { return requires_grad_; }
    bool on_tape() const { return node_ >= 0; }
    int node() const { return node_; }
    Tape<T>* tape() const { return tape_; }

private:
    int64_t flat_index(std::initializer_list<int64_t> idx) const {
        int64_t flat = 0;
        size_t k = 0;
        for (int64_t i : idx) flat = flat * shape_[k] + i, ++k;
        return flat;
    }

    Shape shape_;
    Storage data_;
    bool requires_grad_ = false;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;

    friend class Tape<T>;
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction, and backward() walks them exactly once
/// in reverse. A recorded op keeps whatever its backward rule captured; the
/// chunkwise linear-attention op captures a recompute closure instead of its
/// intermediate states.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const T* gout, int64_t gnumel)>;

    struct Node {
        const char* op;
        std::vector<int> inputs;
        int64_t out_numel;
        BackwardFn backward;  // empty for leaves
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers `t` as a differentiable leaf on this tape.
    Tensor<T>& watch(Tensor<T>& t) {
        if (t.tape_ == this && t.node_ >= 0) return t;
        t.tape_ = this;
        t.requires_grad_ = true;
        t.node_ = add_node("leaf", {}, t.numel(), nullptr);
        return t;
    }

    /// Records an op node and stamps the output tensor with its handle.
    Tensor<T> record(const char* op, const std::vector<int>& inputs, Tensor<T> out,
                     BackwardFn backward) {
        out.tape_ = this;
        out.node_ = add_node(op, inputs, out.numel(), std::move(backward));
        return out;
    }

    size_t size() const { return nodes_.size(); }
    const Node& node(int i) const { return nodes_[i]; }

    /// Accumulation buffer for a node's gradient, allocated (zeroed) on demand.
    T* grad_buf(int node_id, int64_t n) {
        auto& g = grads_[node_id];
        if (!g) g = std::make_unique<std::vector<T>>(n, T(0));
        return g->data();
    }
    bool has_grad(int node_id) const { return node_id >= 0 && grads_[node_id] != nullptr; }

    /// Runs reverse accumulation from a scalar loss. Gradients from any prior
    /// run are discarded first, so repeated calls are bit-identical.
    void backward(const Tensor<T>& loss) {
        if (loss.tape() != this || !loss.on_tape())
            throw std::invalid_argument("backward: loss is not recorded on this tape");
        if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
        grads_.assign(nodes_.size(), nullptr);
        grad_buf(loss.node(), 1)[0] = T(1);
        for (int i = loss.node(); i >= 0; --i) {
            const Node& nd = nodes_[i];
            if (!nd.backward || !grads_[i]) continue;
            nd.backward(*this, grads_[i]->data(), nd.out_numel);
        }
    }

    /// Gradient of a watched tensor from the last backward() run.
    Tensor<T> grad(const Tensor<T>& t) const {
        if (t.tape() != this || !t.on_tape())
            throw std::invalid_argument("grad: tensor is not on this tape");
        Tensor<T> g(t.shape());
        if (grads_[t.node()]) std::copy(grads_[t.node()]->begin(), grads_[t.node()]->end(), g.data());
        return g;
    }

    void zero_grad() { grads_.assign(nodes_.size(), nullptr); }

private:
    int add_node(const char* op, const std::vector<int>& inputs, int64_t out_numel,
                 BackwardFn backward) {
        nodes_.push_back(Node{op, inputs, out_numel, std::move(backward)});
        grads_.emplace_back(nullptr);
        return static_cast<int>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::vector<std::unique_ptr<std::vector<T>>> grads_;
};

/// Tape shared by a set of op inputs; null when none is recorded.
template <class T>
Tape<T>* result_tape(std::initializer_list<const Tensor<T>*> ins) {
    Tape<T>* tp = nullptr;
    for (const Tensor<T>* t : ins) {
        if (!t->on_tape()) continue;
        if (tp && tp != t->tape())
            throw std::invalid_argument("op inputs belong to different tapes");
        tp = t->tape();
    }
    return tp;
}

}  // namespace rattn
