#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mpt/rng.hpp"

namespace mpt {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct TensorData {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

// Value-semantics handle over shared storage. Copies alias the same buffer;
// tied weights are expressed by reusing one handle in several places.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return d_->shape; }
    std::int64_t size() const { return d_->size(); }
    std::vector<double>& data() { return d_->data; }
    const std::vector<double>& data() const { return d_->data; }
    std::vector<double>& grad();
    bool has_grad() const { return !d_->grad.empty(); }
    bool requires_grad() const { return d_->requires_grad; }
    double item() const;

    bool defined() const { return d_ != nullptr; }
    const std::shared_ptr<TensorData>& node() const { return d_; }

private:
    std::shared_ptr<TensorData> d_;
};

// Records the backward rule of every op in execution order; backward() replays
// the list in reverse. Execution order is a topological order by construction.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t num_ops() const { return steps_.size(); }

    // ---- primitive ops ----
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor softmax(const Tensor& x, int axis);
    Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis, double eps);
    Tensor add(const Tensor& a, const Tensor& b);  // equal shapes, or b a trailing-suffix broadcast
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor relu(const Tensor& x);
    Tensor scale(const Tensor& x, double c);
    Tensor embed(const std::vector<int>& ids, const Tensor& table);
    Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);
    Tensor transpose_last2(const Tensor& x);
    Tensor reshape(const Tensor& x, Shape shape);
    Tensor split_heads(const Tensor& x, int heads);  // [L,d] -> [h,L,d/h]
    Tensor merge_heads(const Tensor& x);             // [h,L,dk] -> [L,h*dk]
    Tensor row(const Tensor& m, int k);              // [R,C] -> [C]
    Tensor weighted_sum(const Tensor& w, const std::vector<Tensor>& xs);
    Tensor sum(const Tensor& x);
    Tensor mean(const Tensor& x);
    // Label-smoothed cross entropy over [L,V] logits; mean over non-pad targets.
    Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& targets,
                                  double smoothing, int pad_id);

    void backward(const Tensor& loss);

private:
    friend class TapeRecorder;
    void record(std::function<void()> bw) {
        if (recording_) steps_.push_back(std::move(bw));
    }
    Tensor make_output(Shape shape, std::vector<double> values,
                       std::initializer_list<const Tensor*> inputs);

    bool recording_;
    std::vector<std::function<void()>> steps_;
};

}  // namespace mpt
