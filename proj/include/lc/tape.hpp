#pragma once

#include <functional>
#include <memory>
#include <set>
#include <unordered_map>
#include <vector>

#include "lc/tensor.hpp"

namespace lc {

/// Reverse-mode evaluation tape. Nodes are appended in evaluation order, so
/// every parent id is smaller than its child's; backward walks ids in
/// reverse. One tape per evaluation, single-owner, discarded after backward.
class Tape {
public:
    using BackFn = std::function<void(const float* grad_out, Tape&)>;

    /// Copies `value` onto the tape and marks it as a gradient-requested leaf.
    Tensor leaf(const Tensor& value);

    /// Records an interior node; returns its id.
    int record(const std::vector<int>& shape, int parent0, int parent1, BackFn back);

    size_t size() const { return nodes_.size(); }
    const std::vector<int>& node_shape(int id) const { return nodes_[id].shape; }
    const std::set<int>& leaves() const { return leaf_marks_; }

    /// Gradient buffer of node `id`, allocated and zeroed on first touch.
    /// Returns nullptr for constants (id < 0).
    float* grad_buf(int id);

    /// Whether node `id` has received any gradient yet (is reachable).
    bool has_grad(int id) const { return id >= 0 && !grads_[id].empty(); }

    friend std::unordered_map<int, Tensor> backward(Tape& tape, const Tensor& loss);

private:
    struct Node {
        std::vector<int> shape;
        int parent0 = -1;
        int parent1 = -1;
        BackFn back;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<float>> grads_;
    std::set<int> leaf_marks_;
};

/// Runs the chain rule from scalar `loss` back to every marked leaf.
/// Leaves not on a path to the loss get a zero gradient. The tape's gradient
/// buffers are consumed; run at most once per tape.
std::unordered_map<int, Tensor> backward(Tape& tape, const Tensor& loss);

// ---- primitives ----------------------------------------------------------
// Each op computes eagerly and records itself on the inputs' tape when any
// input is tape-linked. Mixing two distinct tapes is rejected. Shape
// mismatches throw ShapeError naming the op and the offending shapes.

/// (m,k) x (k,n) -> (m,n)
Tensor matmul(const Tensor& a, const Tensor& b);
/// Elementwise; b (or a) may be a scalar or a row vector broadcast over rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a * c for a plain constant c.
Tensor scale(const Tensor& a, float c);
/// Row-wise softmax over the last dimension.
Tensor softmax(const Tensor& a);
/// Row-wise (x - mean) / sqrt(var + 1e-5), no affine part.
Tensor layernorm(const Tensor& a);
/// Exact erf-based GELU.
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// Concatenate along the last dimension (rows must match).
Tensor concat(const Tensor& a, const Tensor& b);
/// slice(a, dim, start, len): contiguous range along dim 0 or 1.
Tensor slice(const Tensor& a, int dim, int start, int len);
/// Mean / sum over all elements -> scalar.
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);
/// mean((a - b)^2) -> scalar.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- composites ----------------------------------------------------------

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }
/// Sum of squared differences (squared L2 norm of a - b).
inline Tensor sse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return sum(mul(d, d));
}

}  // namespace lc
