#pragma once

#include <functional>
#include <vector>

#include "mmfa/common.hpp"

namespace mmfa::ag {

// Reverse-mode tape over Eigen matrices. Nodes are appended in evaluation
// order, so the tape index order is already topological and backward() is a
// single reverse sweep. Gradients of intermediate nodes (attention matrices)
// stay readable after the sweep, which is what the relevance machinery needs.
class Tape {
public:
    using Id = int;

    Id leaf(Mat value, bool needs_grad = true);
    Id constant(Mat value) { return leaf(std::move(value), false); }

    Id matmul(Id a, Id b);
    // a * b^T
    Id matmul_nt(Id a, Id b);
    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id hadamard(Id a, Id b);
    Id scale(Id a, double s);
    // Broadcast row vector b (1 x n) over every row of a.
    Id add_rowvec(Id a, Id b);
    Id row_softmax(Id a);
    // Per-row normalization over columns; gamma/beta are 1 x n.
    Id layer_norm(Id x, Id gamma, Id beta, double eps = 1e-5);
    Id gelu(Id a);
    Id abs(Id a);  // elementwise, d|x|/dx at 0 taken as 0
    Id sum_all(Id a);  // 1x1
    Id rows_slice(Id a, int row0, int nrows);
    Id concat_rows(const std::vector<Id>& parts);
    Id concat_cols(const std::vector<Id>& parts);
    // Gather rows of `table` by index; backward scatter-adds into the table.
    Id embed_rows(Id table, const std::vector<int>& indices);
    // Cross-entropy of a 1xC logits row against a class index, value 1x1.
    Id cross_entropy(Id logits, int label);
    // Mean squared difference against a constant row vector, value 1x1.
    Id mse_const(Id x, Mat target);

    const Mat& value(Id id) const { return nodes_[id].value; }
    bool has_grad(Id id) const { return nodes_[id].grad.size() > 0; }
    const Mat& grad(Id id) const;

    // Make a node receive gradients during backward even when none of its
    // inputs require them. Attention matrices are marked this way: d(logit)/dA
    // only involves the paths downstream of A.
    void force_grad(Id id) { nodes_[id].needs_grad = true; }

    // Seeds d(root)/d(root) = seed and sweeps the tape backwards.
    void backward(Id root, const Mat& seed);
    // Convenience for scalar roots.
    void backward(Id root) { backward(root, Mat::Ones(1, 1)); }
    void zero_grad();

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;  // empty until touched
        bool needs_grad = false;
        std::function<void(Tape&)> back;  // empty for leaves
    };

    Id push(Mat value, bool needs_grad, std::function<void(Tape&)> back);
    Mat& grad_buf(Id id);
    void accumulate(Id id, const Mat& g);

    std::vector<Node> nodes_;
};

}  // namespace mmfa::ag
