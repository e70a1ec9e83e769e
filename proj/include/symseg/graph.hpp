#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "symseg/tensor.hpp"

namespace symseg::ag {

/// Reverse-mode tape node. Ops build a DAG of these; backward() walks it.
struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad();
    void accumulate(const float* g, int64_t n);
};

using Var = std::shared_ptr<Node>;

bool grad_enabled();

/// Disables graph construction in scope; forwards become plain evaluation.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

Var constant(Tensor v);
Var parameter(Tensor v);
Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn);

/// Backpropagate from a scalar root (seed gradient 1).
void backward(const Var& root);

// ---- elementwise & shape ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_const(const Var& a, const Tensor& c);
Var relu(const Var& a);
Var sigmoid(const Var& a, float clamp_eps = 0.0f);
Var tanh_op(const Var& a);
Var log_floor(const Var& a, float floor);
Var clamp(const Var& a, float lo, float hi);
Var reshape(const Var& a, Shape shape);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
/// [N,C,H,W] -> [N,C] spatial mean.
Var global_avg_pool(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                         // [m,k]x[k,n]
Var linear(const Var& x, const Var& w, const Var& b);           // x[N,I], w[O,I], b[O]
Var rows_lookup(const Var& table, const std::vector<int>& idx); // table[V,D] -> [N,D]
Var slice_cols(const Var& x, int64_t start, int64_t len);
Var softmax_rows(const Var& x);

// ---- spatial ----
Var conv2d(const Var& x, const Var& w, const Var& b, int pad);  // stride 1
Var maxpool2d(const Var& x);                                    // 2x2 stride 2
Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w);
Var instance_norm2d(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var concat_channels(const Var& a, const Var& b);
Var concat_channels(const std::vector<Var>& xs);

// ---- discrete relaxation ----
/// Forward takes the hard one-hot value, backward routes gradient to `soft`.
Var straight_through(const Tensor& hard, const Var& soft);

// ---- losses (batch means; target is a constant) ----
Var bce_mean(const Var& pred, const Tensor& target);
/// Mean over images of (1 - (2*sum(p*t)+smooth)/(sum(p)+sum(t)+smooth)).
Var soft_dice_loss(const Var& pred, const Tensor& target, float smooth);

// ---- plain-tensor helpers shared with non-autograd code ----
void bilinear_resize_plane(const float* src, int64_t sh, int64_t sw, float* dst, int64_t dh,
                           int64_t dw);
int argmax_row(const float* row, int64_t n);

}  // namespace symseg::ag
