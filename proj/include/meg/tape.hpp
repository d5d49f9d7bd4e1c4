#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "meg/kernels.hpp"
#include "meg/rng.hpp"
#include "meg/tensor.hpp"

namespace meg {

enum class Mode { Train, Eval };

// Reverse-mode autodiff over a tape recorded during one forward pass.
// Leaves reference external tensors (parameters, inputs) that must outlive
// the tape; op outputs are owned by the tape. backward() may be called once;
// the tape is then consumed and a new forward pass needs a new tape.
//
// References returned by val()/grad() stay valid while the tape lives
// (nodes are stored in a deque).
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. `input` never receives a gradient; `leaf` tracks one when
    // requested; `param` tracks one iff the parameter is trainable.
    // Repeated param() calls for one ParamTensor return the same node, so
    // trainers can look gradients up with find() after backward.
    Var input(const Tensor& x) { return push_ext(&x, false); }
    Var leaf(const Tensor& x, bool needs_grad) { return push_ext(&x, needs_grad); }
    Var param(const ParamTensor& p);
    Var find(const ParamTensor& p) const; // invalid Var if never recorded

    const Tensor& val(Var v) const { return nodes_[size_t(v.id)].value(); }
    const Shape& shape(Var v) const { return nodes_[size_t(v.id)].shape; }

    // Gradient of a node after backward(); zero tensor for nodes off the
    // loss path.
    const Tensor& grad(Var v);

    // --- ops -------------------------------------------------------------
    Var conv2d(Var x, Var w, Var bias, int stride, int padding); // bias optional: pass {}
    Var batchnorm2d(Var x, Var gamma, Var beta, Tensor* running_mean,
                    Tensor* running_var, Mode mode);
    Var relu(Var x);
    Var sigmoid(Var x);
    Var softmax_lastdim(Var x); // softmax over the w axis of each (b,c,h) row
    Var maxpool2d(Var x, int k, int stride, int padding = 0);
    Var global_avg_pool(Var x);
    Var fully_connected(Var x, Var w, Var bias); // x flattened to (B, C*H*W)
    Var dropout(Var x, real rate, Mode mode, Rng& rng);
    Var add(Var x, Var y);
    Var mul(Var x, Var y);
    Var abs_diff(Var x, Var y);
    Var mul_scalar_param(Var x, Var scalar);             // scalar numel == 1
    Var mul_bcast_channel(Var x, Var attn);              // attn is (B,1,H,W)
    Var grad_x(Var x); // |x(i,j+1) - x(i,j)|, last column zero
    Var grad_y(Var x); // |x(i+1,j) - x(i,j)|, last row zero
    std::pair<Var, Var> gradient_maps(Var x) { return {grad_x(x), grad_y(x)}; }
    Var attn_scores(Var q, Var k);     // (B,1,N,N) = per-batch Q^T K, N = H*W
    Var attn_apply(Var v, Var e);      // per-batch V E^T back to (B,C,H,W)
    Var reshape(Var x, Shape s);
    Var sum(Var x); // scalar (1,1,1,1)
    Var focal_loss(Var probs, const std::vector<int>& targets, real gamma);

    // Reverse sweep from a scalar loss. Populates gradients of every
    // grad-tracked node reachable from the loss.
    void backward(Var loss);

    bool consumed() const { return consumed_; }

private:
    struct Node {
        Tensor owned;
        const Tensor* ext = nullptr;
        Tensor grad;
        bool needs = false;
        bool grad_ready = false;
        Shape shape;
        const Tensor& value() const { return ext ? *ext : owned; }
    };

    std::deque<Node> nodes_;
    std::vector<std::function<void()>> steps_;
    std::unordered_map<const Tensor*, int> param_nodes_;
    bool consumed_ = false;

    Var push_ext(const Tensor* t, bool needs);
    Var push_owned(Tensor t, bool needs);
    bool needs(Var v) const { return nodes_[size_t(v.id)].needs; }
    Tensor& grad_buf(Var v); // lazily allocated zero buffer
    void add_step(std::function<void()> fn) { steps_.push_back(std::move(fn)); }
};

using Var = Tape::Var;

} // namespace meg
