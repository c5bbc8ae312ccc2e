#pragma once

#include <functional>
#include <vector>

#include "advcloak/tensor.hpp"

namespace advcloak {

// Eager reverse-mode autodiff at tensor granularity. Each op computes its
// value immediately and records a backward closure; backward() runs the
// closures in reverse. One Tape per training step; ids are indices into the
// tape's node arena and are invalid across tapes.
class Tape {
public:
    struct Id {
        int i = -1;
        bool valid() const { return i >= 0; }
    };

    // Leaves. Constants never receive gradients.
    Id constant(Tensor t);
    Id leaf(Tensor t);  // requires grad

    const Tensor& val(Id id) const { return nodes_[static_cast<std::size_t>(id.i)].value; }
    const Tensor& grad(Id id) const { return nodes_[static_cast<std::size_t>(id.i)].grad; }

    // Seeds d(scalar)/d(everything) and runs the recorded closures.
    void backward(Id scalar_output);

    // --- elementwise ---
    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);
    Id affine(Id x, double scale, double shift);  // scale*x + shift
    Id relu(Id x);
    Id leaky_relu(Id x, double slope);
    Id tanh_op(Id x);
    Id sigmoid(Id x);
    Id log_clamped(Id x, double floor);  // log(max(x, floor)), zero grad below floor
    Id max_const(Id x, double c);        // max(x, c), zero subgradient at x <= c
    Id clip01(Id x);  // clamp to [0,1]; gradient passes where 0 <= x <= 1

    // --- broadcast / reductions over the batch dim ---
    Id add_broadcast_n(Id x, Id single);  // x:[N,...] + single:[1,...]
    Id mean_over_n(Id x);                 // [N,...] -> [1,...]
    Id mean_all(Id x);                    // -> scalar [1]
    Id lincomb(const std::vector<Id>& xs, const std::vector<double>& coeffs);  // scalars

    // --- conv nets ---
    Id conv2d(Id x, Id w, Id b, int stride, int pad);  // x:[N,C,H,W] w:[Co,Ci,kh,kw] b:[Co]
    Id avg_pool2(Id x);
    Id upsample2_nearest(Id x);
    Id instance_norm(Id x, Id gamma, Id beta, double eps = 1e-5);
    Id global_avg_pool(Id x);  // [N,C,H,W] -> [N,C]
    Id flatten(Id x);          // [N,C,H,W] -> [N,C*H*W]
    Id linear(Id x, Id w, Id b);  // x:[N,Di] w:[Do,Di] b:[Do]

    // --- embedding space ---
    Id l2_normalize_rows(Id x, double eps = 1e-12);  // [N,D]
    Id rows_dot(Id a, Id b);                         // [N,D]x[N,D] -> [N]
    Id matmul_nt(Id a, Id b);                        // [N,D]x[C,D] -> [N,C]
    Id l2_norm_rows(Id x, double eps = 1e-12);       // [N,...] -> [N]

    // --- classification heads ---
    Id softmax_xent(Id logits, const std::vector<int>& labels);  // mean CE, scalar
    // Margin adjustments on a cosine-logit matrix, applied at the label column.
    Id cos_margin_sub(Id cos, const std::vector<int>& labels, double margin);  // CosFace
    Id arc_margin(Id cos, const std::vector<int>& labels, double margin);      // ArcFace

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily at backward time
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
    std::vector<std::function<void()>> back_ops_;

    Id push(Tensor value, bool requires_grad);
    bool rq(Id id) const { return nodes_[static_cast<std::size_t>(id.i)].requires_grad; }
    Tensor& grad_mut(Id id);
    const Tensor& v(Id id) const { return nodes_[static_cast<std::size_t>(id.i)].value; }
};

// Central finite difference of f at x, coordinate idx.
double finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                   int idx, double step);

}  // namespace advcloak
