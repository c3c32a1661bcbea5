#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rpm/tensor.hpp"

namespace rpm::ad {

// A named trainable (or tracked) tensor living outside any graph. Gradients
// accumulate into `grad` across Graph::backward calls until zeroed.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { grad.zero(); }
};

// Running statistics owned by a batch-norm layer.
struct BatchNormRunning {
    Tensor mean;  // [C]
    Tensor var;   // [C]
    double momentum = 0.1;

    explicit BatchNormRunning(int channels = 0)
        : mean(Shape{channels}, 0.0), var(Shape{channels}, 1.0) {}
};

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Define-by-run reverse-mode tape over Tensor values. One Graph per forward
// pass; not thread-safe, but independent Graphs may run concurrently on
// shared read-only Params.
class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    // Leaves.
    Var constant(Tensor t);
    Var scalar(double v) { return constant(Tensor::scalar(v)); }
    Var param(Param& p);

    // Elementwise (same shape unless stated).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var neg(Var a);
    Var add_scalar(Var a, double c);
    Var mul_scalar(Var a, double c);
    Var mul_const(Var a, Tensor c);    // elementwise by a constant tensor
    Var exp_(Var a);
    Var log_(Var a);
    Var tanh_(Var a);
    Var sigmoid_(Var a);
    Var relu_(Var a);
    Var sqrt_(Var a);
    Var square(Var a);
    Var clamp_min(Var a, double lo);

    // Broadcast with a scalar Var s (shape [1]).
    Var scale(Var a, Var s);        // a * s
    Var scale_div(Var a, Var s);    // a / s
    Var add_bscalar(Var a, Var s);  // a + s

    // Reductions / shape.
    Var sum(Var a);
    Var mean(Var a);
    Var reshape(Var a, Shape s);
    Var slice0(Var a, int begin, int end);  // rows along axis 0
    Var slice_axis(Var a, int pre, int mid, int post, int begin, int end);
    Var concat0(const std::vector<Var>& parts);
    Var pack_scalars(const std::vector<Var>& scalars);  // k scalars -> [k]
    Var select_col(Var a, int col);                     // [m,n] -> [m]

    // Linear algebra.
    Var matmul(Var a, Var b);                       // [m,k]x[k,n]
    Var matvec(Var a, Var x);                       // [m,n]x[n] -> [m]
    Var dot(Var a, Var b);                          // [n]·[n] -> [1]
    Var linear(Var x, Var w, Var b);                // x[N,fi], w[fo,fi], b[fo]
    Var pairwise_sqdist(Var a, Var b);              // [m,f],[n,f] -> [m,n]
    Var add_diag(Var a, double eps);                // square matrix + eps*I
    Var cholesky(Var a);                            // lower factor; reads lower triangle
    Var trisolve_lower(Var l, Var b);               // L^{-1} B, B is [n,m]

    // Neural-net blocks.
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad);
    // Group batch-norm: stats per `group` consecutive samples when training;
    // running stats when not. `running` may be null in pure functional uses
    // (then training stats are required).
    Var batchnorm2d(Var x, Var gamma, Var beta, int group, bool training,
                    BatchNormRunning* running, double eps = 1e-5);
    // Masked mean over groups of rows: x[N,F] -> [N/group, F].
    Var mean_pool_groups(Var x, int group, const std::vector<std::uint8_t>& mask);
    // Cell locations for the 3x3 grid: rows[B,3,D,dl], cols[B,3,D,dl] ->
    // [B*D*9, 2*dl]; row index ((b*D + d)*9 + k) holds concat(row_i, col_j)
    // for cell k = 3*i + j.
    Var assemble_cell_locations(Var rows, Var cols);

    const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].value; }
    double scalar_val(Var v) const { return val(v)[0]; }
    // Gradient of a node (after backward); zero tensor if it never received one.
    Tensor grad_of(Var v) const;

    void backward(Var loss);

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        Param* external = nullptr;
        std::function<void(Graph&)> back;
    };

    Var make(Tensor value, bool requires_grad, std::function<void(Graph&)> back);
    Tensor& grad_buf(Var v);
    void accum(Var v, const Tensor& g);
    void accum_raw(Var v, const double* g, std::size_t n);
    bool rg(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].requires_grad; }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

}  // namespace rpm::ad
