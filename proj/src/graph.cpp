#include "rpm/graph.hpp"

#include <cmath>
#include <cstring>

#include "rpm/common.hpp"
#include "rpm/kernels.hpp"
#include "rpm/smallmat.hpp"

namespace rpm::ad {

Var Graph::make(Tensor value, bool requires_grad, std::function<void(Graph&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buf(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.idx)];
    if (!n.grad_alloc) {
        n.grad = Tensor(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

Tensor Graph::grad_of(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.idx)];
    if (n.grad_alloc) return n.grad;
    return Tensor(n.value.shape());
}

void Graph::accum(Var v, const Tensor& g) { accum_raw(v, g.data(), g.numel()); }

void Graph::accum_raw(Var v, const double* g, std::size_t cnt) {
    Node& n = nodes_[static_cast<std::size_t>(v.idx)];
    if (!n.requires_grad) return;
    Tensor& dst = grad_buf(v);
    if (dst.numel() != cnt) throw ContractError("gradient shape mismatch");
    double* d = dst.data();
    for (std::size_t i = 0; i < cnt; ++i) d[i] += g[i];
}

void Graph::backward(Var loss) {
    if (!grad_enabled_) throw ContractError("backward on a no-grad graph");
    Node& ln = nodes_[static_cast<std::size_t>(loss.idx)];
    if (ln.value.numel() != 1) throw ContractError("backward target must be scalar");
    if (!ln.requires_grad) return;
    grad_buf(loss)[0] += 1.0;
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || !n.grad_alloc) continue;
        if (n.external) {
            Tensor& pg = n.external->grad;
            for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
        }
        if (n.back) n.back(*this);
    }
}

Var Graph::constant(Tensor t) { return make(std::move(t), false, nullptr); }

Var Graph::param(Param& p) {
    Var v = make(p.value, p.trainable, nullptr);
    if (grad_enabled_ && p.trainable) nodes_.back().external = &p;
    return v;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) throw ContractError(std::string(op) + ": shape mismatch");
}
}  // namespace

Var Graph::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check_same_shape(ta, tb, "add");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    Var sv = make(std::move(out), rg(a) || rg(b), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, b, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            g.accum(a, gr);
            g.accum(b, gr);
        };
    return sv;
}

Var Graph::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check_same_shape(ta, tb, "sub");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    Var sv = make(std::move(out), rg(a) || rg(b), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, b, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            g.accum(a, gr);
            Tensor neg(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) neg[i] = -gr[i];
            g.accum(b, neg);
        };
    return sv;
}

Var Graph::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check_same_shape(ta, tb, "mul");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    Var sv = make(std::move(out), rg(a) || rg(b), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, b, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& ta2 = g.val(a);
            const Tensor& tb2 = g.val(b);
            Tensor ga(gr.shape()), gb(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) {
                ga[i] = gr[i] * tb2[i];
                gb[i] = gr[i] * ta2[i];
            }
            g.accum(a, ga);
            g.accum(b, gb);
        };
    return sv;
}

Var Graph::neg(Var a) { return mul_scalar(a, -1.0); }

Var Graph::add_scalar(Var a, double c) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c;
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) { g.accum(a, g.nodes_[static_cast<std::size_t>(sv.idx)].grad); };
    return sv;
}

Var Graph::mul_scalar(Var a, double c) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, c, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] * c;
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::mul_const(Var a, Tensor c) {
    const Tensor& ta = val(a);
    check_same_shape(ta, c, "mul_const");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, c = std::move(c), sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] * c[i];
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::exp_(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& y = g.val(sv);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] * y[i];
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::log_(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& x = g.val(a);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] / x[i];
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::tanh_(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& y = g.val(sv);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] * (1.0 - y[i] * y[i]);
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::sigmoid_(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& y = g.val(sv);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] * y[i] * (1.0 - y[i]);
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::relu_(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& x = g.val(a);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = x[i] > 0.0 ? gr[i] : 0.0;
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::sqrt_(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& y = g.val(sv);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] * 0.5 / y[i];
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::square(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& x = g.val(a);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = gr[i] * 2.0 * x[i];
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::clamp_min(Var a, double lo) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] < lo ? lo : out[i];
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, lo, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& x = g.val(a);
            Tensor ga(gr.shape());
            for (std::size_t i = 0; i < gr.numel(); ++i) ga[i] = x[i] < lo ? 0.0 : gr[i];
            g.accum(a, ga);
        };
    return sv;
}

// ---------------------------------------------------------------------------
// Scalar-Var broadcasts
// ---------------------------------------------------------------------------

Var Graph::scale(Var a, Var s) {
    if (val(s).numel() != 1) throw ContractError("scale: s must be scalar");
    const double sv0 = val(s)[0];
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= sv0;
    Var sv = make(std::move(out), rg(a) || rg(s), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, s, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& ta = g.val(a);
            const double sc = g.val(s)[0];
            Tensor ga(gr.shape());
            double gs = 0.0;
            for (std::size_t i = 0; i < gr.numel(); ++i) {
                ga[i] = gr[i] * sc;
                gs += gr[i] * ta[i];
            }
            g.accum(a, ga);
            g.accum(s, Tensor::scalar(gs));
        };
    return sv;
}

Var Graph::scale_div(Var a, Var s) {
    if (val(s).numel() != 1) throw ContractError("scale_div: s must be scalar");
    const double sv0 = val(s)[0];
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= sv0;
    Var sv = make(std::move(out), rg(a) || rg(s), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, s, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& ta = g.val(a);
            const double sc = g.val(s)[0];
            Tensor ga(gr.shape());
            double gs = 0.0;
            for (std::size_t i = 0; i < gr.numel(); ++i) {
                ga[i] = gr[i] / sc;
                gs -= gr[i] * ta[i] / (sc * sc);
            }
            g.accum(a, ga);
            g.accum(s, Tensor::scalar(gs));
        };
    return sv;
}

Var Graph::add_bscalar(Var a, Var s) {
    if (val(s).numel() != 1) throw ContractError("add_bscalar: s must be scalar");
    const double sv0 = val(s)[0];
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += sv0;
    Var sv = make(std::move(out), rg(a) || rg(s), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, s, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            g.accum(a, gr);
            double gs = 0.0;
            for (std::size_t i = 0; i < gr.numel(); ++i) gs += gr[i];
            g.accum(s, Tensor::scalar(gs));
        };
    return sv;
}

// ---------------------------------------------------------------------------
// Reductions / shape
// ---------------------------------------------------------------------------

Var Graph::sum(Var a) {
    const Tensor& ta = val(a);
    double s = 0.0;
    for (std::size_t i = 0; i < ta.numel(); ++i) s += ta[i];
    Var sv = make(Tensor::scalar(s), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const double gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad[0];
            const Tensor& x = g.val(a);
            Tensor ga(x.shape(), gr);
            g.accum(a, ga);
        };
    return sv;
}

Var Graph::mean(Var a) {
    const double inv = 1.0 / static_cast<double>(val(a).numel());
    return mul_scalar(sum(a), inv);
}

Var Graph::reshape(Var a, Shape s) {
    Tensor out = val(a).reshaped(std::move(s));
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            g.accum_raw(a, gr.data(), gr.numel());
        };
    return sv;
}

Var Graph::slice0(Var a, int begin, int end) {
    const Tensor& ta = val(a);
    const int d0 = ta.dim(0);
    if (begin < 0 || end > d0 || begin >= end) throw ContractError("slice0 out of range");
    const std::size_t row = ta.numel() / static_cast<std::size_t>(d0);
    Shape s = ta.shape();
    s[0] = end - begin;
    Tensor out(s);
    std::memcpy(out.data(), ta.data() + begin * row, (end - begin) * row * sizeof(double));
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, begin, row, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            Node& pn = g.nodes_[static_cast<std::size_t>(a.idx)];
            if (!pn.requires_grad) return;
            Tensor& pg = g.grad_buf(a);
            double* dst = pg.data() + static_cast<std::size_t>(begin) * row;
            for (std::size_t i = 0; i < gr.numel(); ++i) dst[i] += gr[i];
        };
    return sv;
}

Var Graph::slice_axis(Var a, int pre, int mid, int post, int begin, int end) {
    const Tensor& ta = val(a);
    if (static_cast<std::size_t>(pre) * mid * post != ta.numel())
        throw ContractError("slice_axis: factorization mismatch");
    if (begin < 0 || end > mid || begin >= end) throw ContractError("slice_axis out of range");
    const int w = end - begin;
    Tensor out(Shape{pre, w, post});
    for (int p = 0; p < pre; ++p)
        std::memcpy(out.data() + (static_cast<std::size_t>(p) * w) * post,
                    ta.data() + (static_cast<std::size_t>(p) * mid + begin) * post,
                    static_cast<std::size_t>(w) * post * sizeof(double));
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, pre, mid, post, begin, w, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            Node& pn = g.nodes_[static_cast<std::size_t>(a.idx)];
            if (!pn.requires_grad) return;
            Tensor& pg = g.grad_buf(a);
            for (int p = 0; p < pre; ++p) {
                const double* src = gr.data() + (static_cast<std::size_t>(p) * w) * post;
                double* dst = pg.data() + (static_cast<std::size_t>(p) * mid + begin) * post;
                for (std::size_t i = 0; i < static_cast<std::size_t>(w) * post; ++i) dst[i] += src[i];
            }
        };
    return sv;
}

Var Graph::concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat0 of nothing");
    Shape s = val(parts[0]).shape();
    int d0 = 0;
    std::size_t row = val(parts[0]).numel() / static_cast<std::size_t>(s[0]);
    bool any_rg = false;
    for (Var p : parts) {
        const Tensor& t = val(p);
        if (t.numel() / static_cast<std::size_t>(t.dim(0)) != row)
            throw ContractError("concat0: row size mismatch");
        d0 += t.dim(0);
        any_rg = any_rg || rg(p);
    }
    s[0] = d0;
    Tensor out(s);
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& t = val(p);
        std::memcpy(out.data() + off, t.data(), t.numel() * sizeof(double));
        off += t.numel();
    }
    Var sv = make(std::move(out), any_rg, nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [parts, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            std::size_t off2 = 0;
            for (Var p : parts) {
                const std::size_t cnt = g.val(p).numel();
                Node& pn = g.nodes_[static_cast<std::size_t>(p.idx)];
                if (pn.requires_grad) {
                    Tensor& pg = g.grad_buf(p);
                    const double* src = gr.data() + off2;
                    for (std::size_t i = 0; i < cnt; ++i) pg[i] += src[i];
                }
                off2 += cnt;
            }
        };
    return sv;
}

Var Graph::pack_scalars(const std::vector<Var>& scalars) {
    Tensor out(Shape{static_cast<int>(scalars.size())});
    bool any_rg = false;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        if (val(scalars[i]).numel() != 1) throw ContractError("pack_scalars: non-scalar part");
        out[i] = val(scalars[i])[0];
        any_rg = any_rg || rg(scalars[i]);
    }
    Var sv = make(std::move(out), any_rg, nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [scalars, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            for (std::size_t i = 0; i < scalars.size(); ++i)
                g.accum(scalars[i], Tensor::scalar(gr[i]));
        };
    return sv;
}

Var Graph::select_col(Var a, int col) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2) throw ContractError("select_col expects a matrix");
    const int m = ta.dim(0), w = ta.dim(1);
    if (col < 0 || col >= w) throw ContractError("select_col out of range");
    Tensor out(Shape{m});
    for (int i = 0; i < m; ++i) out[static_cast<std::size_t>(i)] = ta.at2(i, col);
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& n = nodes_.back();
    if (n.requires_grad)
        n.back = [a, col, m, w, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            Node& pn = g.nodes_[static_cast<std::size_t>(a.idx)];
            if (!pn.requires_grad) return;
            Tensor& pg = g.grad_buf(a);
            for (int i = 0; i < m; ++i) pg[static_cast<std::size_t>(i) * w + col] += gr[static_cast<std::size_t>(i)];
        };
    return sv;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(1) != tb.dim(0))
        throw ContractError("matmul shape mismatch");
    const int m = ta.dim(0), k = ta.dim(1), n2 = tb.dim(1);
    Tensor out(Shape{m, n2});
    kernels::gemm_nn(m, n2, k, ta.data(), k, tb.data(), n2, out.data(), n2, false);
    Var sv = make(std::move(out), rg(a) || rg(b), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [a, b, m, k, n2, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            if (g.rg(a)) {
                Tensor ga(Shape{m, k});
                kernels::gemm_nt(m, k, n2, gr.data(), n2, g.val(b).data(), n2, ga.data(), k, false);
                g.accum(a, ga);
            }
            if (g.rg(b)) {
                Tensor gb(Shape{k, n2});
                kernels::gemm_tn(k, n2, m, g.val(a).data(), k, gr.data(), n2, gb.data(), n2, false);
                g.accum(b, gb);
            }
        };
    return sv;
}

Var Graph::matvec(Var a, Var x) {
    const Tensor& ta = val(a);
    const Tensor& tx = val(x);
    if (ta.ndim() != 2 || tx.ndim() != 1 || ta.dim(1) != tx.dim(0))
        throw ContractError("matvec shape mismatch");
    const int m = ta.dim(0), n2 = ta.dim(1);
    Tensor out(Shape{m});
    la::matvec(ta, tx.data(), out.data());
    Var sv = make(std::move(out), rg(a) || rg(x), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [a, x, m, n2, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            if (g.rg(a)) {
                const Tensor& tx2 = g.val(x);
                Tensor ga(Shape{m, n2});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n2; ++j) ga.at2(i, j) = gr[static_cast<std::size_t>(i)] * tx2[static_cast<std::size_t>(j)];
                g.accum(a, ga);
            }
            if (g.rg(x)) {
                const Tensor& ta2 = g.val(a);
                Tensor gx(Shape{n2});
                for (int j = 0; j < n2; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < m; ++i) s += ta2.at2(i, j) * gr[static_cast<std::size_t>(i)];
                    gx[static_cast<std::size_t>(j)] = s;
                }
                g.accum(x, gx);
            }
        };
    return sv;
}

Var Graph::dot(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.numel() != tb.numel()) throw ContractError("dot length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < ta.numel(); ++i) s += ta[i] * tb[i];
    Var sv = make(Tensor::scalar(s), rg(a) || rg(b), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [a, b, sv](Graph& g) {
            const double gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad[0];
            const Tensor& ta2 = g.val(a);
            const Tensor& tb2 = g.val(b);
            if (g.rg(a)) {
                Tensor ga(ta2.shape());
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = gr * tb2[i];
                g.accum(a, ga);
            }
            if (g.rg(b)) {
                Tensor gb(tb2.shape());
                for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] = gr * ta2[i];
                g.accum(b, gb);
            }
        };
    return sv;
}

Var Graph::linear(Var x, Var w, Var b) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    if (tx.ndim() != 2 || tw.ndim() != 2 || tx.dim(1) != tw.dim(1))
        throw ContractError("linear shape mismatch");
    const int n = tx.dim(0), fi = tx.dim(1), fo = tw.dim(0);
    Tensor out(Shape{n, fo});
    kernels::gemm_nt(n, fo, fi, tx.data(), fi, tw.data(), fi, out.data(), fo, false);
    bool rgb = false;
    if (b.valid()) {
        const Tensor& tb = val(b);
        if (tb.numel() != static_cast<std::size_t>(fo)) throw ContractError("linear bias mismatch");
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < fo; ++j) out.at2(i, j) += tb[static_cast<std::size_t>(j)];
        rgb = rg(b);
    }
    Var sv = make(std::move(out), rg(x) || rg(w) || rgb, nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [x, w, b, n, fi, fo, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            if (g.rg(x)) {
                Tensor gx(Shape{n, fi});
                kernels::gemm_nn(n, fi, fo, gr.data(), fo, g.val(w).data(), fi, gx.data(), fi, false);
                g.accum(x, gx);
            }
            if (g.rg(w)) {
                Tensor gw(Shape{fo, fi});
                kernels::gemm_tn(fo, fi, n, gr.data(), fo, g.val(x).data(), fi, gw.data(), fi, false);
                g.accum(w, gw);
            }
            if (b.valid() && g.rg(b)) {
                Tensor gb(Shape{fo});
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < fo; ++j) gb[static_cast<std::size_t>(j)] += gr.at2(i, j);
                g.accum(b, gb);
            }
        };
    return sv;
}

Var Graph::pairwise_sqdist(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(1) != tb.dim(1))
        throw ContractError("pairwise_sqdist shape mismatch");
    const int m = ta.dim(0), n2 = tb.dim(0), f = ta.dim(1);
    Tensor out(Shape{m, n2});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) {
            double s = 0.0;
            for (int k = 0; k < f; ++k) {
                const double d = ta.at2(i, k) - tb.at2(j, k);
                s += d * d;
            }
            out.at2(i, j) = s;
        }
    Var sv = make(std::move(out), rg(a) || rg(b), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [a, b, m, n2, f, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& ta2 = g.val(a);
            const Tensor& tb2 = g.val(b);
            const bool ra = g.rg(a), rb = g.rg(b);
            Tensor ga(ta2.shape()), gb(tb2.shape());
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n2; ++j) {
                    const double gij = gr.at2(i, j);
                    if (gij == 0.0) continue;
                    for (int k = 0; k < f; ++k) {
                        const double d = 2.0 * (ta2.at2(i, k) - tb2.at2(j, k)) * gij;
                        if (ra) ga.at2(i, k) += d;
                        if (rb) gb.at2(j, k) -= d;
                    }
                }
            if (ra) g.accum(a, ga);
            if (rb) g.accum(b, gb);
        };
    return sv;
}

Var Graph::add_diag(Var a, double eps) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2 || ta.dim(0) != ta.dim(1)) throw ContractError("add_diag expects square");
    Tensor out = ta;
    const int n = ta.dim(0);
    for (int i = 0; i < n; ++i) out.at2(i, i) += eps;
    Var sv = make(std::move(out), rg(a), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [a, sv](Graph& g) { g.accum(a, g.nodes_[static_cast<std::size_t>(sv.idx)].grad); };
    return sv;
}

Var Graph::cholesky(Var a) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2 || ta.dim(0) != ta.dim(1)) throw ContractError("cholesky expects square");
    Tensor l = ta;
    if (!la::cholesky_lower_inplace(l)) throw NumericalError("cholesky factorization failed");
    const int n = ta.dim(0);
    Var sv = make(std::move(l), rg(a), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [a, n, sv](Graph& g) {
            // Reverse of the Cholesky-Banachiewicz loop; the gradient lands on
            // the lower triangle of A (the only part the forward reads).
            const Tensor& lt = g.val(sv);
            Tensor dl = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;  // copy: will be mutated
            Tensor da(Shape{n, n});
            for (int j = n - 1; j >= 0; --j) {
                for (int i = n - 1; i > j; --i) {
                    const double gij = dl.at2(i, j);
                    if (gij != 0.0) {
                        const double inv = 1.0 / lt.at2(j, j);
                        da.at2(i, j) += gij * inv;
                        for (int k = 0; k < j; ++k) {
                            dl.at2(i, k) -= gij * lt.at2(j, k) * inv;
                            dl.at2(j, k) -= gij * lt.at2(i, k) * inv;
                        }
                        dl.at2(j, j) -= gij * lt.at2(i, j) * inv;
                    }
                }
                const double gjj = dl.at2(j, j);
                if (gjj != 0.0) {
                    const double half_inv = 0.5 / lt.at2(j, j);
                    da.at2(j, j) += gjj * half_inv;
                    for (int k = 0; k < j; ++k) dl.at2(j, k) -= gjj * lt.at2(j, k) / lt.at2(j, j);
                }
            }
            g.accum(a, da);
        };
    return sv;
}

Var Graph::trisolve_lower(Var l, Var b) {
    const Tensor& tl = val(l);
    const Tensor& tb = val(b);
    if (tl.ndim() != 2 || tl.dim(0) != tl.dim(1) || tb.ndim() != 2 || tb.dim(0) != tl.dim(0))
        throw ContractError("trisolve shape mismatch");
    Tensor x = tb;
    la::trisolve_lower_mat(tl, x);
    const int n = tl.dim(0), m = tb.dim(1);
    Var sv = make(std::move(x), rg(l) || rg(b), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [l, b, n, m, sv](Graph& g) {
            const Tensor& lt = g.val(l);
            const Tensor& xt = g.val(sv);
            Tensor gb = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;  // copy
            la::trisolve_lower_transposed_mat(lt, gb);                    // gb = L^{-T} G
            if (g.rg(b)) g.accum(b, gb);
            if (g.rg(l)) {
                Tensor gl(Shape{n, n});
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k <= i; ++k) {
                        double s = 0.0;
                        for (int c = 0; c < m; ++c) s += gb.at2(i, c) * xt.at2(k, c);
                        gl.at2(i, k) = -s;
                    }
                g.accum(l, gl);
            }
        };
    return sv;
}

// ---------------------------------------------------------------------------
// Neural-net blocks
// ---------------------------------------------------------------------------

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    if (tx.ndim() != 4 || tw.ndim() != 4 || tx.dim(1) != tw.dim(1))
        throw ContractError("conv2d shape mismatch");
    const int N = tx.dim(0), Ci = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    const int Co = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
    const int Ho = kernels::conv_out_dim(H, kh, stride, pad);
    const int Wo = kernels::conv_out_dim(W, kw, stride, pad);
    Tensor out(Shape{N, Co, Ho, Wo});
    kernels::conv2d_forward(tx.data(), N, Ci, H, W, tw.data(), Co, kh, kw, stride, pad,
                            b.valid() ? val(b).data() : nullptr, out.data());
    Var sv = make(std::move(out), rg(x) || rg(w) || (b.valid() && rg(b)), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [x, w, b, N, Ci, H, W, Co, kh, kw, stride, pad, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            if (g.rg(x)) {
                Tensor gx(g.val(x).shape());
                kernels::conv2d_backward_input(gr.data(), N, Ci, H, W, g.val(w).data(), Co, kh,
                                               kw, stride, pad, gx.data());
                g.accum(x, gx);
            }
            if (g.rg(w) || (b.valid() && g.rg(b))) {
                Tensor gw(g.val(w).shape());
                Tensor gb(b.valid() ? g.val(b).shape() : Shape{Co});
                kernels::conv2d_backward_params(gr.data(), g.val(x).data(), N, Ci, H, W, Co, kh,
                                                kw, stride, pad, gw.data(),
                                                b.valid() ? gb.data() : nullptr);
                if (g.rg(w)) g.accum(w, gw);
                if (b.valid() && g.rg(b)) g.accum(b, gb);
            }
        };
    return sv;
}

Var Graph::conv_transpose2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    if (tx.ndim() != 4 || tw.ndim() != 4 || tx.dim(1) != tw.dim(0))
        throw ContractError("conv_transpose2d shape mismatch");
    const int N = tx.dim(0), Ci = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    const int Co = tw.dim(1), kh = tw.dim(2), kw = tw.dim(3);
    const int Ho = kernels::convt_out_dim(H, kh, stride, pad);
    const int Wo = kernels::convt_out_dim(W, kw, stride, pad);
    Tensor out(Shape{N, Co, Ho, Wo});
    kernels::convt2d_forward(tx.data(), N, Ci, H, W, tw.data(), Co, kh, kw, stride, pad,
                             b.valid() ? val(b).data() : nullptr, out.data());
    Var sv = make(std::move(out), rg(x) || rg(w) || (b.valid() && rg(b)), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [x, w, b, N, Ci, H, W, Co, kh, kw, stride, pad, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            if (g.rg(x)) {
                Tensor gx(g.val(x).shape());
                kernels::convt2d_backward_input(gr.data(), N, Ci, H, W, g.val(w).data(), Co, kh,
                                                kw, stride, pad, gx.data());
                g.accum(x, gx);
            }
            if (g.rg(w) || (b.valid() && g.rg(b))) {
                Tensor gw(g.val(w).shape());
                Tensor gb(b.valid() ? g.val(b).shape() : Shape{Co});
                kernels::convt2d_backward_params(gr.data(), g.val(x).data(), N, Ci, H, W, Co, kh,
                                                 kw, stride, pad, gw.data(),
                                                 b.valid() ? gb.data() : nullptr);
                if (g.rg(w)) g.accum(w, gw);
                if (b.valid() && g.rg(b)) g.accum(b, gb);
            }
        };
    return sv;
}

Var Graph::batchnorm2d(Var x, Var gamma, Var beta, int group, bool training,
                       BatchNormRunning* running, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 4) throw ContractError("batchnorm2d expects NCHW");
    const int N = tx.dim(0), C = tx.dim(1), HW = tx.dim(2) * tx.dim(3);
    if (val(gamma).numel() != static_cast<std::size_t>(C)) throw ContractError("batchnorm gamma mismatch");

    if (!training) {
        if (!running) throw ContractError("eval-mode batchnorm requires running stats");
        // Affine per-channel transform with frozen statistics.
        Tensor out(tx.shape());
        Tensor invstd(Shape{C});
        for (int c = 0; c < C; ++c) invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(running->var[static_cast<std::size_t>(c)] + eps);
        kernels::bn_apply(tx.data(), N, C, HW, N, running->mean.data(), invstd.data(),
                          val(gamma).data(), val(beta).data(), out.data());
        Var sv = make(std::move(out), rg(x) || rg(gamma) || rg(beta), nullptr);
        Node& nd = nodes_.back();
        if (nd.requires_grad) {
            Tensor mean_c = running->mean;
            nd.back = [x, gamma, beta, N, C, HW, invstd, mean_c, sv](Graph& g) {
                const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
                const Tensor& tx2 = g.val(x);
                const Tensor& tg = g.val(gamma);
                const std::size_t sample = static_cast<std::size_t>(C) * HW;
                if (g.rg(x)) {
                    Tensor gx(tx2.shape());
                    for (int n2 = 0; n2 < N; ++n2)
                        for (int c = 0; c < C; ++c) {
                            const double k = tg[static_cast<std::size_t>(c)] * invstd[static_cast<std::size_t>(c)];
                            const double* src = gr.data() + n2 * sample + static_cast<std::size_t>(c) * HW;
                            double* dst = gx.data() + n2 * sample + static_cast<std::size_t>(c) * HW;
                            for (int k2 = 0; k2 < HW; ++k2) dst[k2] = src[k2] * k;
                        }
                    g.accum(x, gx);
                }
                if (g.rg(gamma) || g.rg(beta)) {
                    Tensor gg(Shape{C}), gb(Shape{C});
                    for (int n2 = 0; n2 < N; ++n2)
                        for (int c = 0; c < C; ++c) {
                            const double mu = mean_c[static_cast<std::size_t>(c)];
                            const double is = invstd[static_cast<std::size_t>(c)];
                            const double* px = tx2.data() + n2 * sample + static_cast<std::size_t>(c) * HW;
                            const double* pg = gr.data() + n2 * sample + static_cast<std::size_t>(c) * HW;
                            for (int k2 = 0; k2 < HW; ++k2) {
                                gg[static_cast<std::size_t>(c)] += pg[k2] * (px[k2] - mu) * is;
                                gb[static_cast<std::size_t>(c)] += pg[k2];
                            }
                        }
                    if (g.rg(gamma)) g.accum(gamma, gg);
                    if (g.rg(beta)) g.accum(beta, gb);
                }
            };
        }
        return sv;
    }

    if (group <= 0 || N % group != 0) throw ContractError("batchnorm group must divide batch");
    const int num_groups = N / group;
    Tensor mean(Shape{num_groups, C}), var(Shape{num_groups, C});
    kernels::bn_group_stats(tx.data(), N, C, HW, group, mean.data(), var.data());
    Tensor invstd(Shape{num_groups, C});
    for (std::size_t i = 0; i < invstd.numel(); ++i) invstd[i] = 1.0 / std::sqrt(var[i] + eps);
    Tensor out(tx.shape());
    kernels::bn_apply(tx.data(), N, C, HW, group, mean.data(), invstd.data(), val(gamma).data(),
                      val(beta).data(), out.data());

    if (running) {
        // One running update per forward using whole-batch statistics.
        Tensor bmean(Shape{C}), bvar(Shape{C});
        kernels::bn_batch_stats(tx.data(), N, C, HW, bmean.data(), bvar.data());
        const double mom = running->momentum;
        for (int c = 0; c < C; ++c) {
            running->mean[static_cast<std::size_t>(c)] =
                (1.0 - mom) * running->mean[static_cast<std::size_t>(c)] + mom * bmean[static_cast<std::size_t>(c)];
            running->var[static_cast<std::size_t>(c)] =
                (1.0 - mom) * running->var[static_cast<std::size_t>(c)] + mom * bvar[static_cast<std::size_t>(c)];
        }
    }

    Var sv = make(std::move(out), rg(x) || rg(gamma) || rg(beta), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [x, gamma, beta, N, C, HW, group, mean, invstd, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const Tensor& tx2 = g.val(x);
            Tensor gx(tx2.shape());
            Tensor gg(Shape{C}), gb(Shape{C});
            kernels::bn_backward(tx2.data(), gr.data(), N, C, HW, group, mean.data(),
                                 invstd.data(), g.val(gamma).data(), gx.data(), gg.data(),
                                 gb.data());
            if (g.rg(x)) g.accum(x, gx);
            if (g.rg(gamma)) g.accum(gamma, gg);
            if (g.rg(beta)) g.accum(beta, gb);
        };
    return sv;
}

Var Graph::mean_pool_groups(Var x, int group, const std::vector<std::uint8_t>& mask) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 2) throw ContractError("mean_pool_groups expects [N,F]");
    const int N = tx.dim(0), F = tx.dim(1);
    if (group <= 0 || N % group != 0 || mask.size() != static_cast<std::size_t>(N))
        throw ContractError("mean_pool_groups: bad group or mask");
    const int Q = N / group;
    std::vector<double> inv_count(static_cast<std::size_t>(Q));
    for (int q = 0; q < Q; ++q) {
        int cnt = 0;
        for (int i = q * group; i < (q + 1) * group; ++i) cnt += mask[static_cast<std::size_t>(i)] ? 1 : 0;
        if (cnt == 0) throw ContractError("mean_pool_groups: empty mask group");
        inv_count[static_cast<std::size_t>(q)] = 1.0 / cnt;
    }
    Tensor out(Shape{Q, F});
    for (int q = 0; q < Q; ++q) {
        for (int i = q * group; i < (q + 1) * group; ++i) {
            if (!mask[static_cast<std::size_t>(i)]) continue;
            for (int f = 0; f < F; ++f) out.at2(q, f) += tx.at2(i, f);
        }
        for (int f = 0; f < F; ++f) out.at2(q, f) *= inv_count[static_cast<std::size_t>(q)];
    }
    Var sv = make(std::move(out), rg(x), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [x, group, mask, inv_count, N, F, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            Tensor gx(Shape{N, F});
            for (int i = 0; i < N; ++i) {
                if (!mask[static_cast<std::size_t>(i)]) continue;
                const int q = i / group;
                const double ic = inv_count[static_cast<std::size_t>(q)];
                for (int f = 0; f < F; ++f) gx.at2(i, f) = gr.at2(q, f) * ic;
            }
            g.accum(x, gx);
        };
    return sv;
}

Var Graph::assemble_cell_locations(Var rows, Var cols) {
    const Tensor& tr = val(rows);
    const Tensor& tc = val(cols);
    if (tr.ndim() != 4 || tc.ndim() != 4 || !tr.same_shape(tc) || tr.dim(1) != 3)
        throw ContractError("assemble_cell_locations expects [B,3,D,dl] pairs");
    const int B = tr.dim(0), D = tr.dim(2), dl = tr.dim(3);
    Tensor out(Shape{B * D * 9, 2 * dl});
    auto roff = [&](int b, int i, int d) {
        return ((static_cast<std::size_t>(b) * 3 + i) * D + d) * dl;
    };
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
            for (int k = 0; k < 9; ++k) {
                const int i = k / 3, j = k % 3;
                double* dst = out.data() + (static_cast<std::size_t>((b * D + d) * 9 + k)) * (2 * dl);
                std::memcpy(dst, tr.data() + roff(b, i, d), static_cast<std::size_t>(dl) * sizeof(double));
                std::memcpy(dst + dl, tc.data() + roff(b, j, d), static_cast<std::size_t>(dl) * sizeof(double));
            }
    Var sv = make(std::move(out), rg(rows) || rg(cols), nullptr);
    Node& nd = nodes_.back();
    if (nd.requires_grad)
        nd.back = [rows, cols, B, D, dl, sv](Graph& g) {
            const Tensor& gr = g.nodes_[static_cast<std::size_t>(sv.idx)].grad;
            const bool rr = g.rg(rows), rc = g.rg(cols);
            Tensor grow(g.val(rows).shape()), gcol(g.val(cols).shape());
            auto roff = [&](int b, int i, int d) {
                return ((static_cast<std::size_t>(b) * 3 + i) * D + d) * dl;
            };
            for (int b = 0; b < B; ++b)
                for (int d = 0; d < D; ++d)
                    for (int k = 0; k < 9; ++k) {
                        const int i = k / 3, j = k % 3;
                        const double* src = gr.data() + (static_cast<std::size_t>((b * D + d) * 9 + k)) * (2 * dl);
                        if (rr) {
                            double* dst = grow.data() + roff(b, i, d);
                            for (int t = 0; t < dl; ++t) dst[t] += src[t];
                        }
                        if (rc) {
                            double* dst = gcol.data() + roff(b, j, d);
                            for (int t = 0; t < dl; ++t) dst[t] += src[dl + t];
                        }
                    }
            if (rr) g.accum(rows, grow);
            if (rc) g.accum(cols, gcol);
        };
    return sv;
}

}  // namespace rpm::ad
