#include "advcloak/tape.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "advcloak/errors.hpp"

namespace advcloak {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Tape::Id Tape::push(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    // Gradients are allocated up front so a backward pass that never reaches
    // a recorded node still finds a zero gradient there.
    if (requires_grad) n.grad = Tensor(n.value.dims);
    nodes_.push_back(std::move(n));
    return Id{static_cast<int>(nodes_.size()) - 1};
}

Tape::Id Tape::constant(Tensor t) { return push(std::move(t), false); }
Tape::Id Tape::leaf(Tensor t) { return push(std::move(t), true); }

Tensor& Tape::grad_mut(Id id) {
    Node& n = nodes_[static_cast<std::size_t>(id.i)];
    if (n.grad.v.empty()) n.grad = Tensor(n.value.dims);
    return n.grad;
}

void Tape::backward(Id out) {
    const Tensor& o = val(out);
    if (o.numel() != 1) throw PreconditionError("backward requires a scalar output");
    grad_mut(out).v[0] = 1.0;
    for (auto it = back_ops_.rbegin(); it != back_ops_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------- elementwise

Tape::Id Tape::add(Id a, Id b) {
    const Tensor &ta = v(a), &tb = v(b);
    if (!ta.same_shape(tb)) throw PreconditionError("add: shape mismatch");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += tb.v[i];
    Id r = push(std::move(out), rq(a) || rq(b));
    if (rq(r)) back_ops_.push_back([this, a, b, r] {
        const Tensor& g = grad(r);
        if (rq(a)) {
            Tensor& ga = grad_mut(a);
            for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
        }
        if (rq(b)) {
            Tensor& gb = grad_mut(b);
            for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i];
        }
    });
    return r;
}

Tape::Id Tape::sub(Id a, Id b) {
    const Tensor &ta = v(a), &tb = v(b);
    if (!ta.same_shape(tb)) throw PreconditionError("sub: shape mismatch");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= tb.v[i];
    Id r = push(std::move(out), rq(a) || rq(b));
    if (rq(r)) back_ops_.push_back([this, a, b, r] {
        const Tensor& g = grad(r);
        if (rq(a)) {
            Tensor& ga = grad_mut(a);
            for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
        }
        if (rq(b)) {
            Tensor& gb = grad_mut(b);
            for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] -= g.v[i];
        }
    });
    return r;
}

Tape::Id Tape::mul(Id a, Id b) {
    const Tensor &ta = v(a), &tb = v(b);
    if (!ta.same_shape(tb)) throw PreconditionError("mul: shape mismatch");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= tb.v[i];
    Id r = push(std::move(out), rq(a) || rq(b));
    if (rq(r)) back_ops_.push_back([this, a, b, r] {
        const Tensor& g = grad(r);
        if (rq(a)) {
            Tensor& ga = grad_mut(a);
            const Tensor& tb2 = v(b);
            for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * tb2.v[i];
        }
        if (rq(b)) {
            Tensor& gb = grad_mut(b);
            const Tensor& ta2 = v(a);
            for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i] * ta2.v[i];
        }
    });
    return r;
}

Tape::Id Tape::affine(Id x, double scale, double shift) {
    Tensor out = v(x);
    for (auto& e : out.v) e = scale * e + shift;
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, scale] {
        const Tensor& g = grad(r);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i) gx.v[i] += scale * g.v[i];
    });
    return r;
}

Tape::Id Tape::relu(Id x) {
    Tensor out = v(x);
    for (auto& e : out.v) e = e > 0.0 ? e : 0.0;
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r] {
        const Tensor &g = grad(r), &xin = v(x);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i)
            if (xin.v[i] > 0.0) gx.v[i] += g.v[i];
    });
    return r;
}

Tape::Id Tape::leaky_relu(Id x, double slope) {
    Tensor out = v(x);
    for (auto& e : out.v) e = e > 0.0 ? e : slope * e;
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, slope] {
        const Tensor &g = grad(r), &xin = v(x);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i)
            gx.v[i] += (xin.v[i] > 0.0 ? 1.0 : slope) * g.v[i];
    });
    return r;
}

Tape::Id Tape::tanh_op(Id x) {
    Tensor out = v(x);
    for (auto& e : out.v) e = std::tanh(e);
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r] {
        const Tensor &g = grad(r), &y = val(r);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i) gx.v[i] += (1.0 - y.v[i] * y.v[i]) * g.v[i];
    });
    return r;
}

Tape::Id Tape::sigmoid(Id x) {
    Tensor out = v(x);
    for (auto& e : out.v) {
        if (e >= 0.0) {
            e = 1.0 / (1.0 + std::exp(-e));
        } else {
            double z = std::exp(e);
            e = z / (1.0 + z);
        }
    }
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r] {
        const Tensor &g = grad(r), &y = val(r);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i) gx.v[i] += y.v[i] * (1.0 - y.v[i]) * g.v[i];
    });
    return r;
}

Tape::Id Tape::log_clamped(Id x, double floor) {
    Tensor out = v(x);
    for (auto& e : out.v) e = std::log(e > floor ? e : floor);
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, floor] {
        const Tensor &g = grad(r), &xin = v(x);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i)
            if (xin.v[i] > floor) gx.v[i] += g.v[i] / xin.v[i];
    });
    return r;
}

Tape::Id Tape::max_const(Id x, double c) {
    Tensor out = v(x);
    for (auto& e : out.v) e = e > c ? e : c;
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, c] {
        const Tensor &g = grad(r), &xin = v(x);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i)
            if (xin.v[i] > c) gx.v[i] += g.v[i];
    });
    return r;
}

Tape::Id Tape::clip01(Id x) {
    Tensor out = v(x);
    for (auto& e : out.v) e = e < 0.0 ? 0.0 : (e > 1.0 ? 1.0 : e);
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r] {
        const Tensor &g = grad(r), &xin = v(x);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i)
            if (xin.v[i] >= 0.0 && xin.v[i] <= 1.0) gx.v[i] += g.v[i];
    });
    return r;
}

// ------------------------------------------------------- broadcast/reductions

Tape::Id Tape::add_broadcast_n(Id x, Id single) {
    const Tensor &tx = v(x), &ts = v(single);
    if (ts.dims.empty() || ts.dims[0] != 1)
        throw PreconditionError("add_broadcast_n: broadcast operand must have leading dim 1");
    std::int64_t inner = ts.numel();
    if (tx.numel() % inner != 0 || tx.rank() != ts.rank())
        throw PreconditionError("add_broadcast_n: shape mismatch");
    int n = tx.dims[0];
    Tensor out = tx;
    for (int i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < inner; ++j)
            out.v[static_cast<std::size_t>(i * inner + j)] += ts.v[static_cast<std::size_t>(j)];
    Id r = push(std::move(out), rq(x) || rq(single));
    if (rq(r)) back_ops_.push_back([this, x, single, r, n, inner] {
        const Tensor& g = grad(r);
        if (rq(x)) {
            Tensor& gx = grad_mut(x);
            for (std::size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i];
        }
        if (rq(single)) {
            Tensor& gs = grad_mut(single);
            for (int i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < inner; ++j)
                    gs.v[static_cast<std::size_t>(j)] += g.v[static_cast<std::size_t>(i * inner + j)];
        }
    });
    return r;
}

Tape::Id Tape::mean_over_n(Id x) {
    const Tensor& tx = v(x);
    int n = tx.dims[0];
    std::int64_t inner = tx.numel() / n;
    std::vector<int> odims = tx.dims;
    odims[0] = 1;
    Tensor out(odims);
    for (int i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < inner; ++j)
            out.v[static_cast<std::size_t>(j)] += tx.v[static_cast<std::size_t>(i * inner + j)];
    for (auto& e : out.v) e /= n;
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, n, inner] {
        const Tensor& g = grad(r);
        Tensor& gx = grad_mut(x);
        for (int i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < inner; ++j)
                gx.v[static_cast<std::size_t>(i * inner + j)] += g.v[static_cast<std::size_t>(j)] / n;
    });
    return r;
}

Tape::Id Tape::mean_all(Id x) {
    const Tensor& tx = v(x);
    std::int64_t n = tx.numel();
    double s = 0.0;
    for (double e : tx.v) s += e;
    Id r = push(Tensor::scalar(s / static_cast<double>(n)), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, n] {
        double g = grad(r).v[0] / static_cast<double>(n);
        Tensor& gx = grad_mut(x);
        for (auto& e : gx.v) e += g;
    });
    return r;
}

Tape::Id Tape::lincomb(const std::vector<Id>& xs, const std::vector<double>& coeffs) {
    if (xs.size() != coeffs.size() || xs.empty())
        throw PreconditionError("lincomb: needs matching non-empty ids/coeffs");
    double s = 0.0;
    bool any_rq = false;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        if (v(xs[k]).numel() != 1) throw PreconditionError("lincomb: scalar operands only");
        s += coeffs[k] * v(xs[k]).v[0];
        any_rq = any_rq || rq(xs[k]);
    }
    Id r = push(Tensor::scalar(s), any_rq);
    if (rq(r)) back_ops_.push_back([this, xs, coeffs, r] {
        double g = grad(r).v[0];
        for (std::size_t k = 0; k < xs.size(); ++k)
            if (rq(xs[k])) grad_mut(xs[k]).v[0] += coeffs[k] * g;
    });
    return r;
}

// ------------------------------------------------------------------ conv nets

namespace {

struct ConvGeom {
    int n, ci, h, w, co, kh, kw, stride, pad, ho, wo;
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4) throw PreconditionError("conv2d: rank-4 operands required");
    if (x.dims[1] != w.dims[1]) throw PreconditionError("conv2d: channel mismatch");
    ConvGeom g;
    g.n = x.dims[0];
    g.ci = x.dims[1];
    g.h = x.dims[2];
    g.w = x.dims[3];
    g.co = w.dims[0];
    g.kh = w.dims[2];
    g.kw = w.dims[3];
    g.stride = stride;
    g.pad = pad;
    g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
    g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
    if (g.ho <= 0 || g.wo <= 0) throw PreconditionError("conv2d: empty output");
    return g;
}

// col: [ci*kh*kw, ho*wo] for one sample.
void im2col(const double* x, const ConvGeom& g, double* col) {
    int idx = 0;
    for (int c = 0; c < g.ci; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                for (int oy = 0; oy < g.ho; ++oy) {
                    int iy = oy * g.stride + ki - g.pad;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        int ix = ox * g.stride + kj - g.pad;
                        col[idx++] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                         ? x[(c * g.h + iy) * g.w + ix]
                                         : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accum(const double* col, const ConvGeom& g, double* gx) {
    int idx = 0;
    for (int c = 0; c < g.ci; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                for (int oy = 0; oy < g.ho; ++oy) {
                    int iy = oy * g.stride + ki - g.pad;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        int ix = ox * g.stride + kj - g.pad;
                        double e = col[idx++];
                        if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                            gx[(c * g.h + iy) * g.w + ix] += e;
                    }
                }
            }
        }
    }
}

}  // namespace

Tape::Id Tape::conv2d(Id x, Id w, Id b, int stride, int pad) {
    const Tensor &tx = v(x), &tw = v(w), &tb = v(b);
    ConvGeom g = conv_geom(tx, tw, stride, pad);
    if (tb.numel() != g.co) throw PreconditionError("conv2d: bias size mismatch");
    const int kdim = g.ci * g.kh * g.kw;
    const int odim = g.ho * g.wo;
    Tensor out({g.n, g.co, g.ho, g.wo});
    std::vector<double> col(static_cast<std::size_t>(kdim) * odim);
    CMapMat wm(tw.v.data(), g.co, kdim);
    for (int i = 0; i < g.n; ++i) {
        im2col(tx.v.data() + static_cast<std::size_t>(i) * g.ci * g.h * g.w, g, col.data());
        CMapMat cm(col.data(), kdim, odim);
        MapMat om(out.v.data() + static_cast<std::size_t>(i) * g.co * odim, g.co, odim);
        om.noalias() = wm * cm;
        for (int c = 0; c < g.co; ++c) om.row(c).array() += tb.v[static_cast<std::size_t>(c)];
    }
    Id r = push(std::move(out), rq(x) || rq(w) || rq(b));
    if (rq(r)) back_ops_.push_back([this, x, w, b, r, g, kdim, odim] {
        const Tensor &gout = grad(r), &tx2 = v(x), &tw2 = v(w);
        std::vector<double> col(static_cast<std::size_t>(kdim) * odim);
        std::vector<double> gcol(static_cast<std::size_t>(kdim) * odim);
        CMapMat wm(tw2.v.data(), g.co, kdim);
        for (int i = 0; i < g.n; ++i) {
            CMapMat gm(gout.v.data() + static_cast<std::size_t>(i) * g.co * odim, g.co, odim);
            if (rq(w)) {
                im2col(tx2.v.data() + static_cast<std::size_t>(i) * g.ci * g.h * g.w, g, col.data());
                CMapMat cm(col.data(), kdim, odim);
                MapMat gwm(grad_mut(w).v.data(), g.co, kdim);
                gwm.noalias() += gm * cm.transpose();
            }
            if (rq(b)) {
                Tensor& gb = grad_mut(b);
                for (int c = 0; c < g.co; ++c) gb.v[static_cast<std::size_t>(c)] += gm.row(c).sum();
            }
            if (rq(x)) {
                MapMat gcm(gcol.data(), kdim, odim);
                gcm.noalias() = wm.transpose() * gm;
                col2im_accum(gcol.data(), g,
                             grad_mut(x).v.data() + static_cast<std::size_t>(i) * g.ci * g.h * g.w);
            }
        }
    });
    return r;
}

Tape::Id Tape::avg_pool2(Id x) {
    const Tensor& tx = v(x);
    int n = tx.dims[0], c = tx.dims[1], h = tx.dims[2], w = tx.dims[3];
    if (h % 2 || w % 2) throw PreconditionError("avg_pool2: odd spatial size");
    Tensor out({n, c, h / 2, w / 2});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h / 2; ++y)
                for (int xw = 0; xw < w / 2; ++xw)
                    out.at4(i, ch, y, xw) =
                        0.25 * (tx.at4(i, ch, 2 * y, 2 * xw) + tx.at4(i, ch, 2 * y, 2 * xw + 1) +
                                tx.at4(i, ch, 2 * y + 1, 2 * xw) + tx.at4(i, ch, 2 * y + 1, 2 * xw + 1));
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, n, c, h, w] {
        const Tensor& g = grad(r);
        Tensor& gx = grad_mut(x);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h / 2; ++y)
                    for (int xw = 0; xw < w / 2; ++xw) {
                        double e = 0.25 * g.at4(i, ch, y, xw);
                        gx.at4(i, ch, 2 * y, 2 * xw) += e;
                        gx.at4(i, ch, 2 * y, 2 * xw + 1) += e;
                        gx.at4(i, ch, 2 * y + 1, 2 * xw) += e;
                        gx.at4(i, ch, 2 * y + 1, 2 * xw + 1) += e;
                    }
    });
    return r;
}

Tape::Id Tape::upsample2_nearest(Id x) {
    const Tensor& tx = v(x);
    int n = tx.dims[0], c = tx.dims[1], h = tx.dims[2], w = tx.dims[3];
    Tensor out({n, c, 2 * h, 2 * w});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xw = 0; xw < w; ++xw) {
                    double e = tx.at4(i, ch, y, xw);
                    out.at4(i, ch, 2 * y, 2 * xw) = e;
                    out.at4(i, ch, 2 * y, 2 * xw + 1) = e;
                    out.at4(i, ch, 2 * y + 1, 2 * xw) = e;
                    out.at4(i, ch, 2 * y + 1, 2 * xw + 1) = e;
                }
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, n, c, h, w] {
        const Tensor& g = grad(r);
        Tensor& gx = grad_mut(x);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xw = 0; xw < w; ++xw)
                        gx.at4(i, ch, y, xw) += g.at4(i, ch, 2 * y, 2 * xw) +
                                                g.at4(i, ch, 2 * y, 2 * xw + 1) +
                                                g.at4(i, ch, 2 * y + 1, 2 * xw) +
                                                g.at4(i, ch, 2 * y + 1, 2 * xw + 1);
    });
    return r;
}

Tape::Id Tape::instance_norm(Id x, Id gamma, Id beta, double eps) {
    const Tensor &tx = v(x), &tg = v(gamma), &tb = v(beta);
    int n = tx.dims[0], c = tx.dims[1], m = tx.dims[2] * tx.dims[3];
    if (tg.numel() != c || tb.numel() != c)
        throw PreconditionError("instance_norm: affine param size mismatch");
    Tensor out(tx.dims);
    // Per (sample, channel) moments; saved implicitly, recomputed in backward.
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const double* xs = tx.v.data() + (static_cast<std::size_t>(i) * c + ch) * m;
            double* os = out.v.data() + (static_cast<std::size_t>(i) * c + ch) * m;
            double mu = 0.0;
            for (int j = 0; j < m; ++j) mu += xs[j];
            mu /= m;
            double var = 0.0;
            for (int j = 0; j < m; ++j) var += (xs[j] - mu) * (xs[j] - mu);
            var /= m;
            double inv = 1.0 / std::sqrt(var + eps);
            double gch = tg.v[static_cast<std::size_t>(ch)], bch = tb.v[static_cast<std::size_t>(ch)];
            for (int j = 0; j < m; ++j) os[j] = (xs[j] - mu) * inv * gch + bch;
        }
    Id r = push(std::move(out), rq(x) || rq(gamma) || rq(beta));
    if (rq(r)) back_ops_.push_back([this, x, gamma, beta, r, n, c, m, eps] {
        const Tensor &g = grad(r), &tx2 = v(x), &tg2 = v(gamma);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const double* xs = tx2.v.data() + (static_cast<std::size_t>(i) * c + ch) * m;
                const double* gs = g.v.data() + (static_cast<std::size_t>(i) * c + ch) * m;
                double mu = 0.0;
                for (int j = 0; j < m; ++j) mu += xs[j];
                mu /= m;
                double var = 0.0;
                for (int j = 0; j < m; ++j) var += (xs[j] - mu) * (xs[j] - mu);
                var /= m;
                double inv = 1.0 / std::sqrt(var + eps);
                double gch = tg2.v[static_cast<std::size_t>(ch)];
                double gmean = 0.0, gxhat = 0.0;
                for (int j = 0; j < m; ++j) {
                    gmean += gs[j];
                    gxhat += gs[j] * (xs[j] - mu) * inv;
                }
                gmean /= m;
                gxhat /= m;
                if (rq(x)) {
                    double* gx = grad_mut(x).v.data() + (static_cast<std::size_t>(i) * c + ch) * m;
                    for (int j = 0; j < m; ++j) {
                        double xhat = (xs[j] - mu) * inv;
                        gx[j] += gch * inv * (gs[j] - gmean - xhat * gxhat);
                    }
                }
                if (rq(gamma)) {
                    double acc = 0.0;
                    for (int j = 0; j < m; ++j) acc += gs[j] * (xs[j] - mu) * inv;
                    grad_mut(gamma).v[static_cast<std::size_t>(ch)] += acc;
                }
                if (rq(beta)) {
                    double acc = 0.0;
                    for (int j = 0; j < m; ++j) acc += gs[j];
                    grad_mut(beta).v[static_cast<std::size_t>(ch)] += acc;
                }
            }
    });
    return r;
}

Tape::Id Tape::global_avg_pool(Id x) {
    const Tensor& tx = v(x);
    int n = tx.dims[0], c = tx.dims[1], m = tx.dims[2] * tx.dims[3];
    Tensor out({n, c});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const double* xs = tx.v.data() + (static_cast<std::size_t>(i) * c + ch) * m;
            double s = 0.0;
            for (int j = 0; j < m; ++j) s += xs[j];
            out.at2(i, ch) = s / m;
        }
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, n, c, m] {
        const Tensor& g = grad(r);
        Tensor& gx = grad_mut(x);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                double e = g.at2(i, ch) / m;
                double* gs = gx.v.data() + (static_cast<std::size_t>(i) * c + ch) * m;
                for (int j = 0; j < m; ++j) gs[j] += e;
            }
    });
    return r;
}

Tape::Id Tape::flatten(Id x) {
    const Tensor& tx = v(x);
    int n = tx.dims[0];
    Tensor out({n, static_cast<int>(tx.numel() / n)}, tx.v);
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r] {
        const Tensor& g = grad(r);
        Tensor& gx = grad_mut(x);
        for (std::size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i];
    });
    return r;
}

Tape::Id Tape::linear(Id x, Id w, Id b) {
    const Tensor &tx = v(x), &tw = v(w), &tb = v(b);
    if (tx.rank() != 2 || tw.rank() != 2 || tx.dims[1] != tw.dims[1])
        throw PreconditionError("linear: shape mismatch");
    int n = tx.dims[0], di = tx.dims[1], dout = tw.dims[0];
    if (tb.numel() != dout) throw PreconditionError("linear: bias size mismatch");
    Tensor out({n, dout});
    CMapMat xm(tx.v.data(), n, di), wm(tw.v.data(), dout, di);
    MapMat om(out.v.data(), n, dout);
    om.noalias() = xm * wm.transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dout; ++j) out.at2(i, j) += tb.v[static_cast<std::size_t>(j)];
    Id r = push(std::move(out), rq(x) || rq(w) || rq(b));
    if (rq(r)) back_ops_.push_back([this, x, w, b, r, n, di, dout] {
        const Tensor& g = grad(r);
        CMapMat gm(g.v.data(), n, dout);
        if (rq(x)) {
            CMapMat wm(v(w).v.data(), dout, di);
            MapMat gxm(grad_mut(x).v.data(), n, di);
            gxm.noalias() += gm * wm;
        }
        if (rq(w)) {
            CMapMat xm(v(x).v.data(), n, di);
            MapMat gwm(grad_mut(w).v.data(), dout, di);
            gwm.noalias() += gm.transpose() * xm;
        }
        if (rq(b)) {
            Tensor& gb = grad_mut(b);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dout; ++j) gb.v[static_cast<std::size_t>(j)] += g.at2(i, j);
        }
    });
    return r;
}

// ------------------------------------------------------------ embedding space

Tape::Id Tape::l2_normalize_rows(Id x, double eps) {
    const Tensor& tx = v(x);
    if (tx.rank() != 2) throw PreconditionError("l2_normalize_rows: rank-2 required");
    int n = tx.dims[0], d = tx.dims[1];
    Tensor out(tx.dims);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += tx.at2(i, j) * tx.at2(i, j);
        double inv = 1.0 / std::sqrt(s + eps);
        for (int j = 0; j < d; ++j) out.at2(i, j) = tx.at2(i, j) * inv;
    }
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, n, d, eps] {
        const Tensor &g = grad(r), &tx2 = v(x);
        Tensor& gx = grad_mut(x);
        for (int i = 0; i < n; ++i) {
            double s = 0.0, dot = 0.0;
            for (int j = 0; j < d; ++j) s += tx2.at2(i, j) * tx2.at2(i, j);
            double inv = 1.0 / std::sqrt(s + eps);
            for (int j = 0; j < d; ++j) dot += g.at2(i, j) * tx2.at2(i, j);
            // d/dx (x/||x||) applied to g: g/||x|| - x (x.g)/||x||^3
            for (int j = 0; j < d; ++j)
                gx.at2(i, j) += g.at2(i, j) * inv - tx2.at2(i, j) * dot * inv * inv * inv;
        }
    });
    return r;
}

Tape::Id Tape::rows_dot(Id a, Id b) {
    const Tensor &ta = v(a), &tb = v(b);
    if (!ta.same_shape(tb) || ta.rank() != 2) throw PreconditionError("rows_dot: shape mismatch");
    int n = ta.dims[0], d = ta.dims[1];
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += ta.at2(i, j) * tb.at2(i, j);
        out.v[static_cast<std::size_t>(i)] = s;
    }
    Id r = push(std::move(out), rq(a) || rq(b));
    if (rq(r)) back_ops_.push_back([this, a, b, r, n, d] {
        const Tensor& g = grad(r);
        if (rq(a)) {
            Tensor& ga = grad_mut(a);
            const Tensor& tb2 = v(b);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    ga.at2(i, j) += g.v[static_cast<std::size_t>(i)] * tb2.at2(i, j);
        }
        if (rq(b)) {
            Tensor& gb = grad_mut(b);
            const Tensor& ta2 = v(a);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    gb.at2(i, j) += g.v[static_cast<std::size_t>(i)] * ta2.at2(i, j);
        }
    });
    return r;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    const Tensor &ta = v(a), &tb = v(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dims[1] != tb.dims[1])
        throw PreconditionError("matmul_nt: shape mismatch");
    int n = ta.dims[0], d = ta.dims[1], cdim = tb.dims[0];
    Tensor out({n, cdim});
    CMapMat am(ta.v.data(), n, d), bm(tb.v.data(), cdim, d);
    MapMat om(out.v.data(), n, cdim);
    om.noalias() = am * bm.transpose();
    Id r = push(std::move(out), rq(a) || rq(b));
    if (rq(r)) back_ops_.push_back([this, a, b, r, n, d, cdim] {
        const Tensor& g = grad(r);
        CMapMat gm(g.v.data(), n, cdim);
        if (rq(a)) {
            CMapMat bm(v(b).v.data(), cdim, d);
            MapMat gam(grad_mut(a).v.data(), n, d);
            gam.noalias() += gm * bm;
        }
        if (rq(b)) {
            CMapMat am(v(a).v.data(), n, d);
            MapMat gbm(grad_mut(b).v.data(), cdim, d);
            gbm.noalias() += gm.transpose() * am;
        }
    });
    return r;
}

Tape::Id Tape::l2_norm_rows(Id x, double eps) {
    const Tensor& tx = v(x);
    int n = tx.dims[0];
    std::int64_t inner = tx.numel() / n;
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        const double* xs = tx.v.data() + static_cast<std::size_t>(i) * inner;
        for (std::int64_t j = 0; j < inner; ++j) s += xs[j] * xs[j];
        out.v[static_cast<std::size_t>(i)] = std::sqrt(s + eps);
    }
    Id r = push(std::move(out), rq(x));
    if (rq(r)) back_ops_.push_back([this, x, r, n, inner] {
        const Tensor &g = grad(r), &tx2 = v(x), &y = val(r);
        Tensor& gx = grad_mut(x);
        for (int i = 0; i < n; ++i) {
            double coef = g.v[static_cast<std::size_t>(i)] / y.v[static_cast<std::size_t>(i)];
            const double* xs = tx2.v.data() + static_cast<std::size_t>(i) * inner;
            double* gs = gx.v.data() + static_cast<std::size_t>(i) * inner;
            for (std::int64_t j = 0; j < inner; ++j) gs[j] += coef * xs[j];
        }
    });
    return r;
}

// ------------------------------------------------------- classification heads

Tape::Id Tape::softmax_xent(Id logits, const std::vector<int>& labels) {
    const Tensor& tl = v(logits);
    int n = tl.dims[0], c = tl.dims[1];
    if (static_cast<int>(labels.size()) != n)
        throw PreconditionError("softmax_xent: label count mismatch");
    double loss = 0.0;
    Tensor probs(tl.dims);
    for (int i = 0; i < n; ++i) {
        double mx = tl.at2(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, tl.at2(i, j));
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(tl.at2(i, j) - mx);
        double logz = std::log(z) + mx;
        for (int j = 0; j < c; ++j) probs.at2(i, j) = std::exp(tl.at2(i, j) - logz);
        loss -= tl.at2(i, labels[static_cast<std::size_t>(i)]) - logz;
    }
    loss /= n;
    Id r = push(Tensor::scalar(loss), rq(logits));
    if (rq(r)) back_ops_.push_back([this, logits, r, labels, probs, n, c] {
        double g = grad(r).v[0] / n;
        Tensor& gl = grad_mut(logits);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j)
                gl.at2(i, j) +=
                    g * (probs.at2(i, j) - (j == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
    });
    return r;
}

Tape::Id Tape::cos_margin_sub(Id cos, const std::vector<int>& labels, double margin) {
    const Tensor& tc = v(cos);
    int n = tc.dims[0];
    Tensor out = tc;
    for (int i = 0; i < n; ++i) out.at2(i, labels[static_cast<std::size_t>(i)]) -= margin;
    Id r = push(std::move(out), rq(cos));
    if (rq(r)) back_ops_.push_back([this, cos, r] {
        const Tensor& g = grad(r);
        Tensor& gc = grad_mut(cos);
        for (std::size_t i = 0; i < g.v.size(); ++i) gc.v[i] += g.v[i];
    });
    return r;
}

Tape::Id Tape::arc_margin(Id cos, const std::vector<int>& labels, double margin) {
    const Tensor& tc = v(cos);
    int n = tc.dims[0];
    const double lim = 1.0 - 1e-7;
    Tensor out = tc;
    for (int i = 0; i < n; ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        double t = std::clamp(tc.at2(i, y), -lim, lim);
        out.at2(i, y) = std::cos(std::acos(t) + margin);
    }
    Id r = push(std::move(out), rq(cos));
    if (rq(r)) back_ops_.push_back([this, cos, r, labels, margin, n, lim] {
        const Tensor &g = grad(r), &tc2 = v(cos);
        Tensor& gc = grad_mut(cos);
        for (std::size_t i = 0; i < g.v.size(); ++i) gc.v[i] += g.v[i];
        // Correct the label column: d cos(theta+m)/d cos(theta) = sin(theta+m)/sin(theta).
        for (int i = 0; i < n; ++i) {
            int y = labels[static_cast<std::size_t>(i)];
            double raw = tc2.at2(i, y);
            double t = std::clamp(raw, -lim, lim);
            double theta = std::acos(t);
            double deriv =
                (std::abs(raw) < lim) ? std::sin(theta + margin) / std::sin(theta) : 0.0;
            gc.at2(i, y) += g.at2(i, y) * (deriv - 1.0);
        }
    });
    return r;
}

double finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x, int idx,
                   double step) {
    Tensor hi = x, lo = x;
    hi.v[static_cast<std::size_t>(idx)] += step;
    lo.v[static_cast<std::size_t>(idx)] -= step;
    return (f(hi) - f(lo)) / (2.0 * step);
}

}  // namespace advcloak
