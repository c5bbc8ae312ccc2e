#include "advcloak/nets.hpp"

#include <cmath>

#include "advcloak/errors.hpp"

namespace advcloak {

Conv Conv::make(int cout, int cin, int k, int stride, int pad, Rng& rng) {
    Conv c;
    c.stride = stride;
    c.pad = pad;
    double std = std::sqrt(2.0 / (cin * k * k));
    c.w = Tensor::randn({cout, cin, k, k}, rng, std);
    c.b = Tensor({cout});
    return c;
}

void Conv::collect(const std::string& prefix, NamedTensorRefs& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
}

Norm Norm::make(int channels) {
    Norm n;
    n.gamma = Tensor({channels});
    n.gamma.fill(1.0);
    n.beta = Tensor({channels});
    return n;
}

void Norm::collect(const std::string& prefix, NamedTensorRefs& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
}

Dense Dense::make(int dout, int din, Rng& rng) {
    Dense d;
    d.w = Tensor::randn({dout, din}, rng, std::sqrt(1.0 / din));
    d.b = Tensor({dout});
    return d;
}

void Dense::collect(const std::string& prefix, NamedTensorRefs& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
}

Adam::Adam(std::vector<Tensor*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor* p : params_) {
        m_.emplace_back(p->dims);
        v_.emplace_back(p->dims);
    }
}

void Adam::step(const Tape& t, const ParamMap& pm) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = *params_[k];
        if (!pm.contains(p)) continue;  // not part of this step's graph
        const Tensor& g = t.grad(pm.id_of(p));
        if (g.v.empty()) continue;  // no gradient path this step
        for (std::size_t i = 0; i < p.v.size(); ++i) {
            double gi = g.v[i];
            m_[k].v[i] = b1_ * m_[k].v[i] + (1.0 - b1_) * gi;
            v_[k].v[i] = b2_ * v_[k].v[i] + (1.0 - b2_) * gi * gi;
            double mhat = m_[k].v[i] / bc1;
            double vhat = v_[k].v[i] / bc2;
            p.v[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

// ----------------------------------------------------------------- generator

GeneratorNet GeneratorNet::make(int in_channels, int base, double out_scale, Rng& rng) {
    GeneratorNet g;
    int c1 = base, c2 = 2 * base, c3 = 4 * base;
    g.d1 = Conv::make(c1, in_channels, 3, 2, 1, rng);
    g.n1 = Norm::make(c1);
    g.d2 = Conv::make(c2, c1, 3, 2, 1, rng);
    g.n2 = Norm::make(c2);
    g.d3 = Conv::make(c3, c2, 3, 2, 1, rng);
    g.n3 = Norm::make(c3);
    g.r1a = Conv::make(c3, c3, 3, 1, 1, rng);
    g.nr1a = Norm::make(c3);
    g.r1b = Conv::make(c3, c3, 3, 1, 1, rng);
    g.nr1b = Norm::make(c3);
    g.r2a = Conv::make(c3, c3, 3, 1, 1, rng);
    g.nr2a = Norm::make(c3);
    g.r2b = Conv::make(c3, c3, 3, 1, 1, rng);
    g.nr2b = Norm::make(c3);
    g.u1 = Conv::make(c2, c3, 3, 1, 1, rng);
    g.m1 = Norm::make(c2);
    g.u2 = Conv::make(c1, c2, 3, 1, 1, rng);
    g.m2 = Norm::make(c1);
    g.u3 = Conv::make(c1, c1, 3, 1, 1, rng);
    g.m3 = Norm::make(c1);
    g.head = Conv::make(in_channels, c1, 3, 1, 1, rng);
    // Small head init: perturbations start near zero and grow under the
    // adversarial term instead of starting at the tanh rails.
    for (auto& wv : g.head.w.v) wv *= 0.05;
    g.out_scale = out_scale;
    return g;
}

Tape::Id GeneratorNet::forward(Tape& t, Tape::Id x01, ParamMap& pm) const {
    Tape::Id z = t.affine(x01, 2.0, -1.0);
    z = t.relu(n1.apply(t, d1.apply(t, z, pm), pm));
    z = t.relu(n2.apply(t, d2.apply(t, z, pm), pm));
    z = t.relu(n3.apply(t, d3.apply(t, z, pm), pm));
    {
        Tape::Id h = t.relu(nr1a.apply(t, r1a.apply(t, z, pm), pm));
        h = nr1b.apply(t, r1b.apply(t, h, pm), pm);
        z = t.add(z, h);
    }
    {
        Tape::Id h = t.relu(nr2a.apply(t, r2a.apply(t, z, pm), pm));
        h = nr2b.apply(t, r2b.apply(t, h, pm), pm);
        z = t.add(z, h);
    }
    z = t.relu(m1.apply(t, u1.apply(t, t.upsample2_nearest(z), pm), pm));
    z = t.relu(m2.apply(t, u2.apply(t, t.upsample2_nearest(z), pm), pm));
    z = t.relu(m3.apply(t, u3.apply(t, t.upsample2_nearest(z), pm), pm));
    return t.affine(t.tanh_op(head.apply(t, z, pm)), out_scale, 0.0);
}

NamedTensorRefs GeneratorNet::named_params() {
    NamedTensorRefs out;
    d1.collect("g.d1", out);
    n1.collect("g.n1", out);
    d2.collect("g.d2", out);
    n2.collect("g.n2", out);
    d3.collect("g.d3", out);
    n3.collect("g.n3", out);
    r1a.collect("g.r1a", out);
    nr1a.collect("g.nr1a", out);
    r1b.collect("g.r1b", out);
    nr1b.collect("g.nr1b", out);
    r2a.collect("g.r2a", out);
    nr2a.collect("g.nr2a", out);
    r2b.collect("g.r2b", out);
    nr2b.collect("g.nr2b", out);
    u1.collect("g.u1", out);
    m1.collect("g.m1", out);
    u2.collect("g.u2", out);
    m2.collect("g.m2", out);
    u3.collect("g.u3", out);
    m3.collect("g.m3", out);
    head.collect("g.head", out);
    return out;
}

NamedTensorViews GeneratorNet::named_views() const {
    auto refs = const_cast<GeneratorNet*>(this)->named_params();
    NamedTensorViews views;
    views.reserve(refs.size());
    for (auto& [n, p] : refs) views.emplace_back(n, p);
    return views;
}

// ------------------------------------------------------------- discriminator

DiscriminatorNet DiscriminatorNet::make(int in_channels, Rng& rng) {
    DiscriminatorNet d;
    d.c1 = Conv::make(16, in_channels, 3, 2, 1, rng);
    d.c2 = Conv::make(32, 16, 3, 2, 1, rng);
    d.c3 = Conv::make(64, 32, 3, 2, 1, rng);
    d.patch = Conv::make(1, 64, 3, 1, 1, rng);
    return d;
}

Tape::Id DiscriminatorNet::logits(Tape& t, Tape::Id x01, ParamMap& pm) const {
    Tape::Id z = t.affine(x01, 2.0, -1.0);
    z = t.leaky_relu(c1.apply(t, z, pm), 0.2);
    z = t.leaky_relu(c2.apply(t, z, pm), 0.2);
    z = t.leaky_relu(c3.apply(t, z, pm), 0.2);
    Tape::Id patches = patch.apply(t, z, pm);  // [N,1,h,w] patch logits
    return t.global_avg_pool(patches);         // [N,1]
}

NamedTensorRefs DiscriminatorNet::named_params() {
    NamedTensorRefs out;
    c1.collect("d.c1", out);
    c2.collect("d.c2", out);
    c3.collect("d.c3", out);
    patch.collect("d.patch", out);
    return out;
}

NamedTensorViews DiscriminatorNet::named_views() const {
    auto refs = const_cast<DiscriminatorNet*>(this)->named_params();
    NamedTensorViews views;
    views.reserve(refs.size());
    for (auto& [n, p] : refs) views.emplace_back(n, p);
    return views;
}

// ------------------------------------------------------------------ embedder

EmbedderNet EmbedderNet::make(Arch arch, int d, ImageShape input, Rng& rng) {
    EmbedderNet e;
    e.arch = arch;
    e.d = d;
    switch (arch) {
        case Arch::small_cnn_a:
            e.convs.push_back(Conv::make(16, input.c, 3, 1, 1, rng));
            e.convs.push_back(Conv::make(32, 16, 3, 1, 1, rng));
            e.convs.push_back(Conv::make(64, 32, 3, 1, 1, rng));
            e.fc = Dense::make(d, 64, rng);
            break;
        case Arch::small_cnn_b: {
            e.convs.push_back(Conv::make(12, input.c, 5, 2, 2, rng));
            e.convs.push_back(Conv::make(24, 12, 3, 2, 1, rng));
            e.convs.push_back(Conv::make(48, 24, 3, 2, 1, rng));
            int flat = 48 * (input.h / 8) * (input.w / 8);
            e.fc = Dense::make(d, flat, rng);
            break;
        }
        case Arch::small_cnn_c:
            e.convs.push_back(Conv::make(12, input.c, 3, 1, 1, rng));
            e.convs.push_back(Conv::make(12, 12, 3, 1, 1, rng));
            e.convs.push_back(Conv::make(24, 12, 3, 1, 1, rng));
            e.convs.push_back(Conv::make(24, 24, 3, 1, 1, rng));
            e.convs.push_back(Conv::make(48, 24, 3, 1, 1, rng));
            e.convs.push_back(Conv::make(48, 48, 3, 1, 1, rng));
            e.fc = Dense::make(d, 48, rng);
            break;
    }
    return e;
}

Tape::Id EmbedderNet::features(Tape& t, Tape::Id x01, ParamMap& pm) const {
    Tape::Id z = t.affine(x01, 2.0, -1.0);
    switch (arch) {
        case Arch::small_cnn_a:
            for (const Conv& c : convs) z = t.avg_pool2(t.relu(c.apply(t, z, pm)));
            z = t.global_avg_pool(z);
            break;
        case Arch::small_cnn_b:
            for (const Conv& c : convs) z = t.relu(c.apply(t, z, pm));
            z = t.flatten(z);
            break;
        case Arch::small_cnn_c:
            // double-conv blocks with pooling between them
            for (std::size_t i = 0; i < convs.size(); ++i) {
                z = t.relu(convs[i].apply(t, z, pm));
                if (i % 2 == 1) z = t.avg_pool2(z);
            }
            z = t.global_avg_pool(z);
            break;
    }
    return fc.apply(t, z, pm);
}

NamedTensorRefs EmbedderNet::named_params() {
    NamedTensorRefs out;
    for (std::size_t i = 0; i < convs.size(); ++i)
        convs[i].collect("e.conv" + std::to_string(i), out);
    fc.collect("e.fc", out);
    return out;
}

NamedTensorViews EmbedderNet::named_views() const {
    auto refs = const_cast<EmbedderNet*>(this)->named_params();
    NamedTensorViews views;
    views.reserve(refs.size());
    for (auto& [n, p] : refs) views.emplace_back(n, p);
    return views;
}

ClassifierHead ClassifierHead::make(HeadKind kind, int classes, int d, double margin, double scale,
                                    Rng& rng) {
    ClassifierHead h;
    h.kind = kind;
    h.margin = margin;
    h.scale = scale;
    h.fc = Dense::make(classes, d, rng);
    return h;
}

Tape::Id ClassifierHead::logits(Tape& t, Tape::Id feat, const std::vector<int>& labels,
                                ParamMap& pm) const {
    if (kind == HeadKind::softmax) return fc.apply(t, feat, pm);
    Tape::Id e = t.l2_normalize_rows(feat);
    Tape::Id wn = t.l2_normalize_rows(pm(fc.w));
    Tape::Id cos = t.matmul_nt(e, wn);
    Tape::Id adj = kind == HeadKind::cosface_margin ? t.cos_margin_sub(cos, labels, margin)
                                                    : t.arc_margin(cos, labels, margin);
    return t.affine(adj, scale, 0.0);
}

NamedTensorRefs ClassifierHead::named_params() {
    NamedTensorRefs out;
    fc.collect("head.fc", out);
    return out;
}

std::string arch_name(Arch a) {
    switch (a) {
        case Arch::small_cnn_a: return "small_cnn_a";
        case Arch::small_cnn_b: return "small_cnn_b";
        case Arch::small_cnn_c: return "small_cnn_c";
    }
    return "small_cnn_a";
}

Arch arch_from_name(const std::string& s) {
    if (s == "small_cnn_a") return Arch::small_cnn_a;
    if (s == "small_cnn_b") return Arch::small_cnn_b;
    if (s == "small_cnn_c") return Arch::small_cnn_c;
    throw PreconditionError("unknown arch: " + s);
}

std::string head_name(HeadKind h) {
    switch (h) {
        case HeadKind::softmax: return "softmax";
        case HeadKind::cosface_margin: return "cosface_margin";
        case HeadKind::arcface_margin: return "arcface_margin";
    }
    return "softmax";
}

HeadKind head_from_name(const std::string& s) {
    if (s == "softmax") return HeadKind::softmax;
    if (s == "cosface_margin") return HeadKind::cosface_margin;
    if (s == "arcface_margin") return HeadKind::arcface_margin;
    throw PreconditionError("unknown head: " + s);
}

}  // namespace advcloak
