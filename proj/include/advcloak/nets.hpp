#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "advcloak/dataio.hpp"
#include "advcloak/serialize.hpp"
#include "advcloak/tape.hpp"

namespace advcloak {

// Binds persistent parameter tensors onto a tape, memoized so each tensor
// appears once. Trainable bindings become leaves (receive gradients); frozen
// bindings become constants.
class ParamMap {
public:
    ParamMap(Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

    Tape::Id operator()(const Tensor& p) {
        auto it = ids_.find(&p);
        if (it != ids_.end()) return it->second;
        Tape::Id id = trainable_ ? tape_->leaf(p) : tape_->constant(p);
        ids_.emplace(&p, id);
        return id;
    }
    Tape::Id id_of(const Tensor& p) const { return ids_.at(&p); }
    bool contains(const Tensor& p) const { return ids_.count(&p) > 0; }
    bool trainable() const { return trainable_; }

private:
    Tape* tape_;
    bool trainable_;
    std::unordered_map<const Tensor*, Tape::Id> ids_;
};

struct Conv {
    Tensor w, b;
    int stride = 1, pad = 1;

    static Conv make(int cout, int cin, int k, int stride, int pad, Rng& rng);
    Tape::Id apply(Tape& t, Tape::Id x, ParamMap& pm) const {
        return t.conv2d(x, pm(w), pm(b), stride, pad);
    }
    void collect(const std::string& prefix, NamedTensorRefs& out);
};

struct Norm {  // instance norm affine parameters
    Tensor gamma, beta;
    static Norm make(int channels);
    Tape::Id apply(Tape& t, Tape::Id x, ParamMap& pm) const {
        return t.instance_norm(x, pm(gamma), pm(beta));
    }
    void collect(const std::string& prefix, NamedTensorRefs& out);
};

struct Dense {
    Tensor w, b;
    static Dense make(int dout, int din, Rng& rng);
    Tape::Id apply(Tape& t, Tape::Id x, ParamMap& pm) const {
        return t.linear(x, pm(w), pm(b));
    }
    void collect(const std::string& prefix, NamedTensorRefs& out);
};

class Adam {
public:
    Adam(std::vector<Tensor*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    // Applies one update from the gradients recorded on `t` (params must have
    // been bound through `pm` as trainable leaves).
    void step(const Tape& t, const ParamMap& pm);
    double learning_rate() const { return lr_; }

private:
    std::vector<Tensor*> params_;
    std::vector<Tensor> m_, v_;
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
};

// Encoder-decoder perturbation generator: 3 downsampling blocks, 2 residual
// blocks, 3 upsampling blocks, tanh output scaled to [-out_scale, out_scale].
struct GeneratorNet {
    Conv d1, d2, d3;
    Norm n1, n2, n3;
    Conv r1a, r1b, r2a, r2b;
    Norm nr1a, nr1b, nr2a, nr2b;
    Conv u1, u2, u3;
    Norm m1, m2, m3;
    Conv head;
    double out_scale = 0.12;

    static GeneratorNet make(int in_channels, int base_channels, double out_scale, Rng& rng);
    Tape::Id forward(Tape& t, Tape::Id x01, ParamMap& pm) const;  // -> perturbation
    NamedTensorRefs named_params();
    NamedTensorViews named_views() const;
};

// Patch-style discriminator: 3 strided conv blocks, 1-channel patch logit map,
// averaged to a single logit per image.
struct DiscriminatorNet {
    Conv c1, c2, c3, patch;

    static DiscriminatorNet make(int in_channels, Rng& rng);
    Tape::Id logits(Tape& t, Tape::Id x01, ParamMap& pm) const;  // [N,1]
    NamedTensorRefs named_params();
    NamedTensorViews named_views() const;
};

enum class Arch { small_cnn_a, small_cnn_b, small_cnn_c };

// Three structurally different backbones (depth/width/pooling) mapping images
// to pre-normalization d-dimensional features.
struct EmbedderNet {
    Arch arch = Arch::small_cnn_a;
    int d = 64;
    std::vector<Conv> convs;
    Dense fc;

    static EmbedderNet make(Arch arch, int d, ImageShape input, Rng& rng);
    Tape::Id features(Tape& t, Tape::Id x01, ParamMap& pm) const;  // [N,d] pre-norm
    NamedTensorRefs named_params();
    NamedTensorViews named_views() const;
};

enum class HeadKind { softmax, cosface_margin, arcface_margin };

struct ClassifierHead {
    HeadKind kind = HeadKind::softmax;
    double margin = 0.35, scale = 16.0;
    Dense fc;  // margin heads use fc.w rows as class directions, bias unused

    static ClassifierHead make(HeadKind kind, int classes, int d, double margin, double scale,
                               Rng& rng);
    Tape::Id logits(Tape& t, Tape::Id feat_prenorm, const std::vector<int>& labels,
                    ParamMap& pm) const;
    NamedTensorRefs named_params();
};

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& s);
std::string head_name(HeadKind h);
HeadKind head_from_name(const std::string& s);

}  // namespace advcloak
