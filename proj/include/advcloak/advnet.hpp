#pragma once

#include <string>
#include <vector>

#include "advcloak/dataio.hpp"
#include "advcloak/nets.hpp"

namespace advcloak {

enum class StageTag { I, II };

std::string stage_name(StageTag s);
StageTag stage_from_name(const std::string& s);

// Additive perturbation with the same shape as a FaceImage.
struct PerturbationMap {
    ImageShape shape;
    std::vector<double> v;  // HWC, same layout as FaceImage pixels

    // L2 norm on the 0-255 pixel scale, where paper constants live.
    double norm_l2_255() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return 255.0 * std::sqrt(s);
    }
    double linf_01() const {
        double m = 0.0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    }
};

// One additive mask per identity, with provenance.
struct PersonMask {
    PerturbationMap delta;
    std::string identity;
    int n_images = 0;
    std::uint64_t generator_hash = 0;
    std::string method;  // e.g. "advcloak", "advfaces+", "fi-uap"

    void save(const std::string& path) const;
    static PersonMask load(const std::string& path);
};

struct GeneratorConfig {
    int base_channels = 12;
    double out_scale = 0.12;  // tanh amplitude in [0,1] pixel units
    double epsilon = 3.0;     // norm-hinge threshold, 0-255 scale
    std::uint64_t seed = 0;
};

class GeneratorModel {
public:
    GeneratorModel(const GeneratorConfig& cfg, ImageShape shape, StageTag stage = StageTag::I);

    Tape::Id forward(Tape& t, Tape::Id images, ParamMap& pm) const;  // -> perturbations
    PerturbationMap generate(const FaceImage& image) const;
    Tensor generate_batch_nchw(const std::vector<const FaceImage*>& images) const;

    StageTag stage() const { return stage_; }
    void set_stage(StageTag s) { stage_ = s; }
    double epsilon() const { return cfg_.epsilon; }
    ImageShape input_shape() const { return shape_; }
    const GeneratorConfig& config() const { return cfg_; }

    std::uint64_t param_hash() const;
    NamedTensorRefs named_params() { return net_.named_params(); }
    NamedTensorViews named_views() const { return net_.named_views(); }

    void save(const std::string& path, const std::string& training_config_hash = "") const;
    static GeneratorModel load(const std::string& path);

private:
    GeneratorConfig cfg_;
    ImageShape shape_;
    StageTag stage_;
    GeneratorNet net_;
};

class DiscriminatorModel {
public:
    DiscriminatorModel(ImageShape shape, std::uint64_t seed, StageTag stage = StageTag::I);

    Tape::Id logits(Tape& t, Tape::Id images, ParamMap& pm) const;  // [N,1]
    Tape::Id prob(Tape& t, Tape::Id images, ParamMap& pm) const;    // sigmoid, (0,1)
    double discriminate(const FaceImage& image) const;

    StageTag stage() const { return stage_; }
    void set_stage(StageTag s) { stage_ = s; }
    ImageShape input_shape() const { return shape_; }

    std::uint64_t param_hash() const;
    NamedTensorRefs named_params() { return net_.named_params(); }
    NamedTensorViews named_views() const { return net_.named_views(); }

    void save(const std::string& path, const std::string& training_config_hash = "") const;
    static DiscriminatorModel load(const std::string& path);

private:
    ImageShape shape_;
    StageTag stage_;
    std::uint64_t seed_;
    DiscriminatorNet net_;
};

// X + delta, clipped to [0,1] pixelwise.
FaceImage apply_perturbation(const FaceImage& image, const PerturbationMap& pert);

PerturbationMap nchw_slice_to_perturbation(const Tensor& t, int n);

}  // namespace advcloak
