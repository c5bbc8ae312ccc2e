#pragma once

#include <functional>
#include <map>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "advcloak/advnet.hpp"
#include "advcloak/embedder.hpp"

namespace advcloak {

// Rescales the mask to the target L2 norm (0-255 scale), direction unchanged.
// Throws on a zero input mask.
PersonMask normalize_mask(const PersonMask& mask, double target_l2_255);

// Area-normalized equivalent of the paper-scale norm budget: the budget
// scales with sqrt(pixel count) so perceptual strength carries over between
// image sizes.
double scaled_norm_target(double paper_norm, ImageShape paper_shape, ImageShape desk_shape);

struct Gallery {
    std::vector<std::string> ids;  // one per entry
    Tensor embeddings;             // [N, d], unit rows
    int distractor_count = 0;
};

Gallery build_gallery(const IdentityCorpus& distractors, const EmbedderModel& target);

struct ModelProtection {
    std::string model;
    double top1_psr = 0.0;  // percent
    double top5_psr = 0.0;
    long pair_count = 0;
};

struct Timings {
    double t1_mask_s = 0.0;       // per-identity mask customization
    double t2_per_image_s = 0.0;  // per-image cost once the mask exists
};

struct ProtectionReport {
    int schema_version = 1;
    std::string config_hash;
    std::string method;
    double mask_norm_l2_255 = 0.0;
    double mean_ssim = 1.0;
    Timings timings;
    std::vector<ModelProtection> per_model;

    nlohmann::json to_json() const;
    std::string to_string() const;  // canonical serialization, byte-stable
};

using MaskProvider = std::map<std::string, PersonMask>;  // identity -> mask

// Open-set 1:N identification: per identity, each clean test image takes a
// turn enrolled in the gallery (alongside the distractors) while the other
// masked images probe, giving m*(m-1) ordered pairs. A probe is identified at
// Top-k when the enrolled entry ranks within the k nearest; distractor ties
// count against the probe. PSR_k = 100 - 100 * identified_k / pairs.
// `masks == nullptr` probes with clean images.
ModelProtection run_identification(const std::map<std::string, std::vector<FaceImage>>& test_by_identity,
                                   const Gallery& gallery, const EmbedderModel& target,
                                   const MaskProvider* masks, const std::string& model_name = "");

// Mean SSIM between clean test images and their masked versions.
double mean_protected_ssim(const std::map<std::string, std::vector<FaceImage>>& test_by_identity,
                           const MaskProvider& masks);

struct TradeoffPoint {
    double norm = 0.0;
    double mean_ssim = 1.0;
    double avg_psr = 0.0;  // Top-1, averaged over target models
};

std::vector<TradeoffPoint> tradeoff_sweep(
    const MaskProvider& masks, const std::vector<double>& norms,
    const std::map<std::string, std::vector<FaceImage>>& test_by_identity,
    const std::vector<const EmbedderModel*>& targets, const std::vector<Gallery>& galleries);

// Standard SSIM, uniform 8x8 windows (clamped to the image), per-channel
// averaged, k1=0.01, k2=0.03, unit dynamic range.
double compute_ssim(const FaceImage& a, const FaceImage& b);

// Wall-clock mask customization time; t2 is zero by construction for
// person-specific methods.
Timings timing_probe(const std::function<PersonMask()>& customize);

}  // namespace advcloak
