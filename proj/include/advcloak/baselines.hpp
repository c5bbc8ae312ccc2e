#pragma once

#include "advcloak/losses.hpp"
#include "advcloak/trainer.hpp"

namespace advcloak {

struct FIUAPConfig {
    double epsilon_inf = 8.0;  // L-inf bound, 0-255 scale
    int iterations = 16;
    double step_alpha = 1.0 / 255.0;  // in [0,1] pixel units
    AdvObjectiveKind hull_kind = AdvObjectiveKind::plain;  // plain = FI-UAP, else OPOM-<hull>
    HullTargetMode hull_target = HullTargetMode::renormalized_cosine;
};

// Iterative sign-gradient person-specific mask:
//   g_t  = (1/n) sum_i grad_x l_d(f(X_i + D_t), target_i)
//   D_{t+1} = Clip_eps(D_t + alpha * sign(g_t))
// target_i is f(X_i) for plain, or the identity's hull projection point for
// the OPOM variants. Gradients are taken on unclipped adversarial images; the
// clip applies to the mask only.
PersonMask fi_uap(const std::vector<FaceImage>& images, const EmbedderModel& embedder,
                  const FIUAPConfig& cfg, const std::string& identity = "");

// Stage-I generator aggregation (same arithmetic as aggregate_mask), tagged
// as the AdvFaces+ baseline. Requires a stage-I generator.
PersonMask advfaces_plus(const GeneratorModel& gen_stage1, const std::vector<FaceImage>& images,
                         const std::string& identity = "");

// Seeded Gaussian noise mask, the norm-matched control.
PersonMask random_noise_mask(ImageShape shape, std::uint64_t seed,
                             const std::string& identity = "");

}  // namespace advcloak
