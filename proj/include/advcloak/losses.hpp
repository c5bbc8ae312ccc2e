#pragma once

#include <vector>

#include "advcloak/advnet.hpp"
#include "advcloak/embedder.hpp"
#include "advcloak/subspace.hpp"

namespace advcloak {

struct LossWeights {
    double lambda_norm = 1.0;
    double lambda_adv = 10.0;
    double epsilon = 3.0;  // norm-hinge threshold, 0-255 scale
};

enum class AdvObjectiveKind { plain, affine, center, convex };

std::string adv_kind_name(AdvObjectiveKind k);
AdvObjectiveKind adv_kind_from_name(const std::string& s);

// The hull projection point is generally not unit-norm; before the cosine
// distance we renormalize it. The raw Euclidean point-to-hull distance is
// available behind this switch.
enum class HullTargetMode { renormalized_cosine, euclidean_distance };

struct GanTerms {
    Tape::Id gen_term;   // non-saturating generator objective, minimized by G
    Tape::Id disc_term;  // E[log D(real)] + E[log(1 - D(fake))], ascended by D
};

// Arithmetic cores over given discriminator probabilities; the plug-in tests
// drive these directly with constant tensors.
GanTerms gan_terms_from_probs(Tape& t, Tape::Id p_real, Tape::Id p_fake);
GanTerms gan_terms_from_prob_groups(Tape& t,
                                    const std::vector<std::pair<Tape::Id, Tape::Id>>& groups);

// Image-wise GAN loss: applies D to both batches. Throws NumericError if a
// term is non-finite.
GanTerms gan_loss_image(Tape& t, const DiscriminatorModel& disc, ParamMap& dpm, Tape::Id real,
                        Tape::Id fake);

struct IdentityGanBatch {
    Tape::Id real;  // n images of one identity
    Tape::Id fake;  // the same images with the shared mask applied
};
GanTerms gan_loss_class(Tape& t, const DiscriminatorModel& disc, ParamMap& dpm,
                        const std::vector<IdentityGanBatch>& identities);

// Mean over the batch of max(epsilon, ||p||_2), norms on the 0-255 scale.
Tape::Id norm_loss(Tape& t, Tape::Id perturbations, double epsilon);

// E[l_d(f(X + G(X)), f(X))]; gradient flows through the adversarial branch
// only. `originals` are embedded frozen.
Tape::Id adv_loss_image(Tape& t, const EmbedderModel& model, const Tensor& originals_nchw,
                        Tape::Id adversarials);

struct IdentityAdvBatch {
    Tensor originals_nchw;   // n images of one identity (constants)
    Tape::Id adversarials;   // the same images with the shared mask, on tape
    const FeatureHull* hull = nullptr;  // required for hull kinds
};

// Plain: targets are the identity's original embeddings. Hull kinds: targets
// are the per-query hull projection points, re-solved each call and treated
// as constants (no differentiation through the projection).
Tape::Id adv_loss_class(Tape& t, const EmbedderModel& model,
                        const std::vector<IdentityAdvBatch>& identities, AdvObjectiveKind kind,
                        HullTargetMode mode = HullTargetMode::renormalized_cosine);

// L = L_GAN + lambda_norm * L_norm + lambda_adv * L_adv.
Tape::Id assemble_total(Tape& t, Tape::Id gan, Tape::Id norm, Tape::Id adv,
                        const LossWeights& w);

}  // namespace advcloak
