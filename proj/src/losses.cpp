#include "advcloak/losses.hpp"

#include <cmath>

#include "advcloak/errors.hpp"

namespace advcloak {

namespace {
constexpr double kLogFloor = 1e-12;

void check_finite(const Tape& t, Tape::Id id, const char* what) {
    if (!t.val(id).all_finite()) throw NumericError(std::string(what) + ": non-finite value");
}
}  // namespace

std::string adv_kind_name(AdvObjectiveKind k) {
    switch (k) {
        case AdvObjectiveKind::plain: return "plain";
        case AdvObjectiveKind::affine: return "affine";
        case AdvObjectiveKind::center: return "center";
        case AdvObjectiveKind::convex: return "convex";
    }
    return "plain";
}

AdvObjectiveKind adv_kind_from_name(const std::string& s) {
    if (s == "plain") return AdvObjectiveKind::plain;
    if (s == "affine") return AdvObjectiveKind::affine;
    if (s == "center") return AdvObjectiveKind::center;
    if (s == "convex") return AdvObjectiveKind::convex;
    throw PreconditionError("unknown adversarial objective kind: " + s);
}

GanTerms gan_terms_from_probs(Tape& t, Tape::Id p_real, Tape::Id p_fake) {
    Tape::Id log_real = t.mean_all(t.log_clamped(p_real, kLogFloor));
    Tape::Id log_one_minus_fake =
        t.mean_all(t.log_clamped(t.affine(p_fake, -1.0, 1.0), kLogFloor));
    Tape::Id log_fake = t.mean_all(t.log_clamped(p_fake, kLogFloor));
    GanTerms g;
    g.disc_term = t.lincomb({log_real, log_one_minus_fake}, {1.0, 1.0});
    g.gen_term = t.affine(log_fake, -1.0, 0.0);  // non-saturating: -E[log D(fake)]
    check_finite(t, g.disc_term, "gan loss disc term");
    check_finite(t, g.gen_term, "gan loss gen term");
    return g;
}

GanTerms gan_terms_from_prob_groups(Tape& t,
                                    const std::vector<std::pair<Tape::Id, Tape::Id>>& groups) {
    if (groups.empty()) throw PreconditionError("gan loss: empty identity batch");
    std::vector<Tape::Id> disc_parts, gen_parts;
    for (const auto& [p_real, p_fake] : groups) {
        Tape::Id log_real = t.mean_all(t.log_clamped(p_real, kLogFloor));
        Tape::Id log_one_minus_fake =
            t.mean_all(t.log_clamped(t.affine(p_fake, -1.0, 1.0), kLogFloor));
        disc_parts.push_back(t.lincomb({log_real, log_one_minus_fake}, {1.0, 1.0}));
        gen_parts.push_back(t.mean_all(t.log_clamped(p_fake, kLogFloor)));
    }
    double inv_k = 1.0 / static_cast<double>(groups.size());
    std::vector<double> disc_coeffs(groups.size(), inv_k);
    std::vector<double> gen_coeffs(groups.size(), -inv_k);
    GanTerms g;
    g.disc_term = t.lincomb(disc_parts, disc_coeffs);
    g.gen_term = t.lincomb(gen_parts, gen_coeffs);
    check_finite(t, g.disc_term, "class gan loss disc term");
    check_finite(t, g.gen_term, "class gan loss gen term");
    return g;
}

GanTerms gan_loss_image(Tape& t, const DiscriminatorModel& disc, ParamMap& dpm, Tape::Id real,
                        Tape::Id fake) {
    if (t.val(real).numel() == 0 || t.val(fake).numel() == 0)
        throw PreconditionError("gan_loss_image: empty batch");
    return gan_terms_from_probs(t, disc.prob(t, real, dpm), disc.prob(t, fake, dpm));
}

GanTerms gan_loss_class(Tape& t, const DiscriminatorModel& disc, ParamMap& dpm,
                        const std::vector<IdentityGanBatch>& identities) {
    std::vector<std::pair<Tape::Id, Tape::Id>> groups;
    groups.reserve(identities.size());
    for (const IdentityGanBatch& b : identities)
        groups.emplace_back(disc.prob(t, b.real, dpm), disc.prob(t, b.fake, dpm));
    return gan_terms_from_prob_groups(t, groups);
}

Tape::Id norm_loss(Tape& t, Tape::Id perturbations, double epsilon) {
    if (epsilon <= 0.0) throw PreconditionError("norm_loss: epsilon must be positive");
    Tape::Id norms_255 = t.affine(t.l2_norm_rows(perturbations), 255.0, 0.0);
    return t.mean_all(t.max_const(norms_255, epsilon));
}

Tape::Id adv_loss_image(Tape& t, const EmbedderModel& model, const Tensor& originals_nchw,
                        Tape::Id adversarials) {
    ParamMap frozen(t, false);
    Tape::Id target = model.embed_on_tape(t, t.constant(originals_nchw), frozen);
    ParamMap frozen2(t, false);
    Tape::Id e_adv = model.embed_on_tape(t, adversarials, frozen2);
    // l_d = 1 - <e_adv, e_orig> per row; target is constant, so no gradient
    // reaches the original branch.
    Tape::Id cosines = t.rows_dot(e_adv, target);
    return t.mean_all(t.affine(cosines, -1.0, 1.0));
}

Tape::Id adv_loss_class(Tape& t, const EmbedderModel& model,
                        const std::vector<IdentityAdvBatch>& identities, AdvObjectiveKind kind,
                        HullTargetMode mode) {
    if (identities.empty()) throw PreconditionError("adv_loss_class: empty identity batch");
    std::vector<Tape::Id> parts;
    parts.reserve(identities.size());
    for (const IdentityAdvBatch& b : identities) {
        ParamMap frozen(t, false);
        Tape::Id e_adv = model.embed_on_tape(t, b.adversarials, frozen);
        const Tensor& e_adv_val = t.val(e_adv);
        int n = e_adv_val.dims[0], d = e_adv_val.dims[1];

        if (kind == AdvObjectiveKind::plain) {
            ParamMap frozen2(t, false);
            Tape::Id e_orig = model.embed_on_tape(t, t.constant(b.originals_nchw), frozen2);
            Tape::Id cosines = t.rows_dot(e_adv, e_orig);
            parts.push_back(t.mean_all(t.affine(cosines, -1.0, 1.0)));
            continue;
        }

        if (b.hull == nullptr)
            throw PreconditionError("adv_loss_class: missing feature hull for an identity");
        // One projection per adversarial query; alpha is re-solved here and
        // held constant for gradient purposes.
        Tensor targets({n, d});
        for (int i = 0; i < n; ++i) {
            Eigen::VectorXd q(d);
            for (int j = 0; j < d; ++j) q(j) = e_adv_val.at2(i, j);
            HullProjection proj = hull_distance(*b.hull, q);
            Eigen::VectorXd point = proj.point;
            if (mode == HullTargetMode::renormalized_cosine) {
                double nrm = point.norm();
                if (nrm > 1e-12) point /= nrm;
            }
            for (int j = 0; j < d; ++j) targets.at2(i, j) = point(j);
        }
        if (mode == HullTargetMode::renormalized_cosine) {
            Tape::Id cosines = t.rows_dot(e_adv, t.constant(std::move(targets)));
            parts.push_back(t.mean_all(t.affine(cosines, -1.0, 1.0)));
        } else {
            Tape::Id diff = t.sub(e_adv, t.constant(std::move(targets)));
            parts.push_back(t.mean_all(t.l2_norm_rows(diff)));
        }
    }
    std::vector<double> coeffs(parts.size(), 1.0 / static_cast<double>(parts.size()));
    Tape::Id loss = t.lincomb(parts, coeffs);
    check_finite(t, loss, "class adversarial loss");
    return loss;
}

Tape::Id assemble_total(Tape& t, Tape::Id gan, Tape::Id norm, Tape::Id adv,
                        const LossWeights& w) {
    return t.lincomb({gan, norm, adv}, {1.0, w.lambda_norm, w.lambda_adv});
}

}  // namespace advcloak
