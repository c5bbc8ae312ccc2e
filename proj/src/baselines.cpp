#include "advcloak/baselines.hpp"

#include <cmath>

#include "advcloak/errors.hpp"
#include "advcloak/subspace.hpp"

namespace advcloak {

PersonMask fi_uap(const std::vector<FaceImage>& images, const EmbedderModel& embedder,
                  const FIUAPConfig& cfg, const std::string& identity) {
    if (images.empty()) throw PreconditionError("fi_uap: empty image list");
    if (cfg.epsilon_inf <= 0.0) throw PreconditionError("fi_uap: epsilon_inf must be positive");
    if (cfg.iterations < 0) throw PreconditionError("fi_uap: iterations must be >= 0");
    if (cfg.hull_kind != AdvObjectiveKind::plain && images.size() < 2)
        throw PreconditionError("fi_uap: hull kinds need at least 2 images");

    const double eps01 = cfg.epsilon_inf / 255.0;
    std::vector<const FaceImage*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    Tensor originals = batch_to_nchw(ptrs);
    int n = originals.dims[0];

    // Fixed targets for plain mode; the hull itself is fixed, its projection
    // point is re-solved per iteration against the moving queries.
    Tensor clean_embeddings = embedder.embed_batch(ptrs);
    int d = clean_embeddings.dims[1];
    FeatureHull hull;
    if (cfg.hull_kind != AdvObjectiveKind::plain) {
        Eigen::MatrixXd anchors(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) anchors(i, j) = clean_embeddings.at2(i, j);
        HullKind hk = cfg.hull_kind == AdvObjectiveKind::affine  ? HullKind::affine
                      : cfg.hull_kind == AdvObjectiveKind::center ? HullKind::center
                                                                  : HullKind::convex;
        hull = build_hull(anchors, hk, identity);
    }

    Tensor delta({1, originals.dims[1], originals.dims[2], originals.dims[3]});
    for (int it = 0; it < cfg.iterations; ++it) {
        Tape t;
        Tape::Id mask = t.leaf(delta);
        Tape::Id x = t.constant(originals);
        // Unclipped adversarial images: clip applies to the mask only.
        Tape::Id adv = t.add_broadcast_n(x, mask);
        ParamMap frozen(t, false);
        Tape::Id e_adv = embedder.embed_on_tape(t, adv, frozen);

        Tensor targets({n, d});
        if (cfg.hull_kind == AdvObjectiveKind::plain) {
            targets = clean_embeddings;
        } else {
            const Tensor& e_val = t.val(e_adv);
            for (int i = 0; i < n; ++i) {
                Eigen::VectorXd q(d);
                for (int j = 0; j < d; ++j) q(j) = e_val.at2(i, j);
                HullProjection proj = hull_distance(hull, q);
                Eigen::VectorXd point = proj.point;
                // A query on the hull (distance 0, e.g. the clean anchors at
                // iteration 0) has no ascent direction; push away from the
                // hull centroid instead.
                if (proj.distance < 1e-9) point = hull.center;
                if (cfg.hull_target == HullTargetMode::renormalized_cosine) {
                    double nrm = point.norm();
                    if (nrm > 1e-12) point /= nrm;
                }
                for (int j = 0; j < d; ++j) targets.at2(i, j) = point(j);
            }
        }
        Tape::Id loss;
        if (cfg.hull_kind != AdvObjectiveKind::plain &&
            cfg.hull_target == HullTargetMode::euclidean_distance) {
            loss = t.mean_all(t.l2_norm_rows(t.sub(e_adv, t.constant(std::move(targets)))));
        } else {
            Tape::Id cosines = t.rows_dot(e_adv, t.constant(std::move(targets)));
            loss = t.mean_all(t.affine(cosines, -1.0, 1.0));
        }
        if (!std::isfinite(t.val(loss).v[0]))
            throw NumericError("fi_uap: non-finite loss at iteration " + std::to_string(it));
        t.backward(loss);
        const Tensor& g = t.grad(mask);
        if (!g.all_finite())
            throw NumericError("fi_uap: non-finite gradient at iteration " + std::to_string(it));
        for (std::size_t i = 0; i < delta.v.size(); ++i) {
            double step = g.v[i] > 0.0 ? cfg.step_alpha : (g.v[i] < 0.0 ? -cfg.step_alpha : 0.0);
            delta.v[i] = std::clamp(delta.v[i] + step, -eps01, eps01);
        }
    }

    PersonMask mask;
    mask.identity = identity;
    mask.n_images = n;
    mask.generator_hash = embedder.param_hash();
    mask.method = cfg.hull_kind == AdvObjectiveKind::plain
                      ? "fi-uap"
                      : "opom-" + adv_kind_name(cfg.hull_kind);
    mask.delta = nchw_slice_to_perturbation(delta, 0);
    return mask;
}

PersonMask advfaces_plus(const GeneratorModel& gen_stage1, const std::vector<FaceImage>& images,
                         const std::string& identity) {
    if (gen_stage1.stage() != StageTag::I)
        throw PreconditionError("advfaces_plus requires a stage-I generator");
    return aggregate_mask(gen_stage1, images, identity, "advfaces+");
}

PersonMask random_noise_mask(ImageShape shape, std::uint64_t seed, const std::string& identity) {
    Rng rng(derive_seed(seed, "random-noise-mask/" + identity));
    PersonMask mask;
    mask.identity = identity;
    mask.n_images = 0;
    mask.generator_hash = seed;
    mask.method = "random-noise";
    mask.delta.shape = shape;
    mask.delta.v.resize(static_cast<std::size_t>(shape.numel()));
    for (auto& e : mask.delta.v) e = rng.normal(0.0, 1.0 / 255.0);
    return mask;
}

}  // namespace advcloak
