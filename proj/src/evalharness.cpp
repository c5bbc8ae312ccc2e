#include "advcloak/evalharness.hpp"

#include <chrono>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "advcloak/errors.hpp"

namespace advcloak {

PersonMask normalize_mask(const PersonMask& mask, double target_l2_255) {
    double norm = mask.delta.norm_l2_255();
    if (norm <= 0.0) throw PreconditionError("normalize_mask: zero mask");
    if (target_l2_255 < 0.0) throw PreconditionError("normalize_mask: negative target");
    PersonMask out = mask;
    double scale = target_l2_255 / norm;
    for (auto& e : out.delta.v) e *= scale;
    return out;
}

double scaled_norm_target(double paper_norm, ImageShape paper_shape, ImageShape desk_shape) {
    return paper_norm * std::sqrt(static_cast<double>(desk_shape.numel()) /
                                  static_cast<double>(paper_shape.numel()));
}

Gallery build_gallery(const IdentityCorpus& distractors, const EmbedderModel& target) {
    Gallery g;
    std::vector<const FaceImage*> imgs;
    for (const auto& [id, list] : distractors.identities)
        for (const FaceImage& im : list) {
            g.ids.push_back(id);
            imgs.push_back(&im);
        }
    g.distractor_count = static_cast<int>(imgs.size());
    if (!imgs.empty())
        g.embeddings = target.embed_batch(imgs);
    else
        g.embeddings = Tensor({0, target.config().d});
    return g;
}

ModelProtection run_identification(
    const std::map<std::string, std::vector<FaceImage>>& test_by_identity, const Gallery& gallery,
    const EmbedderModel& target, const MaskProvider* masks, const std::string& model_name) {
    ModelProtection out;
    out.model = model_name;
    long identified1 = 0, identified5 = 0, pairs = 0;
    int d = target.config().d;
    int n_distractors = gallery.embeddings.dims.empty() ? 0 : gallery.embeddings.dims[0];

    for (const auto& [id, test_imgs] : test_by_identity) {
        int m = static_cast<int>(test_imgs.size());
        if (m < 2)
            throw PreconditionError("run_identification: identity with fewer than 2 test images: " +
                                    id);
        const PersonMask* mask = nullptr;
        if (masks) {
            auto it = masks->find(id);
            if (it == masks->end())
                throw PreconditionError("run_identification: no mask for identity " + id);
            mask = &it->second;
        }
        Tensor clean = target.embed_batch(test_imgs);
        Tensor probe;
        if (mask) {
            std::vector<FaceImage> prot;
            prot.reserve(test_imgs.size());
            for (const FaceImage& im : test_imgs) prot.push_back(apply_perturbation(im, mask->delta));
            probe = target.embed_batch(prot);
        } else {
            probe = clean;
        }

        // Dot products of each probe against every distractor entry.
        for (int j = 0; j < m; ++j) {  // enrolled image index
            for (int i = 0; i < m; ++i) {
                if (i == j) continue;
                double dot_enrolled = 0.0;
                for (int c = 0; c < d; ++c) dot_enrolled += probe.at2(i, c) * clean.at2(j, c);
                int closer = 0;
                for (int r = 0; r < n_distractors; ++r) {
                    double dot = 0.0;
                    for (int c = 0; c < d; ++c)
                        dot += probe.at2(i, c) * gallery.embeddings.at2(r, c);
                    if (dot >= dot_enrolled) ++closer;  // ties count against the probe
                }
                int rank = 1 + closer;
                if (rank <= 1) ++identified1;
                if (rank <= 5) ++identified5;
                ++pairs;
            }
        }
    }
    out.pair_count = pairs;
    out.top1_psr = 100.0 - 100.0 * static_cast<double>(identified1) / static_cast<double>(pairs);
    out.top5_psr = 100.0 - 100.0 * static_cast<double>(identified5) / static_cast<double>(pairs);
    return out;
}

double mean_protected_ssim(const std::map<std::string, std::vector<FaceImage>>& test_by_identity,
                           const MaskProvider& masks) {
    double acc = 0.0;
    long count = 0;
    for (const auto& [id, imgs] : test_by_identity) {
        auto it = masks.find(id);
        if (it == masks.end())
            throw PreconditionError("mean_protected_ssim: no mask for identity " + id);
        for (const FaceImage& im : imgs) {
            acc += compute_ssim(im, apply_perturbation(im, it->second.delta));
            ++count;
        }
    }
    return count ? acc / static_cast<double>(count) : 1.0;
}

std::vector<TradeoffPoint> tradeoff_sweep(
    const MaskProvider& masks, const std::vector<double>& norms,
    const std::map<std::string, std::vector<FaceImage>>& test_by_identity,
    const std::vector<const EmbedderModel*>& targets, const std::vector<Gallery>& galleries) {
    for (std::size_t i = 1; i < norms.size(); ++i)
        if (norms[i] <= norms[i - 1])
            throw PreconditionError("tradeoff_sweep: norms must be positive ascending");
    if (!norms.empty() && norms.front() < 0.0)
        throw PreconditionError("tradeoff_sweep: norms must be non-negative");
    if (targets.size() != galleries.size())
        throw PreconditionError("tradeoff_sweep: one gallery per target model");

    std::vector<TradeoffPoint> points;
    for (double norm : norms) {
        MaskProvider scaled;
        for (const auto& [id, mask] : masks) scaled.emplace(id, normalize_mask(mask, norm));
        TradeoffPoint p;
        p.norm = norm;
        p.mean_ssim = mean_protected_ssim(test_by_identity, scaled);
        double psr = 0.0;
        for (std::size_t t = 0; t < targets.size(); ++t)
            psr += run_identification(test_by_identity, galleries[t], *targets[t], &scaled).top1_psr;
        p.avg_psr = psr / static_cast<double>(targets.size());
        points.push_back(p);
    }
    return points;
}

double compute_ssim(const FaceImage& a, const FaceImage& b) {
    if (!(a.shape == b.shape)) throw PreconditionError("compute_ssim: shape mismatch");
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // unit dynamic range
    int win = std::min({8, a.shape.h, a.shape.w});
    double acc = 0.0;
    long windows = 0;
    for (int ch = 0; ch < a.shape.c; ++ch) {
        for (int y = 0; y + win <= a.shape.h; ++y) {
            for (int x = 0; x + win <= a.shape.w; ++x) {
                double ma = 0, mb = 0;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx) {
                        ma += a.at(y + dy, x + dx, ch);
                        mb += b.at(y + dy, x + dx, ch);
                    }
                int n = win * win;
                ma /= n;
                mb /= n;
                double va = 0, vb = 0, cov = 0;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx) {
                        double da = a.at(y + dy, x + dx, ch) - ma;
                        double db = b.at(y + dy, x + dx, ch) - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                va /= n;
                vb /= n;
                cov /= n;
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++windows;
            }
        }
    }
    return acc / static_cast<double>(windows);
}

Timings timing_probe(const std::function<PersonMask()>& customize) {
    auto start = std::chrono::steady_clock::now();
    PersonMask mask = customize();
    auto stop = std::chrono::steady_clock::now();
    (void)mask;
    Timings t;
    t.t1_mask_s = std::chrono::duration<double>(stop - start).count();
    t.t2_per_image_s = 0.0;  // applying a person-specific mask is an add
    return t;
}

nlohmann::json ProtectionReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const ModelProtection& m : per_model)
        rows.push_back({{"model", m.model},
                        {"top1_psr", m.top1_psr},
                        {"top5_psr", m.top5_psr},
                        {"pair_count", m.pair_count}});
    return nlohmann::json{{"schema_version", schema_version},
                          {"config_hash", config_hash},
                          {"method", method},
                          {"mask_norm_l2_255", mask_norm_l2_255},
                          {"mean_ssim", mean_ssim},
                          {"timings",
                           {{"t1_mask_s", timings.t1_mask_s},
                            {"t2_per_image_s", timings.t2_per_image_s}}},
                          {"per_model", rows}};
}

std::string ProtectionReport::to_string() const { return to_json().dump(2) + "\n"; }

}  // namespace advcloak
