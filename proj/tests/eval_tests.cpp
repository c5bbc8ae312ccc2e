#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "advcloak/baselines.hpp"
#include "advcloak/errors.hpp"
#include "advcloak/evalharness.hpp"
#include "advcloak/trainer.hpp"

using namespace advcloak;

namespace {

const ImageShape kShape{16, 16, 3};

struct Fixture {
    IdentityCorpus corpus;
    CorpusSplit split;
    EmbedderModel embedder;

    Fixture()
        : corpus(synth_corpus(14, 12, kShape, 31)),
          split(split_corpus(corpus, SplitSpec{6, 4, 4, 2})),
          embedder([&] {
              EmbedderConfig cfg;
              cfg.epochs = 15;
              cfg.seed = 3;
              return train_embedder(corpus, cfg);
          }()) {}
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

std::map<std::string, std::vector<FaceImage>> test_map(const IdentityCorpus& c) {
    std::map<std::string, std::vector<FaceImage>> out;
    for (const auto& [id, imgs] : c.identities) out.emplace(id, imgs);
    return out;
}

PersonMask noise_mask_for(const std::string& id, double norm) {
    PersonMask m = random_noise_mask(kShape, 99, id);
    return normalize_mask(m, norm);
}

}  // namespace

TEST_CASE("normalize_mask scaling and direction") {
    PersonMask m = random_noise_mask(kShape, 5, "a");
    PersonMask scaled = normalize_mask(m, 1200.0);
    CHECK(scaled.delta.norm_l2_255() == doctest::Approx(1200.0).epsilon(1e-9));

    // direction unchanged: cosine of flattened masks is 1
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < m.delta.v.size(); ++i) {
        dot += m.delta.v[i] * scaled.delta.v[i];
        na += m.delta.v[i] * m.delta.v[i];
        nb += scaled.delta.v[i] * scaled.delta.v[i];
    }
    CHECK(dot / std::sqrt(na * nb) == doctest::Approx(1.0).epsilon(1e-9));

    PersonMask same = normalize_mask(scaled, 1200.0);
    for (std::size_t i = 0; i < same.delta.v.size(); ++i)
        CHECK(same.delta.v[i] == doctest::Approx(scaled.delta.v[i]).epsilon(1e-12));

    PersonMask zero;
    zero.delta.shape = kShape;
    zero.delta.v.assign(static_cast<std::size_t>(kShape.numel()), 0.0);
    CHECK_THROWS_AS(normalize_mask(zero, 100.0), PreconditionError);
}

TEST_CASE("desk-scale norm budget follows the area rule") {
    double target = scaled_norm_target(1200.0, {112, 112, 3}, {32, 32, 3});
    CHECK(target == doctest::Approx(1200.0 * 32.0 / 112.0).epsilon(1e-12));
    CHECK(scaled_norm_target(1200.0, {112, 112, 3}, {112, 112, 3}) ==
          doctest::Approx(1200.0));
}

TEST_CASE("identification protocol: pair counts and clean floor") {
    Fixture& f = fixture();
    auto tests = test_map(f.split.test);
    Gallery g = build_gallery(f.split.distractors, f.embedder);

    ModelProtection clean = run_identification(tests, g, f.embedder, nullptr);
    long expected_pairs = 0;
    for (const auto& [id, imgs] : tests)
        expected_pairs += static_cast<long>(imgs.size()) * (static_cast<long>(imgs.size()) - 1);
    CHECK(clean.pair_count == expected_pairs);

    // strong embedder, clean probes: nearly everything is identified
    CHECK(clean.top1_psr < 20.0);
    CHECK(clean.top5_psr <= clean.top1_psr);

    // with no distractors every probe ranks first
    Gallery empty_gallery;
    empty_gallery.embeddings = Tensor({0, f.embedder.config().d});
    ModelProtection no_distractors = run_identification(tests, empty_gallery, f.embedder, nullptr);
    CHECK(no_distractors.top1_psr == doctest::Approx(0.0));
}

TEST_CASE("identification rejects identities with fewer than two test images") {
    Fixture& f = fixture();
    auto tests = test_map(f.split.test);
    tests.begin()->second.resize(1);
    Gallery g = build_gallery(f.split.distractors, f.embedder);
    CHECK_THROWS_AS(run_identification(tests, g, f.embedder, nullptr), PreconditionError);
}

TEST_CASE("adding distractors never lowers PSR") {
    Fixture& f = fixture();
    auto tests = test_map(f.split.test);

    MaskProvider masks;
    for (const auto& [id, _] : tests) masks.emplace(id, noise_mask_for(id, 400.0));

    IdentityCorpus few, many;
    few.image_shape = many.image_shape = kShape;
    int i = 0;
    for (const auto& [id, imgs] : f.split.distractors.identities) {
        many.identities.emplace(id, imgs);
        if (i < 2) few.identities.emplace(id, imgs);
        ++i;
    }
    Gallery g_few = build_gallery(few, f.embedder);
    Gallery g_many = build_gallery(many, f.embedder);
    ModelProtection p_few = run_identification(tests, g_few, f.embedder, &masks);
    ModelProtection p_many = run_identification(tests, g_many, f.embedder, &masks);
    CHECK(p_many.top1_psr >= p_few.top1_psr - 1e-12);
    CHECK(p_many.top5_psr >= p_few.top5_psr - 1e-12);
    CHECK(p_few.top5_psr <= p_few.top1_psr);
    CHECK(p_many.top5_psr <= p_many.top1_psr);
}

TEST_CASE("ssim: identity, symmetry, negation") {
    IdentityCorpus c = synth_corpus(2, 2, {32, 32, 3}, 41);
    const FaceImage& a = c.identities.at("id_0000").front();
    const FaceImage& b = c.identities.at("id_0001").front();
    CHECK(compute_ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(compute_ssim(a, b) == doctest::Approx(compute_ssim(b, a)).epsilon(1e-9));

    FaceImage neg = a;
    for (auto& p : neg.px) p = 1.0 - p;
    CHECK(compute_ssim(a, neg) < 0.2);

    FaceImage small;
    small.shape = {8, 8, 3};
    small.px.assign(8 * 8 * 3, 0.5);
    CHECK_THROWS_AS(compute_ssim(a, small), PreconditionError);
}

TEST_CASE("tradeoff sweep: ssim falls and psr rises with the norm") {
    Fixture& f = fixture();
    auto tests = test_map(f.split.test);
    MaskProvider masks;
    for (const auto& [id, imgs] : f.split.inference.identities) {
        FIUAPConfig cfg;
        cfg.iterations = 8;
        masks.emplace(id, fi_uap(imgs, f.embedder, cfg, id));
    }
    Gallery g = build_gallery(f.split.distractors, f.embedder);
    std::vector<const EmbedderModel*> targets{&f.embedder};
    std::vector<Gallery> galleries{g};
    std::vector<double> norms{1.0, 120.0, 360.0, 720.0};
    auto points = tradeoff_sweep(masks, norms, tests, targets, galleries);
    REQUIRE(points.size() == 4);
    CHECK(points[0].mean_ssim > 0.999);  // norm -> 0 gives SSIM -> 1
    int ssim_inversions = 0, psr_inversions = 0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        if (points[i].mean_ssim > points[i - 1].mean_ssim + 1e-9) ++ssim_inversions;
        if (points[i].avg_psr < points[i - 1].avg_psr - 1e-9) ++psr_inversions;
    }
    CHECK(ssim_inversions <= 1);
    CHECK(psr_inversions <= 1);

    std::vector<double> bad{5.0, 2.0};
    CHECK_THROWS_AS(tradeoff_sweep(masks, bad, tests, targets, galleries), PreconditionError);
}

TEST_CASE("fi_uap: clip contract, zero iterations, progress over iterations") {
    Fixture& f = fixture();
    const auto& imgs = f.split.inference.identities.begin()->second;

    FIUAPConfig cfg;
    cfg.iterations = 0;
    PersonMask zero = fi_uap(imgs, f.embedder, cfg, "x");
    for (double e : zero.delta.v) CHECK(e == 0.0);

    cfg.iterations = 16;
    PersonMask full = fi_uap(imgs, f.embedder, cfg, "x");
    CHECK(full.delta.linf_01() <= 8.0 / 255.0 + 1e-12);
    CHECK(full.method == "fi-uap");

    cfg.iterations = 1;
    PersonMask one = fi_uap(imgs, f.embedder, cfg, "x");
    auto mean_dist = [&](const PersonMask& m) {
        double acc = 0.0;
        for (const FaceImage& im : imgs)
            acc += distance(f.embedder.embed(apply_perturbation(im, m.delta)),
                            f.embedder.embed(im));
        return acc / static_cast<double>(imgs.size());
    };
    CHECK(mean_dist(full) > mean_dist(one));

    PersonMask again = fi_uap(imgs, f.embedder, cfg, "x");
    CHECK(again.delta.v == one.delta.v);  // deterministic

    // OPOM hull variants run and differ from the plain mask
    for (AdvObjectiveKind kind :
         {AdvObjectiveKind::affine, AdvObjectiveKind::center, AdvObjectiveKind::convex}) {
        FIUAPConfig hc;
        hc.iterations = 4;
        hc.hull_kind = kind;
        PersonMask hm = fi_uap(imgs, f.embedder, hc, "x");
        CHECK(hm.method == "opom-" + adv_kind_name(kind));
        CHECK(hm.delta.linf_01() <= 8.0 / 255.0 + 1e-12);
    }
    FIUAPConfig hull1;
    hull1.hull_kind = AdvObjectiveKind::convex;
    CHECK_THROWS_AS(fi_uap({imgs[0]}, f.embedder, hull1, "x"), PreconditionError);
}

TEST_CASE("advfaces_plus equals stage-I aggregation and enforces the stage tag") {
    Fixture& f = fixture();
    GeneratorConfig gcfg;
    gcfg.seed = 77;
    GeneratorModel gen(gcfg, kShape, StageTag::I);
    const auto& imgs = f.split.inference.identities.begin()->second;

    PersonMask plus = advfaces_plus(gen, imgs, "y");
    PersonMask agg = aggregate_mask(gen, imgs, "y");
    CHECK(plus.delta.v == agg.delta.v);  // bit-for-bit
    CHECK(plus.method == "advfaces+");
    CHECK(plus.n_images == static_cast<int>(imgs.size()));

    PersonMask single = advfaces_plus(gen, {imgs[0]}, "y");
    CHECK(single.delta.v == gen.generate(imgs[0]).v);

    gen.set_stage(StageTag::II);
    CHECK_THROWS_AS(advfaces_plus(gen, imgs, "y"), PreconditionError);
}

TEST_CASE("timing probe: t2 is zero by construction and t1 is stable") {
    Fixture& f = fixture();
    const auto& imgs = f.split.inference.identities.begin()->second;
    GeneratorConfig gcfg;
    gcfg.seed = 88;
    GeneratorModel gen(gcfg, kShape, StageTag::I);

    std::vector<double> times;
    for (int run = 0; run < 5; ++run) {
        Timings t = timing_probe([&] { return aggregate_mask(gen, imgs, "z"); });
        CHECK(t.t2_per_image_s == 0.0);
        CHECK(t.t1_mask_s > 0.0);
        times.push_back(t.t1_mask_s);
    }
    double lo = *std::min_element(times.begin(), times.end());
    double hi = *std::max_element(times.begin(), times.end());
    CHECK((hi - lo) / hi < 0.9);  // coarse stability across repeats
}
