#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "advcloak/advnet.hpp"
#include "advcloak/dataio.hpp"
#include "advcloak/errors.hpp"
#include "advcloak/evalharness.hpp"

using namespace advcloak;
namespace fs = std::filesystem;

namespace {
const ImageShape kShape{32, 32, 3};

GeneratorModel seeded_generator(std::uint64_t seed) {
    GeneratorConfig cfg;
    cfg.seed = seed;
    return GeneratorModel(cfg, kShape);
}
}  // namespace

TEST_CASE("generator contract: shape, determinism, nonzero output") {
    IdentityCorpus c = synth_corpus(1, 2, kShape, 3);
    const FaceImage& im = c.identities.at("id_0000").front();
    GeneratorModel g = seeded_generator(1);
    PerturbationMap p1 = g.generate(im);
    CHECK(p1.shape == im.shape);
    PerturbationMap p2 = g.generate(im);
    CHECK(p1.v == p2.v);  // same params, same input
    CHECK(p1.norm_l2_255() > 0.0);
    for (double e : p1.v) CHECK(std::isfinite(e));
    CHECK(p1.linf_01() <= g.config().out_scale + 1e-12);
}

TEST_CASE("generator rejects shape mismatch") {
    IdentityCorpus c = synth_corpus(1, 2, {16, 16, 3}, 3);
    GeneratorModel g = seeded_generator(1);  // built for 32x32
    CHECK_THROWS_AS(g.generate(c.identities.at("id_0000").front()), PreconditionError);
}

TEST_CASE("apply_perturbation: identity, clipping, idempotence") {
    IdentityCorpus c = synth_corpus(1, 2, kShape, 4);
    const FaceImage& im = c.identities.at("id_0000").front();

    PerturbationMap zero{im.shape, std::vector<double>(im.px.size(), 0.0), };
    FaceImage same = apply_perturbation(im, zero);
    CHECK(same.px == im.px);

    PerturbationMap big{im.shape, std::vector<double>(im.px.size(), 10.0)};
    FaceImage clipped = apply_perturbation(im, big);
    for (double p : clipped.px) CHECK(p == 1.0);

    GeneratorModel g = seeded_generator(2);
    PerturbationMap pert = g.generate(im);
    FaceImage once = apply_perturbation(im, pert);
    FaceImage again = apply_perturbation(once, zero);
    CHECK(once.px == again.px);

    PerturbationMap wrong{{16, 16, 3}, std::vector<double>(16 * 16 * 3, 0.0)};
    CHECK_THROWS_AS(apply_perturbation(im, wrong), PreconditionError);
}

TEST_CASE("small perturbations keep SSIM high") {
    IdentityCorpus c = synth_corpus(4, 4, kShape, 5);
    GeneratorModel g = seeded_generator(3);
    double acc = 0.0;
    int n = 0;
    for (const auto& [id, imgs] : c.identities)
        for (const FaceImage& im : imgs) {
            PerturbationMap p = g.generate(im);
            double norm = p.norm_l2_255();
            REQUIRE(norm > 0.0);
            for (auto& e : p.v) e *= 300.0 / norm;  // L2(255) = 300
            acc += compute_ssim(im, apply_perturbation(im, p));
            ++n;
        }
    CHECK(acc / n > 0.9);
}

TEST_CASE("discriminator output is a probability and batches consistently") {
    IdentityCorpus c = synth_corpus(2, 3, kShape, 6);
    DiscriminatorModel d(kShape, 4);
    std::vector<const FaceImage*> ptrs;
    for (const auto& [id, imgs] : c.identities)
        for (const FaceImage& im : imgs) ptrs.push_back(&im);

    Tape t;
    ParamMap pm(t, false);
    Tape::Id probs = d.prob(t, t.constant(batch_to_nchw(ptrs)), pm);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
        double batched = t.val(probs).v[i];
        CHECK(batched > 0.0);
        CHECK(batched < 1.0);
        CHECK(batched == doctest::Approx(d.discriminate(*ptrs[i])).epsilon(1e-12));
    }
}

TEST_CASE("gradient flows from perturbation back to generator parameters") {
    IdentityCorpus c = synth_corpus(1, 2, kShape, 7);
    GeneratorModel g = seeded_generator(5);
    Tensor x = image_to_nchw(c.identities.at("id_0000").front());

    Tape t;
    ParamMap pm(t, true);
    Tape::Id pert = g.forward(t, t.constant(x), pm);
    t.backward(t.mean_all(t.mul(pert, pert)));

    int nonzero_layers = 0;
    for (auto& [name, w] : g.named_params()) {
        const Tensor& grad = t.grad(pm.id_of(*w));
        for (double e : grad.v)
            if (std::abs(e) > 1e-14) {
                ++nonzero_layers;
                break;
            }
    }
    CHECK(nonzero_layers > 10);  // generic input reaches essentially every layer
}

TEST_CASE("generator finite-difference parameter gradients") {
    IdentityCorpus c = synth_corpus(1, 2, {16, 16, 3}, 8);
    GeneratorConfig cfg;
    cfg.seed = 6;
    GeneratorModel g(cfg, {16, 16, 3});
    Tensor x = image_to_nchw(c.identities.at("id_0000").front());

    Tape t;
    ParamMap pm(t, true);
    Tape::Id pert = g.forward(t, t.constant(x), pm);
    t.backward(t.mean_all(t.mul(pert, pert)));

    GeneratorModel probe = g;
    auto gparams = g.named_params();
    auto pparams = probe.named_params();
    Rng rng(18);
    for (int k = 0; k < 5; ++k) {
        std::size_t li =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(gparams.size()) - 1));
        Tensor* w = pparams[li].second;
        if (w->numel() == 0) continue;
        int idx = static_cast<int>(rng.uniform_int(0, w->numel() - 1));
        double an = t.grad(pm.id_of(*gparams[li].second)).v[static_cast<std::size_t>(idx)];
        double orig = w->v[static_cast<std::size_t>(idx)];
        auto eval = [&](double val) {
            w->v[static_cast<std::size_t>(idx)] = val;
            Tape t2;
            ParamMap pm2(t2, false);
            Tape::Id p2 = probe.forward(t2, t2.constant(x), pm2);
            return t2.val(t2.mean_all(t2.mul(p2, p2))).v[0];
        };
        double step = 1e-5;
        double fd = (eval(orig + step) - eval(orig - step)) / (2 * step);
        w->v[static_cast<std::size_t>(idx)] = orig;
        if (std::abs(fd) < 1e-10 && std::abs(an) < 1e-10) continue;  // dead unit
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-2);
    }
}

TEST_CASE("model and mask archives round-trip") {
    fs::path dir = fs::temp_directory_path() / "advcloak_advnet_io";
    fs::remove_all(dir);
    fs::create_directories(dir);

    GeneratorModel g = seeded_generator(9);
    g.set_stage(StageTag::II);
    std::string gpath = (dir / "gen.acm").string();
    g.save(gpath, "cfg123");
    GeneratorModel g2 = GeneratorModel::load(gpath);
    CHECK(g2.param_hash() == g.param_hash());
    CHECK(g2.stage() == StageTag::II);

    DiscriminatorModel d(kShape, 11);
    std::string dpath = (dir / "disc.acm").string();
    d.save(dpath);
    CHECK(DiscriminatorModel::load(dpath).param_hash() == d.param_hash());

    PersonMask mask;
    mask.identity = "id_0007";
    mask.n_images = 10;
    mask.generator_hash = g.param_hash();
    mask.method = "advcloak";
    mask.delta.shape = kShape;
    Rng rng(12);
    mask.delta.v.resize(static_cast<std::size_t>(kShape.numel()));
    for (auto& e : mask.delta.v) e = rng.normal(0.0, 0.01);
    std::string mpath = (dir / "mask.acp").string();
    mask.save(mpath);
    PersonMask m2 = PersonMask::load(mpath);
    CHECK(m2.delta.v == mask.delta.v);  // bit-exact payload
    CHECK(m2.identity == mask.identity);
    CHECK(m2.n_images == 10);
    CHECK(m2.generator_hash == mask.generator_hash);

    // corrupt the payload: loader must reject
    {
        std::fstream f(mpath, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        f.put('\x5a');
    }
    CHECK_THROWS_AS(PersonMask::load(mpath), IoError);
    fs::remove_all(dir);
}
