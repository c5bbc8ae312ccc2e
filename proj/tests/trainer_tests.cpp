#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "advcloak/baselines.hpp"
#include "advcloak/errors.hpp"
#include "advcloak/trainer.hpp"

using namespace advcloak;
namespace fs = std::filesystem;

namespace {

const ImageShape kShape{16, 16, 3};

struct Fixture {
    IdentityCorpus corpus;
    EmbedderModel embedder;

    Fixture()
        : corpus(synth_corpus(8, 16, kShape, 21)),
          embedder([&] {
              EmbedderConfig cfg;
              cfg.epochs = 12;
              cfg.seed = 2;
              return train_embedder(corpus, cfg);
          }()) {}
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

double mean_adv_distance(const GeneratorModel& gen, const EmbedderModel& m,
                         const std::vector<FaceImage>& images) {
    double acc = 0.0;
    for (const FaceImage& im : images) {
        FaceImage adv = apply_perturbation(im, gen.generate(im));
        acc += distance(m.embed(adv), m.embed(im));
    }
    return acc / static_cast<double>(images.size());
}

}  // namespace

TEST_CASE("stage 1 learns to push features apart and keeps norms near the hinge") {
    Fixture& f = fixture();
    StageIConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.seed = 3;

    IdentityCorpus heldout = synth_corpus(4, 4, kShape, 1234);  // unseen identities
    std::vector<FaceImage> probes;
    for (const auto& [id, imgs] : heldout.identities)
        for (const FaceImage& im : imgs) probes.push_back(im);

    GeneratorConfig gcfg = cfg.generator;
    gcfg.seed = derive_seed(cfg.seed, "stage1/generator");
    GeneratorModel untrained(gcfg, kShape);
    double before = mean_adv_distance(untrained, f.embedder, probes);

    StageResult r = train_stage1(f.corpus, f.embedder, cfg);
    double after = mean_adv_distance(r.gen, f.embedder, probes);
    CHECK(after > 3.0 * before);

    // hinge keeps the perturbation norm in a band above epsilon
    double mean_norm = r.log.records.back().mean_pert_norm_255;
    CHECK(mean_norm >= cfg.epsilon);
    CHECK(mean_norm <= 10.0 * cfg.epsilon);

    // determinism: identical config and seed reproduce the parameters
    StageResult r2 = train_stage1(f.corpus, f.embedder, cfg);
    CHECK(r2.gen.param_hash() == r.gen.param_hash());
    CHECK(r2.disc.param_hash() == r.disc.param_hash());

    // discriminator learned something: D(real) > D(fake) on train images
    double dreal = 0.0, dfake = 0.0;
    int n = 0;
    for (const auto& [id, imgs] : f.corpus.identities)
        for (const FaceImage& im : imgs) {
            dreal += r.disc.discriminate(im);
            dfake += r.disc.discriminate(apply_perturbation(im, r.gen.generate(im)));
            ++n;
        }
    CHECK(dreal / n > dfake / n);
}

TEST_CASE("aggregate_mask arithmetic") {
    Fixture& f = fixture();
    GeneratorConfig gcfg;
    gcfg.seed = 5;
    GeneratorModel gen(gcfg, kShape);
    const auto& imgs = f.corpus.identities.at("id_0000");

    PersonMask one = aggregate_mask(gen, {imgs[0]}, "id_0000");
    PerturbationMap direct = gen.generate(imgs[0]);
    CHECK(one.delta.v == direct.v);
    CHECK(one.n_images == 1);
    CHECK(one.generator_hash == gen.param_hash());

    PersonMask dup = aggregate_mask(gen, {imgs[1], imgs[1]}, "id_0000");
    PerturbationMap single = gen.generate(imgs[1]);
    for (std::size_t i = 0; i < dup.delta.v.size(); ++i)
        CHECK(dup.delta.v[i] == doctest::Approx(single.v[i]).epsilon(1e-12));

    // aggregate(A u B) with |A| = |B| equals the mean of the two aggregates
    std::vector<FaceImage> a{imgs[0], imgs[1]}, b{imgs[2], imgs[3]};
    std::vector<FaceImage> both{imgs[0], imgs[1], imgs[2], imgs[3]};
    PersonMask ma = aggregate_mask(gen, a), mb = aggregate_mask(gen, b),
               mab = aggregate_mask(gen, both);
    for (std::size_t i = 0; i < mab.delta.v.size(); ++i)
        CHECK(mab.delta.v[i] ==
              doctest::Approx(0.5 * (ma.delta.v[i] + mb.delta.v[i])).epsilon(1e-12));

    CHECK_THROWS_AS(aggregate_mask(gen, {}), PreconditionError);
}

TEST_CASE("stage 2: no-op epochs, frozen embedder, split audit") {
    Fixture& f = fixture();
    StageIConfig s1;
    s1.epochs = 2;
    s1.batch_size = 32;
    s1.seed = 4;
    StageResult stage1 = train_stage1(f.corpus, f.embedder, s1);

    std::uint64_t embedder_hash_before = f.embedder.param_hash();

    StageIIConfig s2;
    s2.epochs = 0;
    s2.seed = 5;
    s2.n_per_identity = 16;
    StageResult noop = train_stage2(f.corpus, f.embedder, stage1.gen, stage1.disc, s2);
    CHECK(noop.gen.param_hash() == stage1.gen.param_hash());
    CHECK(noop.disc.param_hash() == stage1.disc.param_hash());
    CHECK(noop.gen.stage() == StageTag::II);

    SplitSpec spec{10, 6, 0, 9};
    CorpusSplit split = split_corpus(f.corpus, spec);
    s2.epochs = 2;
    s2.n_per_identity = 10;
    s2.identities_per_batch = 4;
    s2.adv_kind = AdvObjectiveKind::convex;
    StageResult r = train_stage2(split.inference, f.embedder, stage1.gen, stage1.disc, s2);
    CHECK(r.gen.param_hash() != stage1.gen.param_hash());
    CHECK(f.embedder.param_hash() == embedder_hash_before);  // frozen surrogate

    // audit: no test-split image was consumed during stage II
    std::set<std::string> test_names;
    for (const auto& [id, imgs] : split.test.identities)
        for (const FaceImage& im : imgs) test_names.insert(id + "/" + im.name);
    for (const std::string& used : r.log.consumed_images) CHECK_FALSE(test_names.count(used));
    CHECK_FALSE(r.log.consumed_images.empty());
}

TEST_CASE("stage 2 rejects underfilled identities and hull kinds with n=1") {
    Fixture& f = fixture();
    StageIConfig s1;
    s1.epochs = 1;
    s1.seed = 6;
    StageResult stage1 = train_stage1(f.corpus, f.embedder, s1);

    StageIIConfig s2;
    s2.n_per_identity = 64;  // corpus has 16 per identity
    CHECK_THROWS_WITH_AS(train_stage2(f.corpus, f.embedder, stage1.gen, stage1.disc, s2),
                         doctest::Contains("id_0000"), PreconditionError);

    s2.n_per_identity = 1;
    s2.adv_kind = AdvObjectiveKind::convex;
    CHECK_THROWS_AS(train_stage2(f.corpus, f.embedder, stage1.gen, stage1.disc, s2),
                    PreconditionError);
}

TEST_CASE("logged losses are recomputable from checkpoints") {
    Fixture& f = fixture();
    fs::path dir = fs::temp_directory_path() / "advcloak_ckpt_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    StageIConfig s1;
    s1.epochs = 2;
    s1.batch_size = 48;
    s1.seed = 7;
    s1.checkpoint_interval = 2;
    s1.checkpoint_dir = dir.string();
    StageResult r1 = train_stage1(f.corpus, f.embedder, s1);

    for (int step : {0, 2, 4}) {
        Checkpoint ck = load_checkpoint((dir / ("stage1_step" + std::to_string(step) + ".ckpt")).string());
        CHECK(ck.step == step);
        StepLosses re = stage1_step_losses(f.corpus, f.embedder, ck.gen, ck.disc, s1, step);
        const TrainLogRecord& logged = r1.log.records[static_cast<std::size_t>(step)];
        CHECK(re.disc_term == doctest::Approx(logged.disc_term).epsilon(1e-12));
        CHECK(re.gen_gan == doctest::Approx(logged.gen_gan).epsilon(1e-12));
        CHECK(re.norm_term == doctest::Approx(logged.norm_term).epsilon(1e-12));
        CHECK(re.adv_term == doctest::Approx(logged.adv_term).epsilon(1e-12));
        CHECK(re.gen_total == doctest::Approx(logged.gen_total).epsilon(1e-12));
    }

    StageIIConfig s2;
    s2.epochs = 1;
    s2.seed = 8;
    s2.n_per_identity = 16;
    s2.identities_per_batch = 4;
    s2.adv_kind = AdvObjectiveKind::center;
    s2.checkpoint_interval = 1;
    s2.checkpoint_dir = dir.string();
    StageResult r2 = train_stage2(f.corpus, f.embedder, r1.gen, r1.disc, s2);
    for (int step : {0, 1}) {
        Checkpoint ck = load_checkpoint((dir / ("stage2_step" + std::to_string(step) + ".ckpt")).string());
        StepLosses re = stage2_step_losses(f.corpus, f.embedder, ck.gen, ck.disc, s2, step);
        const TrainLogRecord& logged = r2.log.records[static_cast<std::size_t>(step)];
        CHECK(re.disc_term == doctest::Approx(logged.disc_term).epsilon(1e-12));
        CHECK(re.gen_total == doctest::Approx(logged.gen_total).epsilon(1e-12));
        CHECK(re.adv_term == doctest::Approx(logged.adv_term).epsilon(1e-12));
    }

    // the training log serializes as line-delimited records
    std::string jsonl = r1.log.to_jsonl();
    CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') ==
          static_cast<long>(r1.log.records.size()));
    fs::remove_all(dir);
}

TEST_CASE("stage 2 with the paper preset learning rate leaves parameters nearly fixed") {
    Fixture& f = fixture();
    StageIConfig s1;
    s1.epochs = 1;
    s1.seed = 9;
    StageResult stage1 = train_stage1(f.corpus, f.embedder, s1);

    StageIIConfig s2;
    s2.learning_rate = 2e-8;  // published value, preserved as a preset
    s2.epochs = 1;
    s2.seed = 10;
    s2.n_per_identity = 16;
    StageResult r = train_stage2(f.corpus, f.embedder, stage1.gen, stage1.disc, s2);
    const FaceImage& im = f.corpus.identities.at("id_0000").front();
    PerturbationMap before = stage1.gen.generate(im);
    PerturbationMap after = r.gen.generate(im);
    double diff = 0.0;
    for (std::size_t i = 0; i < before.v.size(); ++i)
        diff = std::max(diff, std::abs(before.v[i] - after.v[i]));
    CHECK(diff < 1e-4);  // no measurable movement at desk scale
}
