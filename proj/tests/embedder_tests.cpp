#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "advcloak/dataio.hpp"
#include "advcloak/embedder.hpp"
#include "advcloak/errors.hpp"

using namespace advcloak;
namespace fs = std::filesystem;

namespace {
const ImageShape kShape{16, 16, 3};

EmbedderConfig base_config(std::uint64_t seed) {
    EmbedderConfig cfg;
    cfg.epochs = 30;
    cfg.seed = seed;
    return cfg;
}
}  // namespace

TEST_CASE("training gate: softmax head reaches 95% closed-set accuracy") {
    IdentityCorpus c = synth_corpus(20, 16, kShape, 7);
    EmbedderModel m = train_embedder(c, base_config(1));
    CHECK(m.train_accuracy() >= 0.95);
}

TEST_CASE("margin heads train to usable accuracy") {
    IdentityCorpus c = synth_corpus(10, 12, kShape, 9);
    for (HeadKind head : {HeadKind::cosface_margin, HeadKind::arcface_margin}) {
        EmbedderConfig cfg = base_config(2);
        cfg.head = head;
        cfg.epochs = 20;
        EmbedderModel m = train_embedder(c, cfg);
        CHECK(m.train_accuracy() >= 0.9);
    }
}

TEST_CASE("single-identity corpus is rejected") {
    IdentityCorpus c = synth_corpus(1, 8, kShape, 3);
    CHECK_THROWS_AS(train_embedder(c, base_config(0)), PreconditionError);
}

TEST_CASE("training is deterministic: same seed, same parameter hash") {
    IdentityCorpus c = synth_corpus(4, 6, kShape, 5);
    EmbedderConfig cfg = base_config(11);
    cfg.epochs = 3;
    EmbedderModel a = train_embedder(c, cfg);
    EmbedderModel b = train_embedder(c, cfg);
    CHECK(a.param_hash() == b.param_hash());
    cfg.seed = 12;
    EmbedderModel other = train_embedder(c, cfg);
    CHECK(other.param_hash() != a.param_hash());
}

TEST_CASE("embeddings are unit-norm and self-distance is zero") {
    IdentityCorpus c = synth_corpus(3, 4, kShape, 6);
    EmbedderModel m(base_config(4), kShape);  // untrained is enough for the contract
    const FaceImage& im = c.identities.at("id_0000").front();
    Embedding e = m.embed(im);
    CHECK(std::abs(e.norm() - 1.0) <= 1e-5);
    CHECK(std::abs(distance(e, e)) <= 1e-6);

    Embedding neg = e;
    for (auto& x : neg.v) x = -x;
    CHECK(distance(e, neg) == doctest::Approx(2.0).epsilon(1e-9));

    Embedding ex, ey;
    ex.v.assign(4, 0.0);
    ey.v.assign(4, 0.0);
    ex.v[0] = 1.0;
    ey.v[1] = 1.0;
    CHECK(distance(ex, ey) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("embed rejects shape mismatch") {
    EmbedderModel m(base_config(4), kShape);
    IdentityCorpus c = synth_corpus(1, 2, {32, 32, 3}, 6);
    CHECK_THROWS_AS(m.embed(c.identities.at("id_0000").front()), PreconditionError);
}

TEST_CASE("trained embeddings separate identities on held-out images") {
    IdentityCorpus c = synth_corpus(12, 12, kShape, 8);
    SplitSpec spec{8, 4, 0, 1};
    CorpusSplit split = split_corpus(c, spec);
    EmbedderConfig cfg = base_config(3);
    cfg.epochs = 20;
    EmbedderModel m = train_embedder(split.inference, cfg);

    double intra = 0.0, inter = 0.0;
    long n_intra = 0, n_inter = 0;
    std::vector<std::pair<std::string, Embedding>> all;
    for (const auto& [id, imgs] : split.test.identities)
        for (const FaceImage& im : imgs) all.emplace_back(id, m.embed(im));
    for (std::size_t i = 0; i < all.size(); ++i)
        for (std::size_t j = i + 1; j < all.size(); ++j) {
            double d = distance(all[i].second, all[j].second);
            if (all[i].first == all[j].first) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    CHECK(intra / n_intra < inter / n_inter);
}

TEST_CASE("pixel gradient of a distance head matches finite differences") {
    IdentityCorpus c = synth_corpus(2, 3, kShape, 10);
    EmbedderConfig cfg = base_config(7);
    cfg.epochs = 4;
    EmbedderModel m = train_embedder(c, cfg);
    const FaceImage& img = c.identities.at("id_0000").front();
    Embedding fixed = m.embed(c.identities.at("id_0001").front());
    Tensor target({1, cfg.d}, std::vector<double>(fixed.v.begin(), fixed.v.end()));

    Tensor x0 = image_to_nchw(img);
    auto head = [&](Tape& t, Tape::Id x) {
        ParamMap pm(t, false);
        Tape::Id e = m.embed_on_tape(t, x, pm);
        Tape::Id cos = t.rows_dot(e, t.constant(target));
        return t.mean_all(t.affine(cos, -1.0, 1.0));  // l_d(embed(x), c)
    };

    Tape t;
    Tape::Id x = t.leaf(x0);
    t.backward(head(t, x));

    auto f = [&](const Tensor& xt) {
        Tape t2;
        return t2.val(head(t2, t2.constant(xt))).v[0];
    };
    Rng rng(19);
    int checked = 0;
    for (int k = 0; k < 10 && checked < 10; ++k) {
        int idx = static_cast<int>(rng.uniform_int(0, x0.numel() - 1));
        double fd = finite_diff(f, x0, idx, 1e-3);  // 1e-3 in [0,1] pixel units
        double an = t.grad(x).v[static_cast<std::size_t>(idx)];
        if (std::abs(fd) < 1e-8 && std::abs(an) < 1e-8) continue;  // dead pixel
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-2);
        ++checked;
    }
    CHECK(checked > 0);
}

TEST_CASE("the three architectures are structurally distinct") {
    EmbedderConfig cfg = base_config(5);
    std::vector<std::size_t> param_counts;
    for (Arch arch : {Arch::small_cnn_a, Arch::small_cnn_b, Arch::small_cnn_c}) {
        cfg.arch = arch;
        EmbedderModel m(cfg, kShape);
        std::size_t n = 0;
        for (auto& [_, p] : m.named_params()) n += static_cast<std::size_t>(p->numel());
        param_counts.push_back(n);
    }
    CHECK(param_counts[0] != param_counts[1]);
    CHECK(param_counts[1] != param_counts[2]);
    CHECK(param_counts[0] != param_counts[2]);
}

TEST_CASE("model file round-trips with content hash verification") {
    IdentityCorpus c = synth_corpus(3, 4, kShape, 12);
    EmbedderConfig cfg = base_config(6);
    cfg.epochs = 2;
    EmbedderModel m = train_embedder(c, cfg);

    fs::path dir = fs::temp_directory_path() / "advcloak_embedder_io";
    fs::create_directories(dir);
    std::string path = (dir / "embedder.acm").string();
    m.save(path);
    EmbedderModel loaded = EmbedderModel::load(path);
    CHECK(loaded.param_hash() == m.param_hash());
    CHECK(loaded.train_accuracy() == doctest::Approx(m.train_accuracy()));
    CHECK(arch_name(loaded.config().arch) == arch_name(m.config().arch));
    fs::remove_all(dir);
}
