#include "advcloak/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <unordered_map>

#include "advcloak/errors.hpp"

namespace advcloak {

namespace {

// The norm-hinge threshold is published in the generator's [-1,1] output
// units (one unit spans 127.5 of the 0-255 scale); norm_loss takes 0-255.
constexpr double kPaperPixelUnit255 = 127.5;

std::vector<std::pair<std::string, const FaceImage*>> flatten(const IdentityCorpus& corpus) {
    std::vector<std::pair<std::string, const FaceImage*>> out;
    for (const auto& [id, imgs] : corpus.identities)
        for (const FaceImage& im : imgs) out.emplace_back(id, &im);
    return out;
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

double tape_scalar(const Tape& t, Tape::Id id) { return t.val(id).v[0]; }

double mean_row_norm_255(const Tensor& pert) {
    int n = pert.dims[0];
    std::int64_t inner = pert.numel() / n;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        const double* p = pert.v.data() + static_cast<std::size_t>(i) * inner;
        for (std::int64_t j = 0; j < inner; ++j) s += p[j] * p[j];
        acc += 255.0 * std::sqrt(s);
    }
    return acc / n;
}

struct Stage1Graph {
    GanTerms gan;
    Tape::Id norm, adv, total, pert, fake;
};

// Generator-side stage-I graph; D and f are frozen, G trainable when `gpm` is.
Stage1Graph stage1_gen_graph(Tape& t, const GeneratorModel& gen, const DiscriminatorModel& disc,
                             const EmbedderModel& embedder, const Tensor& batch,
                             const StageIConfig& cfg, ParamMap& gpm) {
    Stage1Graph g;
    Tape::Id x = t.constant(batch);
    g.pert = gen.forward(t, x, gpm);
    g.fake = t.clip01(t.add(x, g.pert));
    ParamMap dpm(t, false);
    g.gan = gan_loss_image(t, disc, dpm, x, g.fake);
    g.norm = norm_loss(t, g.pert, cfg.epsilon * kPaperPixelUnit255);
    g.adv = adv_loss_image(t, embedder, batch, g.fake);
    g.total = t.lincomb({g.gan.gen_term, g.norm, g.adv}, {1.0, cfg.lambda_norm, -cfg.lambda_adv});
    return g;
}

struct Stage2Graph {
    GanTerms gan;
    Tape::Id norm, adv, total;
    double mean_mask_norm_255 = 0.0;
};

Stage2Graph stage2_gen_graph(Tape& t, const GeneratorModel& gen, const DiscriminatorModel& disc,
                             const EmbedderModel& embedder,
                             const std::vector<const std::vector<FaceImage>*>& identity_images,
                             const std::vector<const FeatureHull*>& hulls,
                             const StageIIConfig& cfg, ParamMap& gpm) {
    Stage2Graph g;
    std::vector<IdentityGanBatch> gan_batches;
    std::vector<IdentityAdvBatch> adv_batches;
    std::vector<Tape::Id> norm_parts;
    for (std::size_t k = 0; k < identity_images.size(); ++k) {
        std::vector<const FaceImage*> ptrs;
        for (int i = 0; i < cfg.n_per_identity; ++i)
            ptrs.push_back(&(*identity_images[k])[static_cast<std::size_t>(i)]);
        Tensor originals = batch_to_nchw(ptrs);
        Tape::Id x = t.constant(originals);
        Tape::Id pert = gen.forward(t, x, gpm);
        Tape::Id mask = t.mean_over_n(pert);  // Delta^k
        Tape::Id fake = t.clip01(t.add_broadcast_n(x, mask));
        norm_parts.push_back(
            t.mean_all(t.max_const(t.affine(t.l2_norm_rows(mask), 255.0, 0.0), cfg.epsilon * kPaperPixelUnit255)));
        g.mean_mask_norm_255 += 255.0 * t.val(mask).l2_norm();
        gan_batches.push_back({x, fake});
        adv_batches.push_back({std::move(originals), fake, hulls[k]});
    }
    g.mean_mask_norm_255 /= static_cast<double>(identity_images.size());
    ParamMap dpm(t, false);
    g.gan = gan_loss_class(t, disc, dpm, gan_batches);
    std::vector<double> coeffs(norm_parts.size(), 1.0 / static_cast<double>(norm_parts.size()));
    g.norm = t.lincomb(norm_parts, coeffs);
    g.adv = adv_loss_class(t, embedder, adv_batches, cfg.adv_kind, cfg.hull_target);
    g.total = t.lincomb({g.gan.gen_term, g.norm, g.adv}, {1.0, cfg.lambda_norm, -cfg.lambda_adv});
    return g;
}

void record_consumed(std::set<std::string>& sink, const std::string& identity,
                     const FaceImage& im) {
    sink.insert(identity + "/" + im.name);
}

}  // namespace

std::string TrainingLog::to_jsonl() const {
    std::ostringstream os;
    for (const TrainLogRecord& r : records) {
        nlohmann::json j{{"step", r.step},
                         {"disc_term", r.disc_term},
                         {"gen_gan", r.gen_gan},
                         {"norm_term", r.norm_term},
                         {"adv_term", r.adv_term},
                         {"gen_total", r.gen_total},
                         {"mean_pert_norm_255", r.mean_pert_norm_255}};
        if (r.val_protection >= 0.0) j["val_protection"] = r.val_protection;
        os << j.dump() << "\n";
    }
    return os.str();
}

void TrainingLog::write(const std::string& path) const { write_text_file(path, to_jsonl()); }

std::vector<const FaceImage*> stage1_batch(const IdentityCorpus& corpus, const StageIConfig& cfg,
                                           int step) {
    auto all = flatten(corpus);
    int n = static_cast<int>(all.size());
    int steps_per_epoch = ceil_div(n, cfg.batch_size);
    int epoch = step / steps_per_epoch;
    int pos = step % steps_per_epoch;
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(derive_seed(cfg.seed, "stage1/epoch/" + std::to_string(epoch)));
    rng.shuffle(order);
    std::vector<const FaceImage*> batch;
    for (int i = pos * cfg.batch_size; i < std::min(n, (pos + 1) * cfg.batch_size); ++i)
        batch.push_back(all[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].second);
    return batch;
}

std::vector<std::string> stage2_identity_batch(const IdentityCorpus& corpus,
                                               const StageIIConfig& cfg, int step) {
    std::vector<std::string> ids;
    for (const auto& [id, _] : corpus.identities) ids.push_back(id);
    int k = static_cast<int>(ids.size());
    int steps_per_epoch = ceil_div(k, cfg.identities_per_batch);
    int epoch = step / steps_per_epoch;
    int pos = step % steps_per_epoch;
    Rng rng(derive_seed(cfg.seed, "stage2/epoch/" + std::to_string(epoch)));
    rng.shuffle(ids);
    std::vector<std::string> batch;
    for (int i = pos * cfg.identities_per_batch;
         i < std::min(k, (pos + 1) * cfg.identities_per_batch); ++i)
        batch.push_back(ids[static_cast<std::size_t>(i)]);
    return batch;
}

StageResult train_stage1(const IdentityCorpus& corpus, const EmbedderModel& embedder,
                         const StageIConfig& cfg, const TrainerHooks* hooks) {
    if (corpus.identities.empty()) throw PreconditionError("train_stage1: empty corpus");
    if (embedder.train_accuracy() < 0.0)
        throw PreconditionError("train_stage1: embedder has not been trained");

    GeneratorConfig gcfg = cfg.generator;
    gcfg.epsilon = cfg.epsilon;
    gcfg.seed = derive_seed(cfg.seed, "stage1/generator");
    GeneratorModel gen(gcfg, corpus.image_shape, StageTag::I);
    DiscriminatorModel disc(corpus.image_shape, derive_seed(cfg.seed, "stage1/discriminator"),
                            StageTag::I);

    std::vector<Tensor*> gparams, dparams;
    for (auto& [_, p] : gen.named_params()) gparams.push_back(p);
    for (auto& [_, p] : disc.named_params()) dparams.push_back(p);
    Adam gopt(gparams, cfg.learning_rate, cfg.beta1, cfg.beta2);
    Adam dopt(dparams, cfg.learning_rate, cfg.beta1, cfg.beta2);

    auto flat = flatten(corpus);
    int n = static_cast<int>(flat.size());
    int steps_per_epoch = ceil_div(n, cfg.batch_size);
    int total_steps = cfg.epochs * steps_per_epoch;

    std::unordered_map<const FaceImage*, std::string> image_tags;
    for (const auto& [id, im] : flat) image_tags.emplace(im, id + "/" + im->name);

    TrainingLog log;
    std::set<std::string> consumed;
    std::string cfg_hash;
    {
        std::ostringstream os;
        os << cfg.learning_rate << "|" << cfg.epochs << "|" << cfg.batch_size << "|" << cfg.seed;
        cfg_hash = hash_hex(fnv1a64(os.str()));
    }

    for (int step = 0; step < total_steps; ++step) {
        if (cfg.checkpoint_interval > 0 && !cfg.checkpoint_dir.empty() &&
            step % cfg.checkpoint_interval == 0)
            save_checkpoint(cfg.checkpoint_dir + "/stage1_step" + std::to_string(step) + ".ckpt",
                            gen, disc, step, cfg_hash);

        auto batch_ptrs = stage1_batch(corpus, cfg, step);
        for (const FaceImage* b : batch_ptrs) consumed.insert(image_tags.at(b));
        Tensor batch = batch_to_nchw(batch_ptrs);

        TrainLogRecord rec;
        rec.step = step;
        try {
            // Both loss graphs read the same pre-step parameter snapshot, so
            // every logged term is recomputable from the step's checkpoint;
            // the two updates are then applied together.
            Tape td;
            ParamMap gpm_frozen(td, false);
            ParamMap dpm(td, true);
            {
                Tape::Id x = td.constant(batch);
                Tape::Id fake = td.clip01(td.add(x, gen.forward(td, x, gpm_frozen)));
                GanTerms terms = gan_loss_image(td, disc, dpm, x, fake);
                rec.disc_term = tape_scalar(td, terms.disc_term);
                td.backward(td.affine(terms.disc_term, -1.0, 0.0));  // ascend
            }
            Tape tg;
            ParamMap gpm(tg, true);
            {
                Stage1Graph graph = stage1_gen_graph(tg, gen, disc, embedder, batch, cfg, gpm);
                rec.gen_gan = tape_scalar(tg, graph.gan.gen_term);
                rec.norm_term = tape_scalar(tg, graph.norm);
                rec.adv_term = tape_scalar(tg, graph.adv);
                rec.gen_total = tape_scalar(tg, graph.total);
                rec.mean_pert_norm_255 = mean_row_norm_255(tg.val(graph.pert));
                if (!std::isfinite(rec.gen_total))
                    throw NumericError("non-finite generator loss");
                tg.backward(graph.total);
            }
            dopt.step(td, dpm);
            gopt.step(tg, gpm);
        } catch (const NumericError& e) {
            if (!cfg.checkpoint_dir.empty()) log.write(cfg.checkpoint_dir + "/stage1_abort.jsonl");
            throw NumericError("stage1 aborted at step " + std::to_string(step) + ": " + e.what());
        }
        if (hooks && hooks->validation && cfg.val_interval > 0 && step % cfg.val_interval == 0)
            rec.val_protection = hooks->validation(gen);
        log.records.push_back(rec);
    }
    log.consumed_images.assign(consumed.begin(), consumed.end());
    return StageResult{std::move(gen), std::move(disc), std::move(log)};
}

PersonMask aggregate_mask(const GeneratorModel& gen, const std::vector<FaceImage>& images,
                          const std::string& identity, const std::string& method) {
    if (images.empty()) throw PreconditionError("aggregate_mask: empty image list");
    std::vector<const FaceImage*> ptrs;
    ptrs.reserve(images.size());
    for (const auto& im : images) ptrs.push_back(&im);
    Tensor perts = gen.generate_batch_nchw(ptrs);
    int n = perts.dims[0];
    std::int64_t inner = perts.numel() / n;

    PersonMask mask;
    mask.identity = identity;
    mask.n_images = n;
    mask.generator_hash = gen.param_hash();
    mask.method = method;
    mask.delta.shape = images[0].shape;
    mask.delta.v.assign(static_cast<std::size_t>(inner), 0.0);
    Tensor avg({1, perts.dims[1], perts.dims[2], perts.dims[3]});
    for (int i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < inner; ++j)
            avg.v[static_cast<std::size_t>(j)] += perts.v[static_cast<std::size_t>(i * inner + j)];
    for (auto& e : avg.v) e /= n;
    mask.delta = nchw_slice_to_perturbation(avg, 0);
    return mask;
}

StageResult train_stage2(const IdentityCorpus& corpus, const EmbedderModel& embedder,
                         const GeneratorModel& init_gen, const DiscriminatorModel& init_disc,
                         const StageIIConfig& cfg, const TrainerHooks* hooks) {
    if (cfg.n_per_identity < 1)
        throw PreconditionError("train_stage2: n_per_identity must be >= 1");
    if (cfg.adv_kind != AdvObjectiveKind::plain && cfg.n_per_identity < 2)
        throw PreconditionError("train_stage2: hull objectives need n_per_identity >= 2");
    std::vector<std::string> short_ids;
    for (const auto& [id, imgs] : corpus.identities)
        if (static_cast<int>(imgs.size()) < cfg.n_per_identity) short_ids.push_back(id);
    if (!short_ids.empty()) {
        std::ostringstream os;
        os << "train_stage2: identities with fewer than " << cfg.n_per_identity << " images:";
        for (const auto& id : short_ids) os << " " << id;
        throw PreconditionError(os.str());
    }

    GeneratorModel gen = init_gen;  // warm start from stage I
    DiscriminatorModel disc = init_disc;
    gen.set_stage(StageTag::II);
    disc.set_stage(StageTag::II);

    TrainingLog log;
    if (cfg.epochs == 0) return StageResult{std::move(gen), std::move(disc), std::move(log)};

    // Embedder frozen: per-identity hulls are fixed for the whole stage.
    std::map<std::string, FeatureHull> hulls;
    if (cfg.adv_kind != AdvObjectiveKind::plain) {
        HullKind hk = cfg.adv_kind == AdvObjectiveKind::affine  ? HullKind::affine
                      : cfg.adv_kind == AdvObjectiveKind::center ? HullKind::center
                                                                 : HullKind::convex;
        for (const auto& [id, imgs] : corpus.identities) {
            std::vector<const FaceImage*> ptrs;
            for (int i = 0; i < cfg.n_per_identity; ++i)
                ptrs.push_back(&imgs[static_cast<std::size_t>(i)]);
            Tensor e = embedder.embed_batch(ptrs);
            Eigen::MatrixXd anchors(e.dims[0], e.dims[1]);
            for (int i = 0; i < e.dims[0]; ++i)
                for (int j = 0; j < e.dims[1]; ++j) anchors(i, j) = e.at2(i, j);
            hulls.emplace(id, build_hull(anchors, hk, id));
        }
    }

    std::vector<Tensor*> gparams, dparams;
    for (auto& [_, p] : gen.named_params()) gparams.push_back(p);
    for (auto& [_, p] : disc.named_params()) dparams.push_back(p);
    Adam gopt(gparams, cfg.learning_rate, cfg.beta1, cfg.beta2);
    Adam dopt(dparams, cfg.learning_rate, cfg.beta1, cfg.beta2);

    int k = corpus.n_identities();
    int steps_per_epoch = ceil_div(k, cfg.identities_per_batch);
    int total_steps = cfg.epochs * steps_per_epoch;
    std::set<std::string> consumed;
    std::string cfg_hash;
    {
        std::ostringstream os;
        os << cfg.learning_rate << "|" << cfg.epochs << "|" << adv_kind_name(cfg.adv_kind) << "|"
           << cfg.seed;
        cfg_hash = hash_hex(fnv1a64(os.str()));
    }

    for (int step = 0; step < total_steps; ++step) {
        if (cfg.checkpoint_interval > 0 && !cfg.checkpoint_dir.empty() &&
            step % cfg.checkpoint_interval == 0)
            save_checkpoint(cfg.checkpoint_dir + "/stage2_step" + std::to_string(step) + ".ckpt",
                            gen, disc, step, cfg_hash);

        std::vector<std::string> ids = stage2_identity_batch(corpus, cfg, step);
        std::vector<const std::vector<FaceImage>*> identity_images;
        std::vector<const FeatureHull*> batch_hulls;
        for (const std::string& id : ids) {
            const auto& imgs = corpus.identities.at(id);
            identity_images.push_back(&imgs);
            batch_hulls.push_back(hulls.count(id) ? &hulls.at(id) : nullptr);
            for (int i = 0; i < cfg.n_per_identity; ++i)
                record_consumed(consumed, id, imgs[static_cast<std::size_t>(i)]);
        }

        TrainLogRecord rec;
        rec.step = step;
        try {
            // As in stage I: both graphs read the pre-step snapshot, updates
            // land together.
            Tape td;
            ParamMap gpm_frozen(td, false);
            ParamMap dpm(td, true);
            {
                std::vector<IdentityGanBatch> batches;
                for (const auto* imgs : identity_images) {
                    std::vector<const FaceImage*> ptrs;
                    for (int i = 0; i < cfg.n_per_identity; ++i)
                        ptrs.push_back(&(*imgs)[static_cast<std::size_t>(i)]);
                    Tape::Id x = td.constant(batch_to_nchw(ptrs));
                    Tape::Id mask = td.mean_over_n(gen.forward(td, x, gpm_frozen));
                    Tape::Id fake = td.clip01(td.add_broadcast_n(x, mask));
                    batches.push_back({x, fake});
                }
                GanTerms terms = gan_loss_class(td, disc, dpm, batches);
                rec.disc_term = tape_scalar(td, terms.disc_term);
                td.backward(td.affine(terms.disc_term, -1.0, 0.0));
            }
            Tape tg;
            ParamMap gpm(tg, true);
            {
                Stage2Graph graph = stage2_gen_graph(tg, gen, disc, embedder, identity_images,
                                                     batch_hulls, cfg, gpm);
                rec.gen_gan = tape_scalar(tg, graph.gan.gen_term);
                rec.norm_term = tape_scalar(tg, graph.norm);
                rec.adv_term = tape_scalar(tg, graph.adv);
                rec.gen_total = tape_scalar(tg, graph.total);
                rec.mean_pert_norm_255 = graph.mean_mask_norm_255;
                if (!std::isfinite(rec.gen_total))
                    throw NumericError("non-finite generator loss");
                tg.backward(graph.total);
            }
            dopt.step(td, dpm);
            gopt.step(tg, gpm);
        } catch (const NumericError& e) {
            if (!cfg.checkpoint_dir.empty()) log.write(cfg.checkpoint_dir + "/stage2_abort.jsonl");
            throw NumericError("stage2 aborted at step " + std::to_string(step) + ": " + e.what());
        }
        if (hooks && hooks->validation && cfg.val_interval > 0 && step % cfg.val_interval == 0)
            rec.val_protection = hooks->validation(gen);
        log.records.push_back(rec);
    }
    log.consumed_images.assign(consumed.begin(), consumed.end());
    return StageResult{std::move(gen), std::move(disc), std::move(log)};
}

StepLosses stage1_step_losses(const IdentityCorpus& corpus, const EmbedderModel& embedder,
                              const GeneratorModel& gen, const DiscriminatorModel& disc,
                              const StageIConfig& cfg, int step) {
    Tensor batch = batch_to_nchw(stage1_batch(corpus, cfg, step));
    StepLosses out;
    {
        Tape t;
        ParamMap gpm(t, false);
        ParamMap dpm(t, false);
        Tape::Id x = t.constant(batch);
        Tape::Id fake = t.clip01(t.add(x, gen.forward(t, x, gpm)));
        GanTerms terms = gan_loss_image(t, disc, dpm, x, fake);
        out.disc_term = tape_scalar(t, terms.disc_term);
    }
    {
        Tape t;
        ParamMap gpm(t, false);
        Stage1Graph graph = stage1_gen_graph(t, gen, disc, embedder, batch, cfg, gpm);
        out.gen_gan = tape_scalar(t, graph.gan.gen_term);
        out.norm_term = tape_scalar(t, graph.norm);
        out.adv_term = tape_scalar(t, graph.adv);
        out.gen_total = tape_scalar(t, graph.total);
        out.mean_pert_norm_255 = mean_row_norm_255(t.val(graph.pert));
    }
    return out;
}

StepLosses stage2_step_losses(const IdentityCorpus& corpus, const EmbedderModel& embedder,
                              const GeneratorModel& gen, const DiscriminatorModel& disc,
                              const StageIIConfig& cfg, int step) {
    std::map<std::string, FeatureHull> hulls;
    if (cfg.adv_kind != AdvObjectiveKind::plain) {
        HullKind hk = cfg.adv_kind == AdvObjectiveKind::affine  ? HullKind::affine
                      : cfg.adv_kind == AdvObjectiveKind::center ? HullKind::center
                                                                 : HullKind::convex;
        for (const auto& [id, imgs] : corpus.identities) {
            std::vector<const FaceImage*> ptrs;
            for (int i = 0; i < cfg.n_per_identity; ++i)
                ptrs.push_back(&imgs[static_cast<std::size_t>(i)]);
            Tensor e = embedder.embed_batch(ptrs);
            Eigen::MatrixXd anchors(e.dims[0], e.dims[1]);
            for (int i = 0; i < e.dims[0]; ++i)
                for (int j = 0; j < e.dims[1]; ++j) anchors(i, j) = e.at2(i, j);
            hulls.emplace(id, build_hull(anchors, hk, id));
        }
    }
    std::vector<std::string> ids = stage2_identity_batch(corpus, cfg, step);
    std::vector<const std::vector<FaceImage>*> identity_images;
    std::vector<const FeatureHull*> batch_hulls;
    for (const std::string& id : ids) {
        identity_images.push_back(&corpus.identities.at(id));
        batch_hulls.push_back(hulls.count(id) ? &hulls.at(id) : nullptr);
    }
    StepLosses out;
    {
        Tape t;
        ParamMap gpm(t, false);
        std::vector<IdentityGanBatch> batches;
        for (const auto* imgs : identity_images) {
            std::vector<const FaceImage*> ptrs;
            for (int i = 0; i < cfg.n_per_identity; ++i)
                ptrs.push_back(&(*imgs)[static_cast<std::size_t>(i)]);
            Tape::Id x = t.constant(batch_to_nchw(ptrs));
            Tape::Id mask = t.mean_over_n(gen.forward(t, x, gpm));
            Tape::Id fake = t.clip01(t.add_broadcast_n(x, mask));
            batches.push_back({x, fake});
        }
        ParamMap dpm(t, false);
        GanTerms terms = gan_loss_class(t, disc, dpm, batches);
        out.disc_term = tape_scalar(t, terms.disc_term);
    }
    {
        Tape t;
        ParamMap gpm(t, false);
        Stage2Graph graph =
            stage2_gen_graph(t, gen, disc, embedder, identity_images, batch_hulls, cfg, gpm);
        out.gen_gan = tape_scalar(t, graph.gan.gen_term);
        out.norm_term = tape_scalar(t, graph.norm);
        out.adv_term = tape_scalar(t, graph.adv);
        out.gen_total = tape_scalar(t, graph.total);
        out.mean_pert_norm_255 = graph.mean_mask_norm_255;
    }
    return out;
}

void save_checkpoint(const std::string& path, const GeneratorModel& gen,
                     const DiscriminatorModel& disc, int step, const std::string& config_hash) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    nlohmann::json meta{
        {"schema_version", 1},
        {"step", step},
        {"config_hash", config_hash},
        {"generator",
         {{"stage", stage_name(gen.stage())},
          {"base_channels", gen.config().base_channels},
          {"out_scale", gen.config().out_scale},
          {"epsilon", gen.config().epsilon},
          {"seed", gen.config().seed},
          {"input",
           {{"h", gen.input_shape().h}, {"w", gen.input_shape().w}, {"c", gen.input_shape().c}}}}},
        {"discriminator", {{"stage", stage_name(disc.stage())}}}};
    NamedTensorViews views = gen.named_views();
    for (auto& [n, p] : disc.named_views()) views.emplace_back(n, p);
    save_archive(path, "checkpoint", meta, views);
}

Checkpoint load_checkpoint(const std::string& path) {
    nlohmann::json meta = peek_archive(path);
    const auto& gm = meta.at("generator");
    GeneratorConfig gcfg;
    gcfg.base_channels = gm.at("base_channels").get<int>();
    gcfg.out_scale = gm.at("out_scale").get<double>();
    gcfg.epsilon = gm.at("epsilon").get<double>();
    gcfg.seed = gm.at("seed").get<std::uint64_t>();
    ImageShape shape{gm.at("input").at("h").get<int>(), gm.at("input").at("w").get<int>(),
                     gm.at("input").at("c").get<int>()};
    GeneratorModel gen(gcfg, shape, stage_from_name(gm.at("stage").get<std::string>()));
    DiscriminatorModel disc(shape, 0,
                            stage_from_name(meta.at("discriminator").at("stage").get<std::string>()));
    NamedTensorRefs refs = gen.named_params();
    for (auto& [n, p] : disc.named_params()) refs.emplace_back(n, p);
    load_archive(path, "checkpoint", refs);
    return Checkpoint{std::move(gen), std::move(disc), meta.at("step").get<int>()};
}

}  // namespace advcloak
