#include "advcloak/advnet.hpp"

#include <nlohmann/json.hpp>

#include "advcloak/errors.hpp"

namespace advcloak {

std::string stage_name(StageTag s) { return s == StageTag::I ? "I" : "II"; }

StageTag stage_from_name(const std::string& s) {
    if (s == "I") return StageTag::I;
    if (s == "II") return StageTag::II;
    throw PreconditionError("unknown stage tag: " + s);
}

void PersonMask::save(const std::string& path) const {
    nlohmann::json meta{{"schema_version", 1},
                        {"identity", identity},
                        {"n_images", n_images},
                        {"generator_hash", hash_hex(generator_hash)},
                        {"method", method},
                        {"norm_l2_255", delta.norm_l2_255()},
                        {"shape", {{"h", delta.shape.h}, {"w", delta.shape.w}, {"c", delta.shape.c}}}};
    Tensor payload({delta.shape.h, delta.shape.w, delta.shape.c}, delta.v);
    save_archive(path, "mask", meta, {{"delta", &payload}});
}

PersonMask PersonMask::load(const std::string& path) {
    nlohmann::json meta = peek_archive(path);
    PersonMask m;
    m.identity = meta.at("identity").get<std::string>();
    m.n_images = meta.at("n_images").get<int>();
    m.generator_hash =
        std::stoull(meta.at("generator_hash").get<std::string>(), nullptr, 16);
    m.method = meta.at("method").get<std::string>();
    m.delta.shape = ImageShape{meta.at("shape").at("h").get<int>(),
                               meta.at("shape").at("w").get<int>(),
                               meta.at("shape").at("c").get<int>()};
    Tensor payload({m.delta.shape.h, m.delta.shape.w, m.delta.shape.c});
    load_archive(path, "mask", {{"delta", &payload}});
    m.delta.v = std::move(payload.v);
    return m;
}

GeneratorModel::GeneratorModel(const GeneratorConfig& cfg, ImageShape shape, StageTag stage)
    : cfg_(cfg), shape_(shape), stage_(stage) {
    if (shape.h % 8 || shape.w % 8)
        throw PreconditionError("generator input height/width must be divisible by 8");
    Rng rng(derive_seed(cfg.seed, "generator/init"));
    net_ = GeneratorNet::make(shape.c, cfg.base_channels, cfg.out_scale, rng);
}

Tape::Id GeneratorModel::forward(Tape& t, Tape::Id images, ParamMap& pm) const {
    const Tensor& x = t.val(images);
    if (x.rank() != 4 || x.dims[1] != shape_.c || x.dims[2] != shape_.h || x.dims[3] != shape_.w)
        throw PreconditionError("generate: image shape does not match generator input shape");
    return net_.forward(t, images, pm);
}

Tensor GeneratorModel::generate_batch_nchw(const std::vector<const FaceImage*>& images) const {
    Tape t;
    ParamMap pm(t, false);
    Tape::Id p = forward(t, t.constant(batch_to_nchw(images)), pm);
    return t.val(p);
}

PerturbationMap GeneratorModel::generate(const FaceImage& image) const {
    Tensor p = generate_batch_nchw({&image});
    return nchw_slice_to_perturbation(p, 0);
}

std::uint64_t GeneratorModel::param_hash() const { return tensors_hash(named_views()); }

void GeneratorModel::save(const std::string& path, const std::string& training_config_hash) const {
    nlohmann::json meta{{"schema_version", 1},
                        {"stage", stage_name(stage_)},
                        {"base_channels", cfg_.base_channels},
                        {"out_scale", cfg_.out_scale},
                        {"epsilon", cfg_.epsilon},
                        {"seed", cfg_.seed},
                        {"input", {{"h", shape_.h}, {"w", shape_.w}, {"c", shape_.c}}},
                        {"training_config_hash", training_config_hash},
                        {"param_hash", hash_hex(param_hash())}};
    save_archive(path, "generator", meta, named_views());
}

GeneratorModel GeneratorModel::load(const std::string& path) {
    nlohmann::json meta = peek_archive(path);
    GeneratorConfig cfg;
    cfg.base_channels = meta.at("base_channels").get<int>();
    cfg.out_scale = meta.at("out_scale").get<double>();
    cfg.epsilon = meta.at("epsilon").get<double>();
    cfg.seed = meta.at("seed").get<std::uint64_t>();
    ImageShape shape{meta.at("input").at("h").get<int>(), meta.at("input").at("w").get<int>(),
                     meta.at("input").at("c").get<int>()};
    GeneratorModel g(cfg, shape, stage_from_name(meta.at("stage").get<std::string>()));
    load_archive(path, "generator", g.named_params());
    return g;
}

DiscriminatorModel::DiscriminatorModel(ImageShape shape, std::uint64_t seed, StageTag stage)
    : shape_(shape), stage_(stage), seed_(seed) {
    Rng rng(derive_seed(seed, "discriminator/init"));
    net_ = DiscriminatorNet::make(shape.c, rng);
}

Tape::Id DiscriminatorModel::logits(Tape& t, Tape::Id images, ParamMap& pm) const {
    const Tensor& x = t.val(images);
    if (x.rank() != 4 || x.dims[1] != shape_.c || x.dims[2] != shape_.h || x.dims[3] != shape_.w)
        throw PreconditionError("discriminate: image shape does not match discriminator input");
    return net_.logits(t, images, pm);
}

Tape::Id DiscriminatorModel::prob(Tape& t, Tape::Id images, ParamMap& pm) const {
    return t.sigmoid(logits(t, images, pm));
}

double DiscriminatorModel::discriminate(const FaceImage& image) const {
    Tape t;
    ParamMap pm(t, false);
    Tape::Id p = prob(t, t.constant(image_to_nchw(image)), pm);
    return t.val(p).v[0];
}

std::uint64_t DiscriminatorModel::param_hash() const { return tensors_hash(named_views()); }

void DiscriminatorModel::save(const std::string& path,
                              const std::string& training_config_hash) const {
    nlohmann::json meta{{"schema_version", 1},
                        {"stage", stage_name(stage_)},
                        {"seed", seed_},
                        {"input", {{"h", shape_.h}, {"w", shape_.w}, {"c", shape_.c}}},
                        {"training_config_hash", training_config_hash},
                        {"param_hash", hash_hex(param_hash())}};
    save_archive(path, "discriminator", meta, named_views());
}

DiscriminatorModel DiscriminatorModel::load(const std::string& path) {
    nlohmann::json meta = peek_archive(path);
    ImageShape shape{meta.at("input").at("h").get<int>(), meta.at("input").at("w").get<int>(),
                     meta.at("input").at("c").get<int>()};
    DiscriminatorModel d(shape, meta.at("seed").get<std::uint64_t>(),
                         stage_from_name(meta.at("stage").get<std::string>()));
    load_archive(path, "discriminator", d.named_params());
    return d;
}

FaceImage apply_perturbation(const FaceImage& image, const PerturbationMap& pert) {
    if (!(image.shape == pert.shape))
        throw PreconditionError("apply_perturbation: shape mismatch");
    FaceImage out = image;
    for (std::size_t i = 0; i < out.px.size(); ++i)
        out.px[i] = std::clamp(image.px[i] + pert.v[i], 0.0, 1.0);
    return out;
}

PerturbationMap nchw_slice_to_perturbation(const Tensor& t, int n) {
    PerturbationMap p;
    p.shape = ImageShape{t.dims[2], t.dims[3], t.dims[1]};
    p.v.resize(static_cast<std::size_t>(p.shape.numel()));
    for (int y = 0; y < p.shape.h; ++y)
        for (int x = 0; x < p.shape.w; ++x)
            for (int ch = 0; ch < p.shape.c; ++ch)
                p.v[static_cast<std::size_t>((y * p.shape.w + x) * p.shape.c + ch)] =
                    t.at4(n, ch, y, x);
    return p;
}

}  // namespace advcloak
