#include "advcloak/embedder.hpp"

#include <nlohmann/json.hpp>

#include "advcloak/errors.hpp"

namespace advcloak {

double distance(const Embedding& a, const Embedding& b) {
    if (a.v.size() != b.v.size()) throw PreconditionError("distance: dimension mismatch");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) dot += a.v[i] * b.v[i];
    return 1.0 - dot;
}

EmbedderModel::EmbedderModel(const EmbedderConfig& cfg, ImageShape input)
    : cfg_(cfg), input_(input) {
    if (input.h % 8 || input.w % 8)
        throw PreconditionError("embedder input height/width must be divisible by 8");
    Rng rng(derive_seed(cfg.seed, "embedder/init/" + arch_name(cfg.arch)));
    net_ = EmbedderNet::make(cfg.arch, cfg.d, input, rng);
}

Tape::Id EmbedderModel::features_on_tape(Tape& t, Tape::Id images, ParamMap& pm) const {
    const Tensor& x = t.val(images);
    if (x.rank() != 4 || x.dims[1] != input_.c || x.dims[2] != input_.h || x.dims[3] != input_.w)
        throw PreconditionError("embed: image shape does not match model input shape");
    return net_.features(t, images, pm);
}

Tape::Id EmbedderModel::embed_on_tape(Tape& t, Tape::Id images, ParamMap& pm) const {
    return t.l2_normalize_rows(features_on_tape(t, images, pm));
}

Tensor EmbedderModel::embed_batch(const std::vector<const FaceImage*>& images) const {
    Tape t;
    ParamMap pm(t, false);
    Tape::Id e = embed_on_tape(t, t.constant(batch_to_nchw(images)), pm);
    return t.val(e);
}

Tensor EmbedderModel::embed_batch(const std::vector<FaceImage>& images) const {
    std::vector<const FaceImage*> ptrs;
    ptrs.reserve(images.size());
    for (const auto& im : images) ptrs.push_back(&im);
    return embed_batch(ptrs);
}

Embedding EmbedderModel::embed(const FaceImage& image) const {
    Tensor m = embed_batch(std::vector<const FaceImage*>{&image});
    Embedding e;
    e.v.assign(m.v.begin(), m.v.end());
    return e;
}

std::uint64_t EmbedderModel::param_hash() const { return tensors_hash(named_views()); }

void EmbedderModel::save(const std::string& path) const {
    nlohmann::json meta{{"schema_version", 1},
                        {"arch", arch_name(cfg_.arch)},
                        {"head", head_name(cfg_.head)},
                        {"d", cfg_.d},
                        {"margin", cfg_.margin},
                        {"scale", cfg_.scale},
                        {"epochs", cfg_.epochs},
                        {"batch_size", cfg_.batch_size},
                        {"learning_rate", cfg_.learning_rate},
                        {"seed", cfg_.seed},
                        {"input", {{"h", input_.h}, {"w", input_.w}, {"c", input_.c}}},
                        {"train_accuracy", train_accuracy_},
                        {"param_hash", hash_hex(param_hash())}};
    save_archive(path, "embedder", meta, named_views());
}

EmbedderModel EmbedderModel::load(const std::string& path) {
    nlohmann::json meta = peek_archive(path);
    EmbedderConfig cfg;
    cfg.arch = arch_from_name(meta.at("arch").get<std::string>());
    cfg.head = head_from_name(meta.at("head").get<std::string>());
    cfg.d = meta.at("d").get<int>();
    cfg.margin = meta.at("margin").get<double>();
    cfg.scale = meta.at("scale").get<double>();
    cfg.epochs = meta.at("epochs").get<int>();
    cfg.batch_size = meta.at("batch_size").get<int>();
    cfg.learning_rate = meta.at("learning_rate").get<double>();
    cfg.seed = meta.at("seed").get<std::uint64_t>();
    ImageShape shape{meta.at("input").at("h").get<int>(), meta.at("input").at("w").get<int>(),
                     meta.at("input").at("c").get<int>()};
    EmbedderModel model(cfg, shape);
    load_archive(path, "embedder", model.named_params());
    model.set_train_accuracy(meta.value("train_accuracy", -1.0));
    return model;
}

EmbedderModel train_embedder(const IdentityCorpus& corpus, const EmbedderConfig& cfg) {
    if (corpus.n_identities() < 2)
        throw PreconditionError("train_embedder requires at least 2 identities");

    EmbedderModel model(cfg, corpus.image_shape);

    std::vector<const FaceImage*> images;
    std::vector<int> labels;
    int label = 0;
    for (const auto& [id, imgs] : corpus.identities) {
        for (const FaceImage& im : imgs) {
            images.push_back(&im);
            labels.push_back(label);
        }
        ++label;
    }
    int n = static_cast<int>(images.size());
    int classes = label;

    Rng head_rng(derive_seed(cfg.seed, "embedder/head"));
    ClassifierHead head =
        ClassifierHead::make(cfg.head, classes, cfg.d, cfg.margin, cfg.scale, head_rng);

    std::vector<Tensor*> all_params;
    for (auto& [_, p] : model.named_params()) all_params.push_back(p);
    for (auto& [_, p] : head.named_params()) all_params.push_back(p);
    Adam opt(all_params, cfg.learning_rate);

    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "embedder/epoch/" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);
        for (int start = 0; start < n; start += cfg.batch_size) {
            int bsz = std::min(cfg.batch_size, n - start);
            std::vector<const FaceImage*> batch;
            std::vector<int> batch_labels;
            for (int i = 0; i < bsz; ++i) {
                int idx = order[static_cast<std::size_t>(start + i)];
                batch.push_back(images[static_cast<std::size_t>(idx)]);
                batch_labels.push_back(labels[static_cast<std::size_t>(idx)]);
            }
            Tape t;
            ParamMap pm(t, true);
            Tape::Id feat = model.features_on_tape(t, t.constant(batch_to_nchw(batch)), pm);
            Tape::Id logits = head.logits(t, feat, batch_labels, pm);
            Tape::Id loss = t.softmax_xent(logits, batch_labels);
            double lval = t.val(loss).v[0];
            if (!std::isfinite(lval))
                throw NumericError("embedder training diverged (non-finite loss) at epoch " +
                                   std::to_string(epoch));
            t.backward(loss);
            opt.step(t, pm);
        }
    }

    // Closed-set training accuracy with the nearest class direction; for the
    // softmax head the fc layer is the classifier.
    int correct = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
        int bsz = std::min(cfg.batch_size, n - start);
        std::vector<const FaceImage*> batch;
        std::vector<int> batch_labels;
        for (int i = 0; i < bsz; ++i) {
            batch.push_back(images[static_cast<std::size_t>(start + i)]);
            batch_labels.push_back(labels[static_cast<std::size_t>(start + i)]);
        }
        Tape t;
        ParamMap pm(t, false);
        Tape::Id feat = model.features_on_tape(t, t.constant(batch_to_nchw(batch)), pm);
        Tape::Id logits;
        if (cfg.head == HeadKind::softmax) {
            logits = head.fc.apply(t, feat, pm);
        } else {
            logits = t.matmul_nt(t.l2_normalize_rows(feat), t.l2_normalize_rows(pm(head.fc.w)));
        }
        const Tensor& lv = t.val(logits);
        for (int i = 0; i < bsz; ++i) {
            int best = 0;
            for (int c = 1; c < classes; ++c)
                if (lv.at2(i, c) > lv.at2(i, best)) best = c;
            if (best == batch_labels[static_cast<std::size_t>(i)]) ++correct;
        }
    }
    model.set_train_accuracy(static_cast<double>(correct) / n);
    return model;
}

}  // namespace advcloak
