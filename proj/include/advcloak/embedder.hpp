#pragma once

#include <string>
#include <vector>

#include "advcloak/dataio.hpp"
#include "advcloak/nets.hpp"

namespace advcloak {

// Unit-norm feature vector f(X).
struct Embedding {
    std::vector<double> v;

    double norm() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    }
};

// Cosine distance on unit vectors: 1 - <a,b>, in [0,2].
double distance(const Embedding& a, const Embedding& b);

struct EmbedderConfig {
    Arch arch = Arch::small_cnn_a;
    HeadKind head = HeadKind::softmax;
    int d = 64;
    double margin = 0.35;
    double scale = 16.0;
    int epochs = 30;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

class EmbedderModel {
public:
    EmbedderModel(const EmbedderConfig& cfg, ImageShape input);  // fresh seeded init

    // Gradient path for callers: pre-norm features and unit-norm embeddings on
    // an existing tape.
    Tape::Id features_on_tape(Tape& t, Tape::Id images, ParamMap& pm) const;
    Tape::Id embed_on_tape(Tape& t, Tape::Id images, ParamMap& pm) const;

    Embedding embed(const FaceImage& image) const;
    // Rows of the result are unit-norm embeddings, shape [N, d].
    Tensor embed_batch(const std::vector<const FaceImage*>& images) const;
    Tensor embed_batch(const std::vector<FaceImage>& images) const;

    const EmbedderConfig& config() const { return cfg_; }
    ImageShape input_shape() const { return input_; }
    double train_accuracy() const { return train_accuracy_; }
    void set_train_accuracy(double a) { train_accuracy_ = a; }

    std::uint64_t param_hash() const;
    NamedTensorRefs named_params() { return net_.named_params(); }
    NamedTensorViews named_views() const { return net_.named_views(); }

    void save(const std::string& path) const;
    static EmbedderModel load(const std::string& path);

private:
    EmbedderConfig cfg_;
    ImageShape input_;
    EmbedderNet net_;
    double train_accuracy_ = -1.0;
};

// Trains the surrogate recognition model; reports closed-set train accuracy
// through the returned model. Throws NumericError naming the epoch if the
// loss turns non-finite.
EmbedderModel train_embedder(const IdentityCorpus& corpus, const EmbedderConfig& cfg);

}  // namespace advcloak
