#pragma once

#include <map>
#include <string>
#include <vector>

#include "advcloak/tensor.hpp"

namespace advcloak {

struct ImageShape {
    int h = 32, w = 32, c = 3;
    bool operator==(const ImageShape&) const = default;
    std::int64_t numel() const { return static_cast<std::int64_t>(h) * w * c; }
};

// Channels-last (HWC) pixels in [0,1].
struct FaceImage {
    ImageShape shape;
    std::vector<double> px;
    std::string name;

    double& at(int y, int x, int ch) { return px[static_cast<std::size_t>((y * shape.w + x) * shape.c + ch)]; }
    double at(int y, int x, int ch) const { return px[static_cast<std::size_t>((y * shape.w + x) * shape.c + ch)]; }
};

struct IdentityCorpus {
    std::map<std::string, std::vector<FaceImage>> identities;  // ordered, deterministic
    ImageShape image_shape;

    int n_identities() const { return static_cast<int>(identities.size()); }
    std::int64_t total_images() const {
        std::int64_t n = 0;
        for (const auto& [_, imgs] : identities) n += static_cast<std::int64_t>(imgs.size());
        return n;
    }
};

struct SplitSpec {
    int n_inference = 10;
    int n_test = 5;
    int n_distractors = 0;
    std::uint64_t seed = 0;
};

struct CorpusSplit {
    IdentityCorpus inference;
    IdentityCorpus test;
    IdentityCorpus distractors;
};

// `<root>/<identity>/<image>.{png,jpg}`; images resized to `target`, scaled to
// [0,1], ordered lexicographically by filename.
IdentityCorpus load_corpus(const std::string& root, ImageShape target);

// Deterministic in (corpus, spec): same seed gives the identical partition.
CorpusSplit split_corpus(const IdentityCorpus& corpus, const SplitSpec& spec);

// Parametric geometric faces: per-identity ellipse/eye/mouth layout and colors,
// per-image translation, brightness and noise. Deterministic in seed.
IdentityCorpus synth_corpus(int n_identities, int n_images, ImageShape shape, std::uint64_t seed);

void write_corpus(const IdentityCorpus& corpus, const std::string& dir);

// Bit-stable text manifest: per identity, the image names in each split.
std::string split_manifest(const CorpusSplit& split);

// --- tensor bridging (HWC images <-> NCHW batches) ---
Tensor batch_to_nchw(const std::vector<const FaceImage*>& images);
Tensor batch_to_nchw(const std::vector<FaceImage>& images);
Tensor image_to_nchw(const FaceImage& image);
FaceImage nchw_slice_to_image(const Tensor& t, int n, const std::string& name = "");

}  // namespace advcloak
