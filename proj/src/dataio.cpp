#include "advcloak/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <sstream>

#include "advcloak/errors.hpp"
#include "advcloak/rng.hpp"

namespace fs = std::filesystem;

namespace advcloak {

namespace {

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

FaceImage decode_image(const fs::path& path, ImageShape target) {
    cv::Mat raw = cv::imread(path.string(),
                             target.c == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
    if (raw.empty()) throw IoError("unreadable image: " + path.string());
    cv::Mat resized;
    if (raw.rows != target.h || raw.cols != target.w)
        cv::resize(raw, resized, cv::Size(target.w, target.h), 0, 0, cv::INTER_AREA);
    else
        resized = raw;

    FaceImage img;
    img.shape = target;
    img.name = path.filename().string();
    img.px.resize(static_cast<std::size_t>(target.numel()));
    for (int y = 0; y < target.h; ++y)
        for (int x = 0; x < target.w; ++x) {
            if (target.c == 1) {
                img.at(y, x, 0) = resized.at<unsigned char>(y, x) / 255.0;
            } else {
                cv::Vec3b bgr = resized.at<cv::Vec3b>(y, x);
                img.at(y, x, 0) = bgr[2] / 255.0;  // stored RGB
                img.at(y, x, 1) = bgr[1] / 255.0;
                img.at(y, x, 2) = bgr[0] / 255.0;
            }
        }
    return img;
}

void validate_corpus(const IdentityCorpus& corpus, const std::string& origin) {
    for (const auto& [id, imgs] : corpus.identities) {
        if (imgs.size() < 2)
            throw PreconditionError("identity with fewer than 2 images: " + origin + "/" + id);
        for (const FaceImage& im : imgs) {
            if (!(im.shape == corpus.image_shape))
                throw PreconditionError("inconsistent image shape under " + origin + "/" + id);
            for (double p : im.px)
                if (!(p >= 0.0 && p <= 1.0))
                    throw NumericError("pixel out of [0,1] in " + origin + "/" + id + "/" + im.name);
        }
    }
}

}  // namespace

IdentityCorpus load_corpus(const std::string& root, ImageShape target) {
    fs::path rp(root);
    if (!fs::exists(rp)) throw IoError("corpus root not found: " + root);
    if (!fs::is_directory(rp)) throw IoError("corpus root is not a directory: " + root);

    std::vector<fs::path> id_dirs;
    for (const auto& e : fs::directory_iterator(rp))
        if (e.is_directory()) id_dirs.push_back(e.path());
    std::sort(id_dirs.begin(), id_dirs.end());
    if (id_dirs.empty()) throw PreconditionError("no identities found in " + root);

    IdentityCorpus corpus;
    corpus.image_shape = target;
    for (const fs::path& dir : id_dirs) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());  // lexicographic ordering defines image index
        std::vector<FaceImage> imgs;
        imgs.reserve(files.size());
        for (const fs::path& f : files) imgs.push_back(decode_image(f, target));
        corpus.identities.emplace(dir.filename().string(), std::move(imgs));
    }
    validate_corpus(corpus, root);
    return corpus;
}

CorpusSplit split_corpus(const IdentityCorpus& corpus, const SplitSpec& spec) {
    if (spec.n_inference < 1 || spec.n_test < 1)
        throw PreconditionError("split spec requires n_inference >= 1 and n_test >= 1");
    if (spec.n_distractors < 0 || spec.n_distractors >= corpus.n_identities())
        throw PreconditionError("n_distractors must leave at least one split identity");

    std::vector<std::string> ids;
    ids.reserve(corpus.identities.size());
    for (const auto& [id, _] : corpus.identities) ids.push_back(id);
    Rng rng(derive_seed(spec.seed, "split/distractors"));
    rng.shuffle(ids);
    std::vector<std::string> distractor_ids(ids.begin(), ids.begin() + spec.n_distractors);
    std::vector<std::string> split_ids(ids.begin() + spec.n_distractors, ids.end());
    std::sort(split_ids.begin(), split_ids.end());

    std::vector<std::string> short_ids;
    for (const std::string& id : split_ids) {
        const auto& imgs = corpus.identities.at(id);
        if (static_cast<int>(imgs.size()) < spec.n_inference + spec.n_test) short_ids.push_back(id);
    }
    if (!short_ids.empty()) {
        std::ostringstream os;
        os << "identities with fewer than " << (spec.n_inference + spec.n_test) << " images:";
        for (const auto& id : short_ids) os << " " << id;
        throw PreconditionError(os.str());
    }

    CorpusSplit out;
    out.inference.image_shape = out.test.image_shape = out.distractors.image_shape =
        corpus.image_shape;
    for (const std::string& id : distractor_ids)
        out.distractors.identities.emplace(id, corpus.identities.at(id));
    for (const std::string& id : split_ids) {
        const auto& imgs = corpus.identities.at(id);
        std::vector<int> idx(imgs.size());
        for (std::size_t i = 0; i < imgs.size(); ++i) idx[i] = static_cast<int>(i);
        Rng per_id(derive_seed(spec.seed, "split/images/" + id));
        per_id.shuffle(idx);
        std::vector<int> inf_idx(idx.begin(), idx.begin() + spec.n_inference);
        std::vector<int> test_idx(idx.begin() + spec.n_inference,
                                  idx.begin() + spec.n_inference + spec.n_test);
        std::sort(inf_idx.begin(), inf_idx.end());
        std::sort(test_idx.begin(), test_idx.end());
        std::vector<FaceImage> inf, tst;
        for (int i : inf_idx) inf.push_back(imgs[static_cast<std::size_t>(i)]);
        for (int i : test_idx) tst.push_back(imgs[static_cast<std::size_t>(i)]);
        out.inference.identities.emplace(id, std::move(inf));
        out.test.identities.emplace(id, std::move(tst));
    }
    return out;
}

namespace {

struct IdentityFaceParams {
    double cx, cy, rx, ry;        // face ellipse, in unit coordinates
    double bg[3], face[3], eye[3], mouth[3];
    double eye_dx, eye_y, eye_r;
    double mouth_y, mouth_rx, mouth_ry;
    // identity-specific oriented texture on the face region
    double stripe_angle, stripe_freq, stripe_phase, stripe_amp;
};

IdentityFaceParams sample_identity(Rng& rng) {
    IdentityFaceParams p;
    p.cx = rng.uniform(0.38, 0.62);
    p.cy = rng.uniform(0.38, 0.62);
    p.rx = rng.uniform(0.20, 0.42);
    p.ry = rng.uniform(0.24, 0.46);
    for (int ch = 0; ch < 3; ++ch) {
        p.bg[ch] = rng.uniform(0.05, 0.45);
        p.face[ch] = rng.uniform(0.35, 0.95);
        p.eye[ch] = rng.uniform(0.0, 0.6);
        p.mouth[ch] = rng.uniform(0.0, 0.9);
    }
    p.eye_dx = rng.uniform(0.08, 0.20);
    p.eye_y = rng.uniform(-0.20, -0.04);
    p.eye_r = rng.uniform(0.03, 0.08);
    p.mouth_y = rng.uniform(0.08, 0.22);
    p.mouth_rx = rng.uniform(0.07, 0.18);
    p.mouth_ry = rng.uniform(0.02, 0.07);
    p.stripe_angle = rng.uniform(0.0, 3.14159265);
    p.stripe_freq = rng.uniform(3.0, 9.0);
    p.stripe_phase = rng.uniform(0.0, 6.2831853);
    p.stripe_amp = rng.uniform(0.08, 0.30);
    return p;
}

FaceImage render_face(const IdentityFaceParams& p, ImageShape shape, Rng& rng,
                      const std::string& name) {
    double tx = rng.uniform(-0.06, 0.06);
    double ty = rng.uniform(-0.06, 0.06);
    double brightness = rng.uniform(0.88, 1.12);
    double noise_sigma = 0.02;

    FaceImage img;
    img.shape = shape;
    img.name = name;
    img.px.resize(static_cast<std::size_t>(shape.numel()));

    double cx = p.cx + tx, cy = p.cy + ty;
    for (int y = 0; y < shape.h; ++y) {
        for (int x = 0; x < shape.w; ++x) {
            double u = (x + 0.5) / shape.w;
            double v = (y + 0.5) / shape.h;
            const double* color = p.bg;
            double texture = 1.0;
            double fe = ((u - cx) / p.rx) * ((u - cx) / p.rx) +
                        ((v - cy) / p.ry) * ((v - cy) / p.ry);
            if (fe <= 1.0) {
                color = p.face;
                double axis = (u - cx) * std::cos(p.stripe_angle) +
                              (v - cy) * std::sin(p.stripe_angle);
                texture = 1.0 + p.stripe_amp *
                                    std::sin(2.0 * 3.14159265 * p.stripe_freq * axis +
                                             p.stripe_phase);
            }
            for (int s : {-1, 1}) {
                double ex = cx + s * p.eye_dx, ey = cy + p.eye_y;
                if ((u - ex) * (u - ex) + (v - ey) * (v - ey) <= p.eye_r * p.eye_r) {
                    color = p.eye;
                    texture = 1.0;
                }
            }
            double mu = (u - cx) / p.mouth_rx, mv = (v - (cy + p.mouth_y)) / p.mouth_ry;
            if (mu * mu + mv * mv <= 1.0) {
                color = p.mouth;
                texture = 1.0;
            }
            for (int ch = 0; ch < shape.c; ++ch) {
                double val = color[ch % 3] * texture * brightness + rng.normal(0.0, noise_sigma);
                img.at(y, x, ch) = std::clamp(val, 0.0, 1.0);
            }
        }
    }
    return img;
}

}  // namespace

IdentityCorpus synth_corpus(int n_identities, int n_images, ImageShape shape, std::uint64_t seed) {
    if (n_identities < 1 || n_images < 1)
        throw PreconditionError("synth_corpus requires n_identities >= 1 and n_images >= 1");

    IdentityCorpus corpus;
    corpus.image_shape = shape;
    for (int k = 0; k < n_identities; ++k) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "id_%04d", k);
        Rng id_rng(derive_seed(seed, std::string("synth/identity/") + idbuf));
        IdentityFaceParams params = sample_identity(id_rng);
        std::vector<FaceImage> imgs;
        imgs.reserve(static_cast<std::size_t>(n_images));
        for (int i = 0; i < n_images; ++i) {
            char nbuf[24];
            std::snprintf(nbuf, sizeof(nbuf), "img_%03d.png", i);
            imgs.push_back(render_face(params, shape, id_rng, nbuf));
        }
        corpus.identities.emplace(idbuf, std::move(imgs));
    }
    return corpus;
}

void write_corpus(const IdentityCorpus& corpus, const std::string& dir) {
    fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create corpus dir: " + dir);
    for (const auto& [id, imgs] : corpus.identities) {
        fs::create_directories(root / id, ec);
        if (ec) throw IoError("cannot create identity dir: " + (root / id).string());
        for (const FaceImage& im : imgs) {
            cv::Mat mat(im.shape.h, im.shape.w, im.shape.c == 1 ? CV_8UC1 : CV_8UC3);
            for (int y = 0; y < im.shape.h; ++y)
                for (int x = 0; x < im.shape.w; ++x) {
                    auto q = [&](int ch) {
                        return static_cast<unsigned char>(
                            std::lround(std::clamp(im.at(y, x, ch), 0.0, 1.0) * 255.0));
                    };
                    if (im.shape.c == 1)
                        mat.at<unsigned char>(y, x) = q(0);
                    else
                        mat.at<cv::Vec3b>(y, x) = cv::Vec3b(q(2), q(1), q(0));  // RGB -> BGR
                }
            std::string out = (root / id / im.name).string();
            if (!cv::imwrite(out, mat)) throw IoError("cannot write image: " + out);
        }
    }
}

std::string split_manifest(const CorpusSplit& split) {
    std::ostringstream os;
    os << "# split manifest v1\n";
    auto section = [&](const char* tag, const IdentityCorpus& c) {
        for (const auto& [id, imgs] : c.identities) {
            os << tag << " " << id << ":";
            for (const FaceImage& im : imgs) os << " " << im.name;
            os << "\n";
        }
    };
    section("inference", split.inference);
    section("test", split.test);
    section("distractor", split.distractors);
    return os.str();
}

Tensor batch_to_nchw(const std::vector<const FaceImage*>& images) {
    if (images.empty()) throw PreconditionError("batch_to_nchw: empty batch");
    ImageShape s = images[0]->shape;
    Tensor t({static_cast<int>(images.size()), s.c, s.h, s.w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const FaceImage& im = *images[n];
        if (!(im.shape == s)) throw PreconditionError("batch_to_nchw: mixed shapes");
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x)
                for (int ch = 0; ch < s.c; ++ch)
                    t.at4(static_cast<int>(n), ch, y, x) = im.at(y, x, ch);
    }
    return t;
}

Tensor batch_to_nchw(const std::vector<FaceImage>& images) {
    std::vector<const FaceImage*> ptrs;
    ptrs.reserve(images.size());
    for (const auto& im : images) ptrs.push_back(&im);
    return batch_to_nchw(ptrs);
}

Tensor image_to_nchw(const FaceImage& image) { return batch_to_nchw({&image}); }

FaceImage nchw_slice_to_image(const Tensor& t, int n, const std::string& name) {
    FaceImage im;
    im.shape = ImageShape{t.dims[2], t.dims[3], t.dims[1]};
    im.name = name;
    im.px.resize(static_cast<std::size_t>(im.shape.numel()));
    for (int y = 0; y < im.shape.h; ++y)
        for (int x = 0; x < im.shape.w; ++x)
            for (int ch = 0; ch < im.shape.c; ++ch) im.at(y, x, ch) = t.at4(n, ch, y, x);
    return im;
}

}  // namespace advcloak
