#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advcloak/losses.hpp"

namespace advcloak {

struct StageIConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.5, beta2 = 0.9;
    double lambda_norm = 1.0;
    double lambda_adv = 10.0;
    double epsilon = 3.0;  // 0-255 scale
    int epochs = 10;
    int batch_size = 32;
    std::uint64_t seed = 0;
    GeneratorConfig generator;  // architecture knobs; generator seed derives from `seed`
    int checkpoint_interval = 0;  // steps; 0 disables
    std::string checkpoint_dir;
    int val_interval = 0;  // steps between validation-hook calls; 0 disables
};

struct StageIIConfig {
    // The published person-specific rate (2e-8) is exposed as the "paper"
    // preset; the desk-scale default keeps fine-tuning measurable.
    double learning_rate = 1e-5;
    double beta1 = 0.5, beta2 = 0.9;
    double lambda_norm = 1.0;
    double lambda_adv = 15.0;
    double epsilon = 3.0;
    int n_per_identity = 16;
    AdvObjectiveKind adv_kind = AdvObjectiveKind::plain;
    HullTargetMode hull_target = HullTargetMode::renormalized_cosine;
    int epochs = 5;
    int identities_per_batch = 4;
    std::uint64_t seed = 0;
    int checkpoint_interval = 0;
    std::string checkpoint_dir;
    int val_interval = 0;
};

struct TrainLogRecord {
    int step = 0;
    double disc_term = 0;       // E[log D(real)] + E[log(1-D(fake))]
    double gen_gan = 0;         // non-saturating generator term
    double norm_term = 0;       // hinge norm loss
    double adv_term = 0;        // adversarial feature loss
    double gen_total = 0;       // gen_gan + ln*norm - la*adv
    double mean_pert_norm_255 = 0;
    double val_protection = -1.0;  // -1 when not probed
};

struct TrainingLog {
    std::vector<TrainLogRecord> records;
    std::vector<std::string> consumed_images;  // "identity/name", sorted unique

    std::string to_jsonl() const;
    void write(const std::string& path) const;
};

struct StageResult {
    GeneratorModel gen;
    DiscriminatorModel disc;
    TrainingLog log;
};

struct TrainerHooks {
    // Periodic validation probe; returns a protection rate in [0,100].
    std::function<double(const GeneratorModel&)> validation;
};

// Stage I: image-specific training, one mask per image.
StageResult train_stage1(const IdentityCorpus& corpus, const EmbedderModel& embedder,
                         const StageIConfig& cfg, const TrainerHooks* hooks = nullptr);

// Delta^k = (1/n) sum_i G(X_i^k).
PersonMask aggregate_mask(const GeneratorModel& gen, const std::vector<FaceImage>& images,
                          const std::string& identity = "", const std::string& method = "advcloak");

// Stage II: person-specific fine-tuning from the stage-I models. With
// epochs == 0 the models pass through with parameters untouched.
StageResult train_stage2(const IdentityCorpus& corpus_by_identity, const EmbedderModel& embedder,
                         const GeneratorModel& init_gen, const DiscriminatorModel& init_disc,
                         const StageIIConfig& cfg, const TrainerHooks* hooks = nullptr);

// --- deterministic schedules & recomputation (audits and checkpoint tests) ---

struct StepLosses {
    double disc_term = 0, gen_gan = 0, norm_term = 0, adv_term = 0, gen_total = 0;
    double mean_pert_norm_255 = 0;
};

std::vector<const FaceImage*> stage1_batch(const IdentityCorpus& corpus, const StageIConfig& cfg,
                                           int step);
std::vector<std::string> stage2_identity_batch(const IdentityCorpus& corpus,
                                               const StageIIConfig& cfg, int step);

// Recomputes the logged loss terms for a step from given (pre-step) models.
StepLosses stage1_step_losses(const IdentityCorpus& corpus, const EmbedderModel& embedder,
                              const GeneratorModel& gen, const DiscriminatorModel& disc,
                              const StageIConfig& cfg, int step);
StepLosses stage2_step_losses(const IdentityCorpus& corpus, const EmbedderModel& embedder,
                              const GeneratorModel& gen, const DiscriminatorModel& disc,
                              const StageIIConfig& cfg, int step);

void save_checkpoint(const std::string& path, const GeneratorModel& gen,
                     const DiscriminatorModel& disc, int step, const std::string& config_hash);
struct Checkpoint {
    GeneratorModel gen;
    DiscriminatorModel disc;
    int step;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace advcloak
