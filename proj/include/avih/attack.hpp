#pragma once

#include <memory>
#include <vector>

#include "avih/augmentation.hpp"
#include "avih/losses.hpp"
#include "avih/models.hpp"

namespace avih::attack {

struct OptimizerSettings {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
};

struct AttackConfig {
    int steps = 1600;
    int batch_size = 32;
    double identity_weight = 30.0;
    OptimizerSettings generator_opt;
    OptimizerSettings discriminator_opt;
    AugmentationPolicy augmentation;
    losses::GanConvention gan_convention = losses::GanConvention::standard;
    bool use_gan_loss = true;            // ablation toggle
    bool use_augmented_identity = true;  // ablation toggle; off = plain identity loss
    models::UNetSpec surrogate;          // attacker key model architecture
    models::PatchDiscriminatorSpec discriminator;
    std::uint64_t seed = 0;

    void validate() const {
        AVIH_CHECK(steps >= 1, "AttackConfig: steps must be >= 1");
        AVIH_CHECK(batch_size >= 1, "AttackConfig: batch_size must be >= 1");
        AVIH_CHECK(identity_weight >= 0.0, "AttackConfig: identity_weight must be >= 0");
        augmentation.validate();
    }
};

struct StepLog {
    double generator = 0.0;
    double discriminator = 0.0;
    double identity = 0.0;
};

struct LossSnapshot {
    int step = 0;  // 1-based step index at which the snapshot was taken
    double generator = 0.0;
    double discriminator = 0.0;
    double identity = 0.0;
};

struct AttackRun {
    std::shared_ptr<models::UNet> attacker_model;
    std::shared_ptr<models::PatchDiscriminator> discriminator;  // null when GAN loss disabled
    std::vector<StepLog> training_log;     // one entry per step
    std::vector<LossSnapshot> snapshots;   // rolling means every 100 steps
    double key_share_fraction = 1.0;       // stamped by the caller
};

// Deterministic seeded division of a gallery: half becomes the attacker's
// training pool, half the fixed held-out evaluation set; the attacker then
// trains on round(fraction * pool) images of the pool.
struct KeyShareSplit {
    std::vector<std::int64_t> train_indices;  // ascending gallery indices
    std::vector<std::int64_t> eval_indices;
    std::int64_t pool_size = 0;  // size of the training pool the fraction applies to
};
KeyShareSplit split_key_share(std::int64_t gallery_size, double fraction, std::uint64_t seed);

// Trains the surrogate key model against the encrypted subset. The true key
// model and original images are not reachable from here by construction: the
// only inputs are encrypted pixels, the white-box service model, and the
// auxiliary dataset.
AttackRun train_attacker(const Tensor& train_subset, const models::EmbeddingNetwork& fs,
                         const Tensor& aux, const AttackConfig& cfg);

// Forward pass through the surrogate, clamped to [0,1]. Never augments.
Tensor reconstruct(const models::ImageToImageNetwork& attacker_model, const Tensor& encrypted);

}  // namespace avih::attack
