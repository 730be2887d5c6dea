#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avih/losses.hpp"
#include "avih/models.hpp"

namespace avih::encryptor {

enum class InitMode { from_noise, from_original };

struct OptimizerConfig {
    std::string name = "adam";
    double learning_rate = 0.01;
};

struct EncryptionConfig {
    int steps = 800;
    OptimizerConfig optimizer;
    losses::LossWeights weights;             // 0.03 / 3.0 / 0.5 defaults
    losses::PatchSpec patch_spec = losses::PatchSpec::square(4);
    InitMode init_mode = InitMode::from_noise;
    std::uint64_t seed = 0;

    void validate() const {
        AVIH_CHECK(steps >= 1, "EncryptionConfig: steps must be >= 1");
        AVIH_CHECK(optimizer.learning_rate > 0.0, "EncryptionConfig: learning_rate must be > 0");
        weights.validate();
    }

    std::string digest() const;  // canonical-JSON hash, recorded in results
};

struct StepLosses {
    double task = 0.0;
    double difference = 0.0;
    double variance = 0.0;
    double recovery = 0.0;
    double total = 0.0;
};

struct EncryptionResult {
    Tensor x_prime;  // same shape as the input batch, values in [0,1]
    std::vector<StepLosses> loss_trace;  // one entry per step
    std::string config_hash;
    std::string key_model_id;
    std::uint64_t seed = 0;
};

// from_noise draws i.i.d. uniform [0,1] pixels from cfg.seed (the same stream
// for every image, so identical inputs encrypt identically); from_original
// copies x.
Tensor init_encrypted_image(const Tensor& x, const EncryptionConfig& cfg);

// Gradient descent on the pixels of x' against the composite objective, with
// projection onto [0,1] after every step. Key and service weights are never
// touched. Throws on non-finite losses with per-component diagnostics.
EncryptionResult encrypt_image(const Tensor& x, const models::EmbeddingNetwork& fs,
                               const models::ImageToImageNetwork& fk,
                               const EncryptionConfig& cfg);

struct GalleryEncryption {
    std::vector<EncryptionResult> results;  // order-aligned with the gallery
    std::vector<std::string> errors;        // errors[i] empty on success
    bool all_ok() const {
        for (const auto& e : errors)
            if (!e.empty()) return false;
        return true;
    }
};

// Independent per-image encryption; images run in parallel, failures are
// collected per image instead of aborting the batch.
GalleryEncryption encrypt_gallery(const std::vector<Tensor>& gallery,
                                  const models::EmbeddingNetwork& fs,
                                  const models::ImageToImageNetwork& fk,
                                  const EncryptionConfig& cfg);

// Forward pass through a key network, clamped to [0,1].
Tensor recover(const models::ImageToImageNetwork& fk, const Tensor& x_prime);

}  // namespace avih::encryptor
