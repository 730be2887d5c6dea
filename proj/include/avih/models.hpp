#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "avih/nn.hpp"

namespace avih::models {

// The white-box embedding service f_s: images in, row-unit-norm embeddings
// out, gradients flowing end to end.
class EmbeddingNetwork {
public:
    virtual ~EmbeddingNetwork() = default;
    virtual Var embed(const Var& images) const = 0;  // {B, D}
    virtual int embedding_dim() const = 0;
};

// Image-to-image networks: the private key model f_k and the attacker
// surrogate a_k share this surface.
class ImageToImageNetwork {
public:
    virtual ~ImageToImageNetwork() = default;
    virtual Var forward(const Var& images) const = 0;  // same shape as input
};

// Intermediate-feature access for the perceptual distance metric.
class FeatureModel {
public:
    virtual ~FeatureModel() = default;
    virtual std::vector<Var> features(const Var& images) const = 0;
};

struct UNetSpec {
    int depth = 4;
    int base_channels = 32;
    int max_channels = 256;  // channel growth cap toward the bottleneck
};

class UNet : public nn::Model, public ImageToImageNetwork {
public:
    UNet(const UNetSpec& spec, std::uint64_t seed);

    Var forward(const Var& images) const override;
    void named_params(std::vector<std::pair<std::string, Var>>& out) const override;
    const UNetSpec& spec() const { return spec_; }

private:
    struct Block {
        nn::Conv2d c1, c2;
    };
    Var run_block(const Block& b, const Var& x) const;

    UNetSpec spec_;
    std::vector<Block> enc_;
    Block bottleneck_;
    std::vector<nn::ConvTranspose2d> up_;
    std::vector<Block> dec_;
    nn::Conv2d head_;
};

struct PatchDiscriminatorSpec {
    int layers = 3;  // strided conv blocks before the 1-channel projection
    int base_channels = 64;
    int max_channels = 256;
    double prob_eps = 1e-6;  // clamp for the (tanh+1)/2 probability map
};

class PatchDiscriminator : public nn::Model {
public:
    PatchDiscriminator(const PatchDiscriminatorSpec& spec, std::uint64_t seed);

    // Probability map {B, 1, k, k}; values in [prob_eps, 1 - prob_eps].
    Var forward(const Var& images) const;
    void named_params(std::vector<std::pair<std::string, Var>>& out) const override;
    int receptive_field() const;
    int min_input_size() const;
    const PatchDiscriminatorSpec& spec() const { return spec_; }

private:
    PatchDiscriminatorSpec spec_;
    std::vector<nn::Conv2d> convs_;
    std::vector<nn::InstanceNorm2d> norms_;  // none on the first block
    nn::Conv2d proj_;
};

struct ServiceModelSpec {
    int base_channels = 16;
    int embedding_dim = 128;
    int groups = 8;  // group-norm groups; per-sample statistics only
};

class ServiceModel : public nn::Model, public EmbeddingNetwork, public FeatureModel {
public:
    ServiceModel(const ServiceModelSpec& spec, std::uint64_t seed);

    Var embed(const Var& images) const override;
    int embedding_dim() const override { return spec_.embedding_dim; }
    std::vector<Var> features(const Var& images) const override;  // 3 stage maps
    void named_params(std::vector<std::pair<std::string, Var>>& out) const override;
    const ServiceModelSpec& spec() const { return spec_; }

    // Inference helper: embeddings as a plain tensor, no graph kept.
    Tensor embed_values(const Tensor& images) const;

private:
    struct Stage {
        nn::Conv2d down;
        nn::GroupNorm down_norm;
        nn::Conv2d r1, r2;
        nn::GroupNorm n1, n2;
    };
    Var run_stage(const Stage& s, const Var& x) const;

    ServiceModelSpec spec_;
    nn::Conv2d stem_;
    nn::GroupNorm stem_norm_;
    std::vector<Stage> stages_;
    nn::Linear fc_;
};

std::unique_ptr<UNet> make_unet(const UNetSpec& spec, std::uint64_t seed);
std::unique_ptr<PatchDiscriminator> make_patch_discriminator(const PatchDiscriminatorSpec& spec,
                                                             std::uint64_t seed);

// Labeled image batch: images {N,3,H,W} in [0,1], labels[i] in [0, identities).
struct LabeledImageSet {
    Tensor images;
    std::vector<int> labels;
    int identities = 0;
};

struct ServiceTrainOptions {
    int max_epochs = 40;
    int batch_size = 64;
    double lr = 2e-3;
    double margin = 0.2;       // cosine-margin softmax head
    double logit_scale = 16.0;
    double target_rank1 = 0.9;
    int holdout_per_identity = 1;
    std::uint64_t seed = 1;
};

struct ServiceTrainSummary {
    int epochs_run = 0;
    double holdout_rank1 = 0.0;
    bool converged = false;
};

// Margin-based embedding training. Trains in place until the held-out rank-1
// accuracy reaches target_rank1 or max_epochs is exhausted; non-convergence
// is reported through the summary flag, not an error.
ServiceTrainSummary train_service_model(ServiceModel& model, const LabeledImageSet& data,
                                        const ServiceTrainOptions& options);

double rank1_accuracy(const ServiceModel& model, const Tensor& gallery,
                      const std::vector<int>& gallery_labels, const Tensor& queries,
                      const std::vector<int>& query_labels);

}  // namespace avih::models
