#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "avih/attack.hpp"
#include "avih/data.hpp"
#include "avih/encryptor.hpp"
#include "avih/manifest.hpp"
#include "avih/metrics.hpp"

namespace avih::harness {

struct DatasetConfig {
    std::string source = "synthetic";  // "synthetic" | "directory"
    std::string directory;             // gallery tree when source == directory
    std::string aux_directory;         // auxiliary tree when source == directory
    int identities = 64;
    int images_per_identity = 4;
    int aux_identities = 64;
    int aux_images_per_identity = 4;
    int service_images_per_identity = 8;  // synthetic renders for service training
};

struct SeedConfig {
    std::uint64_t data = 1, service = 2, key = 3, attack = 4, eval = 5;
};

struct RunConfig {
    DatasetConfig dataset;
    int image_size = 64;
    SeedConfig seeds;

    // encryption stage
    int encryption_steps = 800;
    double encryption_lr = 0.01;
    losses::LossWeights weights;
    int vc_kernel = 4;
    int vc_stride = 2;
    std::string init_mode = "from_noise";
    models::UNetSpec key_model;

    // attack stage
    int attack_steps = 1600;
    int attack_batch = 32;
    double generator_lr = 2e-4;
    double discriminator_lr = 2e-4;
    attack::AugmentationPolicy augmentation;
    std::string gan_convention = "standard";
    models::UNetSpec surrogate;
    models::PatchDiscriminatorSpec discriminator;
    bool attack_from_quantized = false;

    // service models
    models::ServiceModelSpec service;
    models::ServiceTrainOptions service_train;

    // experiment grid
    std::vector<double> fractions = {0.01, 0.03, 0.10, 0.70};
    std::vector<double> ablation_fractions;  // run the full 2x2 grid at these
    double far_target = 0.01;

    std::string out_dir = "avih-run";

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

// One attacker training cell of the experiment grid.
struct AttackCell {
    double fraction = 0.7;
    bool gan = true;
    bool aug = true;
    std::uint64_t seed = 0;
    std::string id;  // e.g. frac_0.7000_gan1_aug1
};
std::vector<AttackCell> attack_run_list(const RunConfig& cfg);

struct PipelineResult {
    std::string out_dir;
    nlohmann::json manifest;
};

// Executes data -> service -> encrypt -> attack -> evaluate -> report with
// per-stage content-digest caching. Stage failure halts dependents; the
// manifest still records completed stages.
PipelineResult run_pipeline(const RunConfig& cfg);

// Re-emits tables, image grids and fraction plots from an existing run
// directory; missing artifacts are marked absent rather than failing.
void emit_report(const std::string& out_dir);

// Encrypted gallery store shared by the pipeline and the standalone CLI:
// raw float64 tensors (full precision) plus 8-bit PNGs for inspection.
namespace encrypted_store {
std::string raw_path(const std::string& dir, std::int64_t index);
std::string png_path(const std::string& dir, std::int64_t index);
void save(const std::string& dir, const std::vector<encryptor::EncryptionResult>& results);
// Loads images by gallery index; from_quantized reads the 8-bit PNGs.
Tensor load_images(const std::string& dir, const std::vector<std::int64_t>& indices,
                   bool from_quantized, const FileAccessHook& hook = nullptr);
}  // namespace encrypted_store

}  // namespace avih::harness
