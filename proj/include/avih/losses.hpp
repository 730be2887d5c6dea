#pragma once

#include "avih/augmentation.hpp"
#include "avih/models.hpp"
#include "avih/ops.hpp"

namespace avih::losses {

// Overlapping-patch grid for the variance-consistency loss. The default
// stride is half the patch height (50% overlap), never below 1.
struct PatchSpec {
    int height = 4;
    int width = 4;
    int stride = 2;

    static PatchSpec square(int kernel) { return {kernel, kernel, std::max(1, kernel / 2)}; }

    void validate(std::int64_t image_h, std::int64_t image_w) const {
        AVIH_CHECK(height >= 1 && height <= image_h && width >= 1 && width <= image_w,
                   "PatchSpec: patch must fit inside the image");
        AVIH_CHECK(stride >= 1, "PatchSpec: stride must be >= 1");
        AVIH_CHECK(patch_count(image_h, image_w) >= 2,
                   "PatchSpec: patch grid must contain at least 2 patches");
    }

    std::int64_t patch_count(std::int64_t image_h, std::int64_t image_w) const {
        return ((image_h - height) / stride + 1) * ((image_w - width) / stride + 1);
    }
};

struct LossWeights {
    double lambda1 = 0.03;  // difference loss (maximized: enters with a minus sign)
    double lambda2 = 3.0;   // variance-consistency loss
    double lambda3 = 0.5;   // recovery loss
    double attack_identity_weight = 30.0;

    void validate() const {
        AVIH_CHECK(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0 &&
                       attack_identity_weight >= 0.0,
                   "LossWeights: weights must be nonnegative");
    }
};

// The discriminator loss as printed assigns label 1 to reconstructions;
// `standard` uses the usual real->1 convention with a non-saturating
// generator term.
enum class GanConvention { standard, printed };

// Mean over the batch of per-image feature distances || f_s(x_i) - f_s(x_i') ||_2.
Var task_loss(const models::EmbeddingNetwork& fs, const Var& x, const Var& x_prime);

// Mean over the batch of per-image pixel distances || x_i - x_i' ||_2.
Var difference_loss(const Var& x, const Var& x_prime);

// Mean over the batch of || x_i - recovered_i ||_2 where recovered = f_k(x').
Var recovery_loss(const Var& x, const Var& recovered);

// Channel-wise population variance of overlapping-patch pixel sums.
Var variance_consistency_loss(const Var& x_prime, const PatchSpec& spec);

// L_t - lambda1 * L_d + lambda2 * L_v + lambda3 * L_r.
Var avih_objective(const models::EmbeddingNetwork& fs, const Var& fk_output, const Var& x,
                   const Var& x_prime, const LossWeights& weights, const PatchSpec& spec);

// Mean over the batch of || f_s(a_k(x')) - f_s(x') ||_2.
Var identity_loss(const models::EmbeddingNetwork& fs, const Var& ak_output, const Var& x_prime);

// Identity loss with a random transform applied to the reconstruction branch
// only; the x' branch is forwarded untouched.
Var augmented_identity_loss(const models::EmbeddingNetwork& fs, const Var& ak_output,
                            const Var& x_prime, const attack::AugmentationPolicy& policy,
                            Rng& rng);

// Generator objective: GAN term over the patch probability map plus
// lambda1 * L_I, where lambda1 is weights.attack_identity_weight. Printed
// convention keeps the text's +mean log D(fake); standard uses -mean log D(fake).
Var attacker_generator_loss(const Var& disc_output, const Var& aug_id_loss,
                            const LossWeights& weights,
                            GanConvention convention = GanConvention::standard);

// Printed: -mean log D(fake) - mean log(1 - D(real)); standard swaps the roles.
Var discriminator_loss(const Var& disc_on_fake, const Var& disc_on_real,
                       GanConvention convention = GanConvention::standard);

}  // namespace avih::losses
