#include "avih/losses.hpp"

namespace avih::losses {

namespace {

void check_image_pair(const Var& a, const Var& b, const char* op) {
    AVIH_CHECK(a->value.rank() == 4 && b->value.rank() == 4,
               std::string(op) + ": expected B x C x H x W image batches");
    AVIH_CHECK(a->value.same_shape(b->value), std::string(op) + ": shape mismatch " +
                                                  a->value.shape_str() + " vs " +
                                                  b->value.shape_str());
}

void check_probability_map(const Var& m, const char* op) {
    AVIH_CHECK(m->value.numel() > 0, std::string(op) + ": empty discriminator output");
    for (std::int64_t i = 0; i < m->value.numel(); ++i) {
        AVIH_CHECK(m->value[i] > 0.0 && m->value[i] < 1.0,
                   std::string(op) + ": discriminator outputs must lie in (0,1)");
    }
}

}  // namespace

Var task_loss(const models::EmbeddingNetwork& fs, const Var& x, const Var& x_prime) {
    check_image_pair(x, x_prime, "task_loss");
    return batch_l2_norm_mean(sub(fs.embed(x), fs.embed(x_prime)));
}

Var difference_loss(const Var& x, const Var& x_prime) {
    check_image_pair(x, x_prime, "difference_loss");
    return batch_l2_norm_mean(sub(x, x_prime));
}

Var recovery_loss(const Var& x, const Var& recovered) {
    check_image_pair(x, recovered, "recovery_loss");
    return batch_l2_norm_mean(sub(x, recovered));
}

Var variance_consistency_loss(const Var& x_prime, const PatchSpec& spec) {
    AVIH_CHECK(x_prime->value.rank() == 4, "variance_consistency_loss: expected image batch");
    AVIH_CHECK(x_prime->value.dim(1) == 3,
               "variance_consistency_loss: defined for 3-channel images");
    spec.validate(x_prime->value.dim(2), x_prime->value.dim(3));
    return patch_sum_variance(x_prime, spec.height, spec.width, spec.stride);
}

Var avih_objective(const models::EmbeddingNetwork& fs, const Var& fk_output, const Var& x,
                   const Var& x_prime, const LossWeights& weights, const PatchSpec& spec) {
    weights.validate();
    Var lt = task_loss(fs, x, x_prime);
    Var ld = difference_loss(x, x_prime);
    Var lv = variance_consistency_loss(x_prime, spec);
    Var lr = recovery_loss(x, fk_output);
    return add(add(sub(lt, scale(ld, weights.lambda1)), scale(lv, weights.lambda2)),
               scale(lr, weights.lambda3));
}

Var identity_loss(const models::EmbeddingNetwork& fs, const Var& ak_output, const Var& x_prime) {
    check_image_pair(ak_output, x_prime, "identity_loss");
    return batch_l2_norm_mean(sub(fs.embed(ak_output), fs.embed(x_prime)));
}

Var augmented_identity_loss(const models::EmbeddingNetwork& fs, const Var& ak_output,
                            const Var& x_prime, const attack::AugmentationPolicy& policy,
                            Rng& rng) {
    check_image_pair(ak_output, x_prime, "augmented_identity_loss");
    policy.validate();
    const std::int64_t batch = ak_output->value.dim(0);
    std::vector<attack::AugmentationDescriptor> descriptors;
    descriptors.reserve(static_cast<std::size_t>(batch));
    for (std::int64_t b = 0; b < batch; ++b)
        descriptors.push_back(attack::sample_augmentation(policy, rng));
    // The transform touches the reconstruction branch only; x' is embedded as is.
    Var transformed = attack::apply_augmentation(ak_output, descriptors);
    return batch_l2_norm_mean(sub(fs.embed(transformed), fs.embed(x_prime)));
}

Var attacker_generator_loss(const Var& disc_output, const Var& aug_id_loss,
                            const LossWeights& weights, GanConvention convention) {
    check_probability_map(disc_output, "attacker_generator_loss");
    AVIH_CHECK(aug_id_loss->value.numel() == 1,
               "attacker_generator_loss: identity loss must be scalar");
    weights.validate();
    Var gan_term = mean_log(disc_output);
    if (convention == GanConvention::standard) gan_term = scale(gan_term, -1.0);
    return add(gan_term, scale(aug_id_loss, weights.attack_identity_weight));
}

Var discriminator_loss(const Var& disc_on_fake, const Var& disc_on_real,
                       GanConvention convention) {
    check_probability_map(disc_on_fake, "discriminator_loss");
    check_probability_map(disc_on_real, "discriminator_loss");
    if (convention == GanConvention::printed) {
        return sub(scale(mean_log(disc_on_fake), -1.0), mean_log1m(disc_on_real));
    }
    return sub(scale(mean_log(disc_on_real), -1.0), mean_log1m(disc_on_fake));
}

}  // namespace avih::losses
