#include "avih/augmentation.hpp"

namespace avih::attack {

AugmentationDescriptor sample_augmentation(const AugmentationPolicy& policy, Rng& rng) {
    policy.validate();
    AugmentationDescriptor d;
    d.pad = policy.pad_pixels;
    d.crop = policy.crop_to_original;
    // Fixed draw order: flip, dy, dx. Keeps streams reproducible.
    d.flip = policy.horizontal_flip_prob > 0.0 && rng.bernoulli(policy.horizontal_flip_prob);
    if (policy.pad_pixels > 0 && policy.crop_to_original) {
        d.dy = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(2 * d.pad + 1)));
        d.dx = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(2 * d.pad + 1)));
    }
    return d;
}

Var apply_augmentation(const Var& images, const std::vector<AugmentationDescriptor>& descriptors) {
    AVIH_CHECK(!descriptors.empty(), "apply_augmentation: no descriptors");
    const bool crop = descriptors.front().crop;
    const int pad = descriptors.front().pad;
    for (const auto& d : descriptors) {
        AVIH_CHECK(d.crop == crop && d.pad == pad,
                   "apply_augmentation: descriptors must share pad/crop settings per batch");
    }
    if (crop) {
        std::vector<TranslateFlipSpec> specs;
        specs.reserve(descriptors.size());
        for (const auto& d : descriptors) specs.push_back({d.flip, d.pad, d.dy, d.dx});
        return translate_flip(images, specs);
    }
    std::vector<bool> flips;
    flips.reserve(descriptors.size());
    for (const auto& d : descriptors) flips.push_back(d.flip);
    return pad_flip(images, pad, flips);
}

}  // namespace avih::attack
