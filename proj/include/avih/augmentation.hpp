#pragma once

#include "avih/ops.hpp"
#include "avih/rng.hpp"

namespace avih::attack {

// Random augmentation used by the augmented identity loss: horizontal flip,
// zero padding, random crop back to the original size.
struct AugmentationPolicy {
    double horizontal_flip_prob = 0.5;
    int pad_pixels = 5;
    bool crop_to_original = true;

    void validate() const {
        AVIH_CHECK(horizontal_flip_prob >= 0.0 && horizontal_flip_prob <= 1.0,
                   "AugmentationPolicy: flip probability must be in [0,1]");
        AVIH_CHECK(pad_pixels >= 0, "AugmentationPolicy: pad_pixels must be >= 0");
    }

    bool is_identity() const { return horizontal_flip_prob == 0.0 && pad_pixels == 0; }
};

struct AugmentationDescriptor {
    bool flip = false;
    int pad = 0;
    int dy = 0;  // crop offset within the padded image, in [0, 2*pad]
    int dx = 0;
    bool crop = true;
};

AugmentationDescriptor sample_augmentation(const AugmentationPolicy& policy, Rng& rng);

// Applies one descriptor per batch element. With crop (the default) the
// output shape equals the input shape; without it the image grows by pad on
// every side.
Var apply_augmentation(const Var& images, const std::vector<AugmentationDescriptor>& descriptors);

}  // namespace avih::attack
