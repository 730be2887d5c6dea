#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avih/models.hpp"

namespace avih::harness {

// Parametric textured-shape renderer. Identity determines shape family, base
// colors and stripe texture; per-image jitter covers pose, scale and
// illumination. id_offset / image_offset select disjoint identity and render
// streams (gallery, auxiliary and service-training sets never overlap).
struct SyntheticDatasetSpec {
    int identities = 64;
    int images_per_identity = 4;
    int image_size = 64;
    int id_offset = 0;
    int image_offset = 0;
    std::uint64_t seed = 0;

    void validate() const {
        AVIH_CHECK(identities >= 2, "SyntheticDatasetSpec: need at least 2 identities");
        AVIH_CHECK(images_per_identity >= 1, "SyntheticDatasetSpec: images_per_identity >= 1");
        AVIH_CHECK(image_size >= 16, "SyntheticDatasetSpec: image_size must be >= 16");
    }
};

// One image as {1,3,H,W}; identity index is relative (0-based before offset).
Tensor render_synthetic_image(const SyntheticDatasetSpec& spec, int identity, int image_index);
models::LabeledImageSet render_synthetic_set(const SyntheticDatasetSpec& spec);

// Writes the set as <dir>/<id>/<idx>.png; deterministic bytes given the spec.
void generate_synthetic_dataset(const SyntheticDatasetSpec& spec, const std::string& dir);

// Optional read hook so callers can audit which files a stage touches.
using FileAccessHook = std::function<void(const std::string&)>;

struct IngestResult {
    models::LabeledImageSet set;
    std::vector<std::string> files;     // accepted files, ingest order
    std::vector<std::string> id_names;  // directory names by label index
    std::vector<std::string> warnings;  // skipped/corrupt files
};

// Reads a <id>/<file>.png|jpg tree in stable lexicographic order, resizing to
// image_size and scaling to [0,1]. Corrupt files are skipped with a warning;
// an empty result is an error.
IngestResult ingest_gallery(const std::string& dir, int image_size,
                            const FileAccessHook& hook = nullptr);

// 8-bit PNG round trip for inspection images; image is {1,3,H,W} or {3,H,W}.
void save_image_png(const std::string& path, const Tensor& image);
Tensor load_image_png(const std::string& path, int resize_to = 0,
                      const FileAccessHook& hook = nullptr);

// Raw float64 tensor blob; preserves encrypted images at full precision.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path, const FileAccessHook& hook = nullptr);

// Stacks {1,3,H,W} images into {N,3,H,W} and back.
Tensor stack_images(const std::vector<Tensor>& images);
Tensor image_row(const Tensor& batch, std::int64_t index);

}  // namespace avih::harness
