#include "avih/data.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "avih/rng.hpp"

namespace avih::harness {

namespace fs = std::filesystem;

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

double smoothstep(double e0, double e1, double x) {
    double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

// Signed distances, negative inside; u/v in shape-local units (radius ~1).
double shape_sdf(int kind, double u, double v) {
    switch (kind % 4) {
        case 0: return std::sqrt(u * u + v * v) - 1.0;                      // disk
        case 1: return std::max(std::fabs(u), std::fabs(v)) - 0.85;         // square
        case 2: return std::fabs(u) + std::fabs(v) - 1.15;                  // diamond
        default: return std::fabs(std::sqrt(u * u + v * v) - 0.8) - 0.32;   // ring
    }
}

struct IdentityParams {
    int shape;
    double hue, sat, val;
    double hue2;
    double stripe_freq, stripe_angle, stripe_contrast;
    double bg_hue, bg_sat, bg_val;
    double base_scale;
};

IdentityParams identity_params(const SyntheticDatasetSpec& spec, int identity) {
    const int gid = spec.id_offset + identity;
    Rng rng(derive_seed(spec.seed, 0xa11d0 + static_cast<std::uint64_t>(gid)));
    IdentityParams p;
    p.shape = gid % 4;
    p.hue = std::fmod(0.61803398875 * gid + rng.uniform() * 0.04, 1.0);
    p.sat = rng.uniform(0.6, 0.95);
    p.val = rng.uniform(0.75, 1.0);
    p.hue2 = std::fmod(p.hue + rng.uniform(0.08, 0.2), 1.0);
    p.stripe_freq = 2.0 + rng.uniform_index(6) + rng.uniform() * 0.5;
    p.stripe_angle = rng.uniform(0.0, 3.14159265);
    p.stripe_contrast = rng.uniform(0.3, 0.6);
    p.bg_hue = std::fmod(p.hue + 0.45 + rng.uniform() * 0.1, 1.0);
    p.bg_sat = rng.uniform(0.25, 0.55);
    p.bg_val = rng.uniform(0.35, 0.75);
    p.base_scale = rng.uniform(0.30, 0.40);
    return p;
}

}  // namespace

Tensor render_synthetic_image(const SyntheticDatasetSpec& spec, int identity, int image_index) {
    spec.validate();
    AVIH_CHECK(identity >= 0 && identity < spec.identities,
               "render_synthetic_image: identity out of range");
    const IdentityParams p = identity_params(spec, identity);
    const int gid = spec.id_offset + identity;
    const int gimg = spec.image_offset + image_index;
    Rng rng(derive_seed(spec.seed,
                        0x1333700ULL + static_cast<std::uint64_t>(gid) * 1000003ULL +
                            static_cast<std::uint64_t>(gimg)));

    const int n = spec.image_size;
    // Per-image jitter: pose, scale, illumination, background shading.
    const double cx = 0.5 + rng.uniform(-0.10, 0.10);
    const double cy = 0.5 + rng.uniform(-0.10, 0.10);
    const double scale = p.base_scale * rng.uniform(0.85, 1.15);
    const double rot = rng.uniform(-0.5, 0.5);
    const double brightness = rng.uniform(0.85, 1.15);
    const double grad_angle = rng.uniform(0.0, 6.28318530718);
    const double grad_amp = rng.uniform(0.05, 0.20);
    const double noise_amp = 0.015;

    const Rgb fill1 = hsv_to_rgb(p.hue, p.sat, p.val * brightness);
    const Rgb fill2 = hsv_to_rgb(p.hue2, p.sat * 0.9, p.val * brightness * 0.85);
    const Rgb bg = hsv_to_rgb(p.bg_hue, p.bg_sat, p.bg_val * brightness);

    const double ca = std::cos(rot), sa = std::sin(rot);
    const double sca = std::cos(p.stripe_angle + rot), ssa = std::sin(p.stripe_angle + rot);
    const double gx = std::cos(grad_angle), gy = std::sin(grad_angle);

    Tensor img({1, 3, n, n});
    const double edge = 1.5 / (scale * n);  // ~1.5 px anti-alias band
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double fx = (x + 0.5) / n, fy = (y + 0.5) / n;
            // shape-local coordinates
            const double dx = (fx - cx) / scale, dy = (fy - cy) / scale;
            const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
            const double sd = shape_sdf(p.shape, u, v);
            const double inside = 1.0 - smoothstep(-edge, edge, sd);

            const double stripe =
                0.5 + 0.5 * std::sin(2.0 * 3.14159265 * p.stripe_freq * (sca * u + ssa * v));
            const double mixw = p.stripe_contrast * stripe;
            Rgb fg{fill1.r * (1 - mixw) + fill2.r * mixw, fill1.g * (1 - mixw) + fill2.g * mixw,
                   fill1.b * (1 - mixw) + fill2.b * mixw};

            const double shade = 1.0 + grad_amp * ((fx - 0.5) * gx + (fy - 0.5) * gy) * 2.0;
            Rgb bgp{bg.r * shade, bg.g * shade, bg.b * shade};

            const double nz = noise_amp * (rng.uniform() - 0.5) * 2.0;
            img.at(0, 0, y, x) = std::clamp(fg.r * inside + bgp.r * (1 - inside) + nz, 0.0, 1.0);
            img.at(0, 1, y, x) = std::clamp(fg.g * inside + bgp.g * (1 - inside) + nz, 0.0, 1.0);
            img.at(0, 2, y, x) = std::clamp(fg.b * inside + bgp.b * (1 - inside) + nz, 0.0, 1.0);
        }
    }
    return img;
}

models::LabeledImageSet render_synthetic_set(const SyntheticDatasetSpec& spec) {
    spec.validate();
    models::LabeledImageSet set;
    set.identities = spec.identities;
    set.images = Tensor({static_cast<std::int64_t>(spec.identities) * spec.images_per_identity, 3,
                         spec.image_size, spec.image_size});
    const std::int64_t per = 3LL * spec.image_size * spec.image_size;
    std::int64_t row = 0;
    for (int id = 0; id < spec.identities; ++id) {
        for (int i = 0; i < spec.images_per_identity; ++i, ++row) {
            Tensor img = render_synthetic_image(spec, id, i);
            std::copy(img.data(), img.data() + per, set.images.data() + row * per);
            set.labels.push_back(id);
        }
    }
    return set;
}

void generate_synthetic_dataset(const SyntheticDatasetSpec& spec, const std::string& dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    AVIH_CHECK(!ec, "generate_synthetic_dataset: cannot create " + dir);
    char name[32];
    for (int id = 0; id < spec.identities; ++id) {
        std::snprintf(name, sizeof(name), "id_%04d", spec.id_offset + id);
        const fs::path id_dir = fs::path(dir) / name;
        fs::create_directories(id_dir, ec);
        AVIH_CHECK(!ec, "generate_synthetic_dataset: cannot create " + id_dir.string());
        for (int i = 0; i < spec.images_per_identity; ++i) {
            std::snprintf(name, sizeof(name), "%04d.png", i);
            save_image_png((id_dir / name).string(), render_synthetic_image(spec, id, i));
        }
    }
}

namespace {

cv::Mat tensor_to_mat8(const Tensor& image) {
    AVIH_CHECK((image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 3) ||
                   (image.rank() == 3 && image.dim(0) == 3),
               "save_image_png: expected a single 3-channel image");
    const std::int64_t off = image.rank() == 4 ? 1 : 0;
    const std::int64_t h = image.dim(off + 1), w = image.dim(off + 2);
    const double* r = image.data();
    const double* g = r + h * w;
    const double* b = g + h * w;
    cv::Mat mat(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
    for (std::int64_t y = 0; y < h; ++y) {
        auto* row = mat.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::int64_t x = 0; x < w; ++x) {
            auto q = [](double v) {
                return static_cast<unsigned char>(
                    std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            };
            row[x] = cv::Vec3b(q(b[y * w + x]), q(g[y * w + x]), q(r[y * w + x]));  // BGR
        }
    }
    return mat;
}

}  // namespace

void save_image_png(const std::string& path, const Tensor& image) {
    cv::Mat mat = tensor_to_mat8(image);
    AVIH_CHECK(cv::imwrite(path, mat), "save_image_png: cannot write " + path);
}

Tensor load_image_png(const std::string& path, int resize_to, const FileAccessHook& hook) {
    if (hook) hook(path);
    cv::Mat mat = cv::imread(path, cv::IMREAD_COLOR);
    AVIH_CHECK(!mat.empty(), "load_image_png: cannot decode " + path);
    if (resize_to > 0 && (mat.rows != resize_to || mat.cols != resize_to)) {
        cv::Mat resized;
        cv::resize(mat, resized, cv::Size(resize_to, resize_to), 0, 0, cv::INTER_AREA);
        mat = resized;
    }
    const std::int64_t h = mat.rows, w = mat.cols;
    Tensor out({1, 3, h, w});
    double* r = out.data();
    double* g = r + h * w;
    double* b = g + h * w;
    for (std::int64_t y = 0; y < h; ++y) {
        const auto* row = mat.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::int64_t x = 0; x < w; ++x) {
            b[y * w + x] = row[x][0] / 255.0;
            g[y * w + x] = row[x][1] / 255.0;
            r[y * w + x] = row[x][2] / 255.0;
        }
    }
    return out;
}

IngestResult ingest_gallery(const std::string& dir, int image_size, const FileAccessHook& hook) {
    AVIH_CHECK(fs::is_directory(dir), "ingest_gallery: not a directory: " + dir);
    AVIH_CHECK(image_size >= 1, "ingest_gallery: invalid image size");

    std::vector<std::string> id_dirs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory()) id_dirs.push_back(entry.path().filename().string());
    }
    std::sort(id_dirs.begin(), id_dirs.end());

    IngestResult result;
    std::vector<Tensor> images;
    for (const auto& id_name : id_dirs) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(fs::path(dir) / id_name)) {
            if (!entry.is_regular_file()) continue;
            std::string ext = entry.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(),
                           [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
            if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path().string());
        }
        std::sort(files.begin(), files.end());
        bool any = false;
        for (const auto& file : files) {
            try {
                images.push_back(load_image_png(file, image_size, hook));
                result.set.labels.push_back(static_cast<int>(result.id_names.size()));
                result.files.push_back(file);
                any = true;
            } catch (const std::exception& e) {
                result.warnings.push_back(std::string(e.what()));
            }
        }
        if (any) result.id_names.push_back(id_name);
    }
    AVIH_CHECK(!images.empty(), "ingest_gallery: no readable images under " + dir);
    result.set.images = stack_images(images);
    result.set.identities = static_cast<int>(result.id_names.size());
    return result;
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    AVIH_CHECK(static_cast<bool>(out), "save_tensor: cannot open " + path);
    const char magic[8] = {'A', 'V', 'I', 'H', 'T', '0', '0', '1'};
    out.write(magic, 8);
    const std::uint64_t rank = t.rank();
    out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (auto d : t.shape()) out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(double) * t.numel()));
    AVIH_CHECK(static_cast<bool>(out), "save_tensor: write failed for " + path);
}

Tensor load_tensor(const std::string& path, const FileAccessHook& hook) {
    if (hook) hook(path);
    std::ifstream in(path, std::ios::binary);
    AVIH_CHECK(static_cast<bool>(in), "load_tensor: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    AVIH_CHECK(in && std::memcmp(magic, "AVIHT001", 8) == 0, "load_tensor: bad magic in " + path);
    std::uint64_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    AVIH_CHECK(in && rank <= 8, "load_tensor: bad rank in " + path);
    std::vector<std::int64_t> shape(rank);
    for (auto& d : shape) in.read(reinterpret_cast<char*>(&d), sizeof(d));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * t.numel()));
    AVIH_CHECK(static_cast<bool>(in), "load_tensor: truncated file " + path);
    return t;
}

Tensor stack_images(const std::vector<Tensor>& images) {
    AVIH_CHECK(!images.empty(), "stack_images: empty list");
    const Tensor& first = images.front();
    AVIH_CHECK(first.rank() == 4 && first.dim(0) == 1, "stack_images: expected {1,C,H,W} rows");
    Tensor out({static_cast<std::int64_t>(images.size()), first.dim(1), first.dim(2), first.dim(3)});
    const std::int64_t per = first.numel();
    for (std::size_t i = 0; i < images.size(); ++i) {
        AVIH_CHECK(images[i].same_shape(first), "stack_images: inconsistent image shapes");
        std::copy(images[i].data(), images[i].data() + per,
                  out.data() + static_cast<std::int64_t>(i) * per);
    }
    return out;
}

Tensor image_row(const Tensor& batch, std::int64_t index) {
    AVIH_CHECK(batch.rank() == 4 && index >= 0 && index < batch.dim(0),
               "image_row: index out of range");
    Tensor out({1, batch.dim(1), batch.dim(2), batch.dim(3)});
    const std::int64_t per = out.numel();
    std::copy(batch.data() + index * per, batch.data() + (index + 1) * per, out.data());
    return out;
}

}  // namespace avih::harness
