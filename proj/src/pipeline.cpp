#include "avih/pipeline.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "avih/digest.hpp"

namespace avih::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    AVIH_CHECK(static_cast<bool>(out), "cannot write " + path);
    out << text;
}

void write_json_file(const std::string& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    AVIH_CHECK(static_cast<bool>(in), "cannot open " + path);
    json j;
    in >> j;
    return j;
}

std::vector<std::string> list_tree_files(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    return files;
}

Tensor gather_rows(const Tensor& images, const std::vector<std::int64_t>& idx) {
    const std::int64_t per = images.numel() / images.dim(0);
    std::vector<std::int64_t> shape = images.shape();
    shape[0] = static_cast<std::int64_t>(idx.size());
    Tensor out(shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(images.data() + idx[i] * per, images.data() + (idx[i] + 1) * per,
                  out.data() + static_cast<std::int64_t>(i) * per);
    }
    return out;
}

}  // namespace

void RunConfig::validate() const {
    AVIH_CHECK(dataset.source == "synthetic" || dataset.source == "directory",
               "RunConfig: dataset.source must be synthetic or directory");
    if (dataset.source == "directory") {
        AVIH_CHECK(!dataset.directory.empty(), "RunConfig: dataset.directory required");
    }
    AVIH_CHECK(image_size >= 16, "RunConfig: image_size must be >= 16");
    AVIH_CHECK(encryption_steps >= 1, "RunConfig: encryption_steps must be >= 1");
    AVIH_CHECK(attack_steps >= 1 && attack_batch >= 1, "RunConfig: invalid attack settings");
    AVIH_CHECK(!fractions.empty(), "RunConfig: fractions must be nonempty");
    std::set<double> seen;
    for (double f : fractions) {
        AVIH_CHECK(f > 0.0 && f <= 1.0, "RunConfig: fractions must lie in (0, 1]");
        AVIH_CHECK(seen.insert(f).second, "RunConfig: fractions must be unique");
    }
    for (double f : ablation_fractions) {
        AVIH_CHECK(seen.count(f) > 0, "RunConfig: ablation_fractions must be listed in fractions");
    }
    AVIH_CHECK(far_target > 0.0 && far_target < 1.0, "RunConfig: far_target must be in (0,1)");
    AVIH_CHECK(init_mode == "from_noise" || init_mode == "from_original",
               "RunConfig: init_mode must be from_noise or from_original");
    AVIH_CHECK(gan_convention == "standard" || gan_convention == "printed",
               "RunConfig: gan_convention must be standard or printed");
    AVIH_CHECK(!out_dir.empty(), "RunConfig: out_dir required");
    weights.validate();
    augmentation.validate();
}

json RunConfig::to_json() const {
    json j;
    j["dataset"] = {{"source", dataset.source},
                    {"directory", dataset.directory},
                    {"aux_directory", dataset.aux_directory},
                    {"identities", dataset.identities},
                    {"images_per_identity", dataset.images_per_identity},
                    {"aux_identities", dataset.aux_identities},
                    {"aux_images_per_identity", dataset.aux_images_per_identity},
                    {"service_images_per_identity", dataset.service_images_per_identity}};
    j["image_size"] = image_size;
    j["seeds"] = {{"data", seeds.data},
                  {"service", seeds.service},
                  {"key", seeds.key},
                  {"attack", seeds.attack},
                  {"eval", seeds.eval}};
    j["encryption"] = {{"steps", encryption_steps},
                       {"learning_rate", encryption_lr},
                       {"weights",
                        {{"lambda1", weights.lambda1},
                         {"lambda2", weights.lambda2},
                         {"lambda3", weights.lambda3}}},
                       {"vc_kernel", vc_kernel},
                       {"vc_stride", vc_stride},
                       {"init_mode", init_mode},
                       {"key_model",
                        {{"depth", key_model.depth},
                         {"base_channels", key_model.base_channels},
                         {"max_channels", key_model.max_channels}}}};
    j["attack"] = {{"steps", attack_steps},
                   {"batch_size", attack_batch},
                   {"identity_weight", weights.attack_identity_weight},
                   {"generator_lr", generator_lr},
                   {"discriminator_lr", discriminator_lr},
                   {"gan_convention", gan_convention},
                   {"from_quantized", attack_from_quantized},
                   {"augmentation",
                    {{"horizontal_flip_prob", augmentation.horizontal_flip_prob},
                     {"pad_pixels", augmentation.pad_pixels},
                     {"crop_to_original", augmentation.crop_to_original}}},
                   {"surrogate",
                    {{"depth", surrogate.depth},
                     {"base_channels", surrogate.base_channels},
                     {"max_channels", surrogate.max_channels}}},
                   {"discriminator",
                    {{"layers", discriminator.layers},
                     {"base_channels", discriminator.base_channels},
                     {"max_channels", discriminator.max_channels}}}};
    j["service"] = {{"base_channels", service.base_channels},
                    {"embedding_dim", service.embedding_dim},
                    {"groups", service.groups},
                    {"train",
                     {{"max_epochs", service_train.max_epochs},
                      {"batch_size", service_train.batch_size},
                      {"lr", service_train.lr},
                      {"margin", service_train.margin},
                      {"logit_scale", service_train.logit_scale},
                      {"target_rank1", service_train.target_rank1}}}};
    j["fractions"] = fractions;
    j["ablation_fractions"] = ablation_fractions;
    j["far_target"] = far_target;
    j["out_dir"] = out_dir;
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        c.dataset.source = d.value("source", c.dataset.source);
        c.dataset.directory = d.value("directory", c.dataset.directory);
        c.dataset.aux_directory = d.value("aux_directory", c.dataset.aux_directory);
        c.dataset.identities = d.value("identities", c.dataset.identities);
        c.dataset.images_per_identity =
            d.value("images_per_identity", c.dataset.images_per_identity);
        c.dataset.aux_identities = d.value("aux_identities", c.dataset.aux_identities);
        c.dataset.aux_images_per_identity =
            d.value("aux_images_per_identity", c.dataset.aux_images_per_identity);
        c.dataset.service_images_per_identity =
            d.value("service_images_per_identity", c.dataset.service_images_per_identity);
    }
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("seeds")) {
        const auto& s = j["seeds"];
        c.seeds.data = s.value("data", c.seeds.data);
        c.seeds.service = s.value("service", c.seeds.service);
        c.seeds.key = s.value("key", c.seeds.key);
        c.seeds.attack = s.value("attack", c.seeds.attack);
        c.seeds.eval = s.value("eval", c.seeds.eval);
    }
    if (j.contains("encryption")) {
        const auto& e = j["encryption"];
        c.encryption_steps = e.value("steps", c.encryption_steps);
        c.encryption_lr = e.value("learning_rate", c.encryption_lr);
        if (e.contains("weights")) {
            const auto& w = e["weights"];
            c.weights.lambda1 = w.value("lambda1", c.weights.lambda1);
            c.weights.lambda2 = w.value("lambda2", c.weights.lambda2);
            c.weights.lambda3 = w.value("lambda3", c.weights.lambda3);
        }
        c.vc_kernel = e.value("vc_kernel", c.vc_kernel);
        c.vc_stride = e.value("vc_stride", std::max(1, c.vc_kernel / 2));
        c.init_mode = e.value("init_mode", c.init_mode);
        if (e.contains("key_model")) {
            const auto& k = e["key_model"];
            c.key_model.depth = k.value("depth", c.key_model.depth);
            c.key_model.base_channels = k.value("base_channels", c.key_model.base_channels);
            c.key_model.max_channels = k.value("max_channels", c.key_model.max_channels);
        }
    }
    if (j.contains("attack")) {
        const auto& a = j["attack"];
        c.attack_steps = a.value("steps", c.attack_steps);
        c.attack_batch = a.value("batch_size", c.attack_batch);
        c.weights.attack_identity_weight =
            a.value("identity_weight", c.weights.attack_identity_weight);
        c.generator_lr = a.value("generator_lr", c.generator_lr);
        c.discriminator_lr = a.value("discriminator_lr", c.discriminator_lr);
        c.gan_convention = a.value("gan_convention", c.gan_convention);
        c.attack_from_quantized = a.value("from_quantized", c.attack_from_quantized);
        if (a.contains("augmentation")) {
            const auto& g = a["augmentation"];
            c.augmentation.horizontal_flip_prob =
                g.value("horizontal_flip_prob", c.augmentation.horizontal_flip_prob);
            c.augmentation.pad_pixels = g.value("pad_pixels", c.augmentation.pad_pixels);
            c.augmentation.crop_to_original =
                g.value("crop_to_original", c.augmentation.crop_to_original);
        }
        if (a.contains("surrogate")) {
            const auto& s = a["surrogate"];
            c.surrogate.depth = s.value("depth", c.surrogate.depth);
            c.surrogate.base_channels = s.value("base_channels", c.surrogate.base_channels);
            c.surrogate.max_channels = s.value("max_channels", c.surrogate.max_channels);
        }
        if (a.contains("discriminator")) {
            const auto& d = a["discriminator"];
            c.discriminator.layers = d.value("layers", c.discriminator.layers);
            c.discriminator.base_channels = d.value("base_channels", c.discriminator.base_channels);
            c.discriminator.max_channels = d.value("max_channels", c.discriminator.max_channels);
        }
    }
    if (j.contains("service")) {
        const auto& s = j["service"];
        c.service.base_channels = s.value("base_channels", c.service.base_channels);
        c.service.embedding_dim = s.value("embedding_dim", c.service.embedding_dim);
        c.service.groups = s.value("groups", c.service.groups);
        if (s.contains("train")) {
            const auto& t = s["train"];
            c.service_train.max_epochs = t.value("max_epochs", c.service_train.max_epochs);
            c.service_train.batch_size = t.value("batch_size", c.service_train.batch_size);
            c.service_train.lr = t.value("lr", c.service_train.lr);
            c.service_train.margin = t.value("margin", c.service_train.margin);
            c.service_train.logit_scale = t.value("logit_scale", c.service_train.logit_scale);
            c.service_train.target_rank1 = t.value("target_rank1", c.service_train.target_rank1);
        }
    }
    c.fractions = j.value("fractions", c.fractions);
    c.ablation_fractions = j.value("ablation_fractions", c.ablation_fractions);
    c.far_target = j.value("far_target", c.far_target);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

namespace {

std::string cell_id(double fraction, bool gan, bool aug) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "frac_%.4f_gan%d_aug%d", fraction, gan ? 1 : 0, aug ? 1 : 0);
    return buf;
}

}  // namespace

std::vector<AttackCell> attack_run_list(const RunConfig& cfg) {
    std::vector<double> fracs = cfg.fractions;
    std::sort(fracs.begin(), fracs.end());
    std::set<double> ablate(cfg.ablation_fractions.begin(), cfg.ablation_fractions.end());
    std::vector<AttackCell> cells;
    for (double f : fracs) {
        cells.push_back({f, true, true, 0, ""});
        if (ablate.count(f) > 0) {
            cells.push_back({f, false, false, 0, ""});
            cells.push_back({f, true, false, 0, ""});
            cells.push_back({f, false, true, 0, ""});
        }
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        cells[i].seed = derive_seed(cfg.seeds.attack, 0xa77ac + i);
        cells[i].id = cell_id(cells[i].fraction, cells[i].gan, cells[i].aug);
    }
    return cells;
}

namespace encrypted_store {

std::string raw_path(const std::string& dir, std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%05lld.bin", static_cast<long long>(index));
    return (fs::path(dir) / "raw" / buf).string();
}

std::string png_path(const std::string& dir, std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%05lld.png", static_cast<long long>(index));
    return (fs::path(dir) / "png" / buf).string();
}

void save(const std::string& dir, const std::vector<encryptor::EncryptionResult>& results) {
    fs::create_directories(fs::path(dir) / "raw");
    fs::create_directories(fs::path(dir) / "png");
    for (std::size_t i = 0; i < results.size(); ++i) {
        save_tensor(raw_path(dir, static_cast<std::int64_t>(i)), results[i].x_prime);
        save_image_png(png_path(dir, static_cast<std::int64_t>(i)), results[i].x_prime);
    }
}

Tensor load_images(const std::string& dir, const std::vector<std::int64_t>& indices,
                   bool from_quantized, const FileAccessHook& hook) {
    AVIH_CHECK(!indices.empty(), "encrypted_store: no indices to load");
    std::vector<Tensor> rows;
    rows.reserve(indices.size());
    for (auto idx : indices) {
        if (from_quantized) {
            rows.push_back(load_image_png(png_path(dir, idx), 0, hook));
        } else {
            rows.push_back(load_tensor(raw_path(dir, idx), hook));
        }
    }
    return stack_images(rows);
}

}  // namespace encrypted_store

namespace {

struct PipelinePaths {
    std::string root;
    std::string data_gallery, data_aux, data_service;
    std::string service_dir, encrypted_dir, attack_dir, eval_dir, report_dir;

    explicit PipelinePaths(const std::string& out) : root(out) {
        data_gallery = (fs::path(out) / "data" / "gallery").string();
        data_aux = (fs::path(out) / "data" / "aux").string();
        data_service = (fs::path(out) / "data" / "service").string();
        service_dir = (fs::path(out) / "service").string();
        encrypted_dir = (fs::path(out) / "encrypted").string();
        attack_dir = (fs::path(out) / "attack").string();
        eval_dir = (fs::path(out) / "eval").string();
        report_dir = (fs::path(out) / "report").string();
    }
};

// Identity-stream offsets keeping the gallery, auxiliary set and the
// "random images" baseline disjoint.
constexpr int kAuxIdOffset = 100000;
constexpr int kRandomIdOffset = 2000000;

SyntheticDatasetSpec gallery_spec(const RunConfig& cfg) {
    return {cfg.dataset.identities, cfg.dataset.images_per_identity, cfg.image_size, 0, 0,
            cfg.seeds.data};
}

SyntheticDatasetSpec aux_spec(const RunConfig& cfg) {
    return {cfg.dataset.aux_identities, cfg.dataset.aux_images_per_identity, cfg.image_size,
            kAuxIdOffset, 0, cfg.seeds.data};
}

SyntheticDatasetSpec service_data_spec(const RunConfig& cfg) {
    // Same identities as the gallery, disjoint render indices.
    return {cfg.dataset.identities, cfg.dataset.service_images_per_identity, cfg.image_size, 0,
            cfg.dataset.images_per_identity, cfg.seeds.data};
}

struct StageOutcome {
    bool cached = false;
    double seconds = 0.0;
};

template <typename Body>
StageOutcome run_stage(Stage& stage, Body&& body) {
    StageOutcome outcome;
    if (stage.up_to_date()) {
        outcome.cached = true;
        return outcome;
    }
    const double t0 = now_seconds();
    body(stage);
    stage.commit();
    outcome.seconds = now_seconds() - t0;
    return outcome;
}

void add_tree_inputs(Stage& stage, const std::string& dir) {
    for (const auto& f : list_tree_files(dir)) stage.add_input_file(f);
}

std::string service_ckpt(const PipelinePaths& p, bool eval_model) {
    return (fs::path(p.service_dir) / (eval_model ? "fs_eval.bin" : "fs_target.bin")).string();
}

attack::AttackConfig attack_config(const RunConfig& cfg, const AttackCell& cell) {
    attack::AttackConfig a;
    a.steps = cfg.attack_steps;
    a.batch_size = cfg.attack_batch;
    a.identity_weight = cfg.weights.attack_identity_weight;
    a.generator_opt.lr = cfg.generator_lr;
    a.discriminator_opt.lr = cfg.discriminator_lr;
    a.augmentation = cfg.augmentation;
    a.gan_convention = cfg.gan_convention == "printed" ? losses::GanConvention::printed
                                                       : losses::GanConvention::standard;
    a.use_gan_loss = cell.gan;
    a.use_augmented_identity = cell.aug;
    a.surrogate = cfg.surrogate;
    a.discriminator = cfg.discriminator;
    a.seed = cell.seed;
    return a;
}

encryptor::EncryptionConfig encryption_config(const RunConfig& cfg) {
    encryptor::EncryptionConfig e;
    e.steps = cfg.encryption_steps;
    e.optimizer.learning_rate = cfg.encryption_lr;
    e.weights = cfg.weights;
    e.patch_spec = {cfg.vc_kernel, cfg.vc_kernel, cfg.vc_stride};
    e.init_mode = cfg.init_mode == "from_original" ? encryptor::InitMode::from_original
                                                   : encryptor::InitMode::from_noise;
    e.seed = derive_seed(cfg.seeds.key, 0xec);
    return e;
}

json metrics_provenance(const RunConfig& cfg, const std::string& run_id, double fraction, int gan,
                        int aug, const std::string& probe_digest, const std::string& eval_digest,
                        std::size_t images) {
    json j;
    j["run"] = run_id;
    if (fraction >= 0.0) j["fraction"] = fraction;
    j["gan"] = gan;
    j["aug"] = aug;
    j["probe_model"] = probe_digest;  // model that produced the reconstruction
    j["eval_model"] = eval_digest;
    j["images"] = images;
    j["seeds"] = {{"data", cfg.seeds.data},
                  {"service", cfg.seeds.service},
                  {"key", cfg.seeds.key},
                  {"attack", cfg.seeds.attack},
                  {"eval", cfg.seeds.eval}};
    return j;
}

void save_eval_outputs(const std::string& dir, const metrics::MetricsReport& report,
                       const Tensor& recon, Stage& stage) {
    fs::create_directories(dir);
    const std::string report_path = (fs::path(dir) / "report.json").string();
    write_json_file(report_path, report.to_json());
    const std::string csv_path = (fs::path(dir) / "per_image.csv").string();
    write_text(csv_path, report.to_csv());
    stage.add_output_file(report_path);
    stage.add_output_file(csv_path);
    const std::int64_t previews = std::min<std::int64_t>(8, recon.dim(0));
    for (std::int64_t k = 0; k < previews; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "recon_%03lld.png", static_cast<long long>(k));
        const std::string path = (fs::path(dir) / buf).string();
        save_image_png(path, image_row(recon, k));
        stage.add_output_file(path);
    }
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg) {
    cfg.validate();
    const PipelinePaths paths(cfg.out_dir);
    fs::create_directories(cfg.out_dir);

    ExperimentManifest manifest(cfg.out_dir);
    manifest.set_config(cfg.to_json());

    const bool synthetic = cfg.dataset.source == "synthetic";

    // ---- stage: data ----
    {
        Stage stage("data", (fs::path(cfg.out_dir) / "data").string());
        json stage_cfg{{"image_size", cfg.image_size}, {"seed", cfg.seeds.data}};
        if (synthetic) {
            stage_cfg["synthetic"] = {
                {"identities", cfg.dataset.identities},
                {"images_per_identity", cfg.dataset.images_per_identity},
                {"aux_identities", cfg.dataset.aux_identities},
                {"aux_images_per_identity", cfg.dataset.aux_images_per_identity},
                {"service_images_per_identity", cfg.dataset.service_images_per_identity}};
        } else {
            stage_cfg["directory"] = cfg.dataset.directory;
            stage_cfg["aux_directory"] = cfg.dataset.aux_directory;
            for (const auto& f : list_tree_files(cfg.dataset.directory)) stage.add_input_file(f);
            if (!cfg.dataset.aux_directory.empty()) {
                for (const auto& f : list_tree_files(cfg.dataset.aux_directory))
                    stage.add_input_file(f);
            }
        }
        stage.set_config(stage_cfg);
        auto outcome = run_stage(stage, [&](Stage& st) {
            if (!synthetic) return;
            generate_synthetic_dataset(gallery_spec(cfg), paths.data_gallery);
            generate_synthetic_dataset(aux_spec(cfg), paths.data_aux);
            generate_synthetic_dataset(service_data_spec(cfg), paths.data_service);
            for (const auto& f : list_tree_files(paths.data_gallery)) st.add_output_file(f);
            for (const auto& f : list_tree_files(paths.data_aux)) st.add_output_file(f);
            for (const auto& f : list_tree_files(paths.data_service)) st.add_output_file(f);
        });
        manifest.add_stage(stage.record(outcome.cached, outcome.seconds));
    }

    const std::string gallery_dir = synthetic ? paths.data_gallery : cfg.dataset.directory;
    const std::string aux_dir = synthetic ? paths.data_aux : cfg.dataset.aux_directory;
    const std::string service_data_dir = synthetic ? paths.data_service : gallery_dir;

    // ---- stage: service ----
    {
        Stage stage("service", paths.service_dir);
        json stage_cfg{{"spec",
                        {{"base_channels", cfg.service.base_channels},
                         {"embedding_dim", cfg.service.embedding_dim},
                         {"groups", cfg.service.groups}}},
                       {"train",
                        {{"max_epochs", cfg.service_train.max_epochs},
                         {"batch_size", cfg.service_train.batch_size},
                         {"lr", cfg.service_train.lr},
                         {"margin", cfg.service_train.margin},
                         {"logit_scale", cfg.service_train.logit_scale},
                         {"target_rank1", cfg.service_train.target_rank1}}},
                       {"image_size", cfg.image_size},
                       {"seed_service", cfg.seeds.service},
                       {"seed_eval", cfg.seeds.eval}};
        stage.set_config(stage_cfg);
        add_tree_inputs(stage, service_data_dir);
        auto outcome = run_stage(stage, [&](Stage& st) {
            auto data = ingest_gallery(service_data_dir, cfg.image_size);
            for (int which = 0; which < 2; ++which) {
                const bool eval_model = which == 1;
                const std::uint64_t seed = eval_model ? cfg.seeds.eval : cfg.seeds.service;
                models::ServiceModel model(cfg.service, seed);
                auto opts = cfg.service_train;
                opts.seed = derive_seed(seed, 0x7241);
                auto summary = models::train_service_model(model, data.set, opts);
                const std::string ckpt = service_ckpt(paths, eval_model);
                model.save(ckpt);
                json sidecar{{"seed", seed},
                             {"spec",
                              {{"base_channels", cfg.service.base_channels},
                               {"embedding_dim", cfg.service.embedding_dim},
                               {"groups", cfg.service.groups}}},
                             {"epochs_run", summary.epochs_run},
                             {"holdout_rank1", summary.holdout_rank1},
                             {"converged", summary.converged},
                             {"warning", summary.converged ? "" : "rank-1 target not reached"},
                             {"weight_digest", model.weight_digest()}};
                const std::string sidecar_path = ckpt + ".json";
                write_json_file(sidecar_path, sidecar);
                st.add_output_file(ckpt);
                st.add_output_file(sidecar_path);
            }
        });
        manifest.add_stage(stage.record(outcome.cached, outcome.seconds));
    }

    // ---- stage: encrypt ----
    const encryptor::EncryptionConfig enc_cfg = encryption_config(cfg);
    {
        Stage stage("encrypt", paths.encrypted_dir);
        json stage_cfg{{"steps", enc_cfg.steps},
                       {"learning_rate", enc_cfg.optimizer.learning_rate},
                       {"weights",
                        {{"lambda1", enc_cfg.weights.lambda1},
                         {"lambda2", enc_cfg.weights.lambda2},
                         {"lambda3", enc_cfg.weights.lambda3}}},
                       {"patch",
                        {{"h", enc_cfg.patch_spec.height},
                         {"w", enc_cfg.patch_spec.width},
                         {"s", enc_cfg.patch_spec.stride}}},
                       {"init_mode", cfg.init_mode},
                       {"seed_key", cfg.seeds.key},
                       {"key_model",
                        {{"depth", cfg.key_model.depth},
                         {"base_channels", cfg.key_model.base_channels},
                         {"max_channels", cfg.key_model.max_channels}}},
                       {"image_size", cfg.image_size}};
        stage.set_config(stage_cfg);
        add_tree_inputs(stage, gallery_dir);
        stage.add_input_file(service_ckpt(paths, false));
        auto outcome = run_stage(stage, [&](Stage& st) {
            auto gallery = ingest_gallery(gallery_dir, cfg.image_size);
            models::ServiceModel fs_target(cfg.service, cfg.seeds.service);
            fs_target.load(service_ckpt(paths, false));
            models::UNet fk(cfg.key_model, cfg.seeds.key);

            std::vector<Tensor> images;
            for (std::int64_t i = 0; i < gallery.set.images.dim(0); ++i)
                images.push_back(image_row(gallery.set.images, i));
            auto enc = encryptor::encrypt_gallery(images, fs_target, fk, enc_cfg);
            std::vector<std::string> failures;
            for (std::size_t i = 0; i < enc.errors.size(); ++i) {
                if (!enc.errors[i].empty())
                    failures.push_back("image " + std::to_string(i) + ": " + enc.errors[i]);
            }
            if (!failures.empty()) {
                throw std::runtime_error("encrypt stage: " + std::to_string(failures.size()) +
                                         " image(s) failed; first: " + failures.front());
            }

            const std::string key_path = (fs::path(paths.encrypted_dir) / "key_model.bin").string();
            fk.save(key_path);
            st.add_output_file(key_path);

            encrypted_store::save(paths.encrypted_dir, enc.results);
            for (std::size_t i = 0; i < enc.results.size(); ++i) {
                st.add_output_file(
                    encrypted_store::raw_path(paths.encrypted_dir, static_cast<std::int64_t>(i)));
                st.add_output_file(
                    encrypted_store::png_path(paths.encrypted_dir, static_cast<std::int64_t>(i)));
            }

            json summary;
            summary["config_hash"] = enc.results.front().config_hash;
            summary["key_model_id"] = enc.results.front().key_model_id;
            summary["seed"] = enc_cfg.seed;
            summary["gallery_size"] = enc.results.size();
            summary["labels"] = gallery.set.labels;
            summary["id_names"] = gallery.id_names;
            json per_image = json::array();
            for (const auto& r : enc.results) {
                const auto& first = r.loss_trace.front();
                const auto& last = r.loss_trace.back();
                per_image.push_back({{"task_first", first.task},
                                     {"task_last", last.task},
                                     {"recovery_first", first.recovery},
                                     {"recovery_last", last.recovery},
                                     {"total_last", last.total}});
            }
            summary["per_image"] = per_image;
            const std::string summary_path =
                (fs::path(paths.encrypted_dir) / "summary.json").string();
            write_json_file(summary_path, summary);
            st.add_output_file(summary_path);
        });
        manifest.add_stage(stage.record(outcome.cached, outcome.seconds));
    }

    // ---- stages: attack, one per fraction x ablation cell ----
    const auto cells = attack_run_list(cfg);
    const json enc_summary =
        read_json_file((fs::path(paths.encrypted_dir) / "summary.json").string());
    const std::int64_t gallery_size = enc_summary.at("gallery_size").get<std::int64_t>();

    for (const auto& cell : cells) {
        Stage stage("attack:" + cell.id, (fs::path(paths.attack_dir) / cell.id).string());
        const auto split = attack::split_key_share(gallery_size, cell.fraction, cfg.seeds.attack);
        json stage_cfg{
            {"cell", {{"fraction", cell.fraction}, {"gan", cell.gan}, {"aug", cell.aug}}},
            {"steps", cfg.attack_steps},
            {"batch_size", cfg.attack_batch},
            {"identity_weight", cfg.weights.attack_identity_weight},
            {"generator_lr", cfg.generator_lr},
            {"discriminator_lr", cfg.discriminator_lr},
            {"gan_convention", cfg.gan_convention},
            {"from_quantized", cfg.attack_from_quantized},
            {"augmentation",
             {{"flip", cfg.augmentation.horizontal_flip_prob},
              {"pad", cfg.augmentation.pad_pixels},
              {"crop", cfg.augmentation.crop_to_original}}},
            {"surrogate",
             {{"depth", cfg.surrogate.depth}, {"base_channels", cfg.surrogate.base_channels}}},
            {"seed", cell.seed},
            {"split_seed", cfg.seeds.attack}};
        stage.set_config(stage_cfg);
        for (auto idx : split.train_indices) {
            stage.add_input_file(cfg.attack_from_quantized
                                     ? encrypted_store::png_path(paths.encrypted_dir, idx)
                                     : encrypted_store::raw_path(paths.encrypted_dir, idx));
        }
        if (cell.gan) add_tree_inputs(stage, aux_dir);
        stage.add_input_file(service_ckpt(paths, false));

        auto outcome = run_stage(stage, [&](Stage& st) {
            std::vector<std::string> accessed;
            FileAccessHook hook = [&accessed](const std::string& p) { accessed.push_back(p); };

            Tensor train_images = encrypted_store::load_images(
                paths.encrypted_dir, split.train_indices, cfg.attack_from_quantized, hook);
            Tensor aux_images;
            if (cell.gan) {
                auto aux = ingest_gallery(aux_dir, cfg.image_size, hook);
                aux_images = aux.set.images;
            }
            accessed.push_back(service_ckpt(paths, false));
            models::ServiceModel fs_target(cfg.service, cfg.seeds.service);
            fs_target.load(service_ckpt(paths, false));

            auto acfg = attack_config(cfg, cell);
            auto run = attack::train_attacker(train_images, fs_target, aux_images, acfg);
            run.key_share_fraction = cell.fraction;

            const std::string ckpt = (fs::path(st.dir()) / "surrogate.bin").string();
            run.attacker_model->save(ckpt);
            st.add_output_file(ckpt);
            if (run.discriminator) {
                const std::string dpath = (fs::path(st.dir()) / "discriminator.bin").string();
                run.discriminator->save(dpath);
                st.add_output_file(dpath);
            }

            std::sort(accessed.begin(), accessed.end());
            json run_manifest;
            run_manifest["config"] = stage_cfg;
            run_manifest["key_share_fraction"] = cell.fraction;
            run_manifest["train_subset_size"] = split.train_indices.size();
            run_manifest["pool_size"] = split.pool_size;
            run_manifest["surrogate_digest"] = run.attacker_model->weight_digest();
            run_manifest["file_access"] = accessed;
            json curve = json::array();
            for (const auto& s : run.training_log)
                curve.push_back({s.generator, s.discriminator, s.identity});
            run_manifest["loss_curve"] = curve;
            json snaps = json::array();
            for (const auto& s : run.snapshots)
                snaps.push_back({{"step", s.step},
                                 {"generator", s.generator},
                                 {"discriminator", s.discriminator},
                                 {"identity", s.identity}});
            run_manifest["snapshots"] = snaps;
            const std::string rm_path = (fs::path(st.dir()) / "run_manifest.json").string();
            write_json_file(rm_path, run_manifest);
            st.add_output_file(rm_path);
        });

        json extra;
        try {
            const json rm = read_json_file(
                (fs::path(paths.attack_dir) / cell.id / "run_manifest.json").string());
            extra["file_access"] = rm.value("file_access", json::array());
            extra["train_subset_size"] = rm.value("train_subset_size", 0);
        } catch (...) {
        }
        manifest.add_stage(stage.record(outcome.cached, outcome.seconds, extra));
    }

    // ---- stages: evaluate ----
    const auto split_eval =
        attack::split_key_share(gallery_size, cfg.fractions.front(), cfg.seeds.attack);
    {
        auto gallery = ingest_gallery(gallery_dir, cfg.image_size);
        Tensor originals_eval = gather_rows(gallery.set.images, split_eval.eval_indices);
        std::vector<int> labels_eval;
        for (auto i : split_eval.eval_indices)
            labels_eval.push_back(gallery.set.labels[static_cast<std::size_t>(i)]);
        auto protocol = metrics::VerificationProtocol::from_labels(labels_eval, cfg.far_target);

        models::ServiceModel fs_eval(cfg.service, cfg.seeds.eval);
        fs_eval.load(service_ckpt(paths, true));
        const std::string fs_eval_digest = fs_eval.weight_digest().substr(0, 16);

        Tensor encrypted_eval =
            encrypted_store::load_images(paths.encrypted_dir, split_eval.eval_indices, false);

        auto evaluate_one = [&](const std::string& run_id, double fraction, int gan, int aug,
                                const Tensor& recon, const std::string& probe_digest, Stage& st) {
            auto report = metrics::evaluate_reconstruction(
                originals_eval, recon, fs_eval, labels_eval, protocol,
                metrics_provenance(cfg, run_id, fraction, gan, aug, probe_digest, fs_eval_digest,
                                   labels_eval.size()));
            save_eval_outputs((fs::path(paths.eval_dir) / run_id).string(), report, recon, st);
        };

        for (const auto& cell : cells) {
            Stage stage("evaluate:" + cell.id, (fs::path(paths.eval_dir) / cell.id).string());
            const std::string surrogate_path =
                (fs::path(paths.attack_dir) / cell.id / "surrogate.bin").string();
            stage.set_config(json{{"far_target", cfg.far_target},
                                  {"cell", cell.id},
                                  {"eval_count", split_eval.eval_indices.size()}});
            stage.add_input_file(surrogate_path);
            stage.add_input_file(service_ckpt(paths, true));
            for (auto idx : split_eval.eval_indices)
                stage.add_input_file(encrypted_store::raw_path(paths.encrypted_dir, idx));
            auto outcome = run_stage(stage, [&](Stage& st) {
                models::UNet surrogate(cfg.surrogate, 0);
                surrogate.load(surrogate_path);
                Tensor recon = attack::reconstruct(surrogate, encrypted_eval);
                evaluate_one(cell.id, cell.fraction, cell.gan ? 1 : 0, cell.aug ? 1 : 0, recon,
                             surrogate.weight_digest().substr(0, 16), st);
            });
            manifest.add_stage(stage.record(outcome.cached, outcome.seconds));
        }

        // Baselines mirroring the Original / Protected / Key model / Random rows.
        struct Baseline {
            std::string id;
            std::function<Tensor()> make;
        };
        std::vector<Baseline> baselines;
        baselines.push_back({"baseline_original", [&]() { return originals_eval; }});
        baselines.push_back({"baseline_protected", [&]() { return encrypted_eval; }});
        baselines.push_back({"baseline_keymodel", [&]() {
                                 models::UNet fk(cfg.key_model, cfg.seeds.key);
                                 fk.load((fs::path(paths.encrypted_dir) / "key_model.bin").string());
                                 return encryptor::recover(fk, encrypted_eval);
                             }});
        baselines.push_back({"baseline_random", [&]() {
                                 std::vector<Tensor> rows;
                                 SyntheticDatasetSpec spec{
                                     std::max<int>(2,
                                                   static_cast<int>(split_eval.eval_indices.size())),
                                     1, cfg.image_size, kRandomIdOffset, 0, cfg.seeds.eval};
                                 for (std::size_t i = 0; i < split_eval.eval_indices.size(); ++i)
                                     rows.push_back(
                                         render_synthetic_image(spec, static_cast<int>(i), 0));
                                 return stack_images(rows);
                             }});
        for (const auto& baseline : baselines) {
            Stage stage("evaluate:" + baseline.id,
                        (fs::path(paths.eval_dir) / baseline.id).string());
            stage.set_config(json{{"far_target", cfg.far_target},
                                  {"baseline", baseline.id},
                                  {"eval_count", split_eval.eval_indices.size()}});
            stage.add_input_file(service_ckpt(paths, true));
            if (baseline.id == "baseline_keymodel") {
                stage.add_input_file((fs::path(paths.encrypted_dir) / "key_model.bin").string());
            }
            for (auto idx : split_eval.eval_indices)
                stage.add_input_file(encrypted_store::raw_path(paths.encrypted_dir, idx));
            auto outcome = run_stage(stage, [&](Stage& st) {
                evaluate_one(baseline.id, -1.0, 0, 0, baseline.make(), "-", st);
            });
            manifest.add_stage(stage.record(outcome.cached, outcome.seconds));
        }
    }

    // ---- stage: report ----
    {
        Stage stage("report", paths.report_dir);
        stage.set_config(json{{"fractions", cfg.fractions}});
        if (fs::is_directory(paths.eval_dir)) {
            std::vector<std::string> report_inputs;
            for (const auto& entry : fs::directory_iterator(paths.eval_dir)) {
                const fs::path rpath = entry.path() / "report.json";
                if (fs::exists(rpath)) report_inputs.push_back(rpath.string());
            }
            std::sort(report_inputs.begin(), report_inputs.end());
            for (const auto& f : report_inputs) stage.add_input_file(f);
        }
        auto outcome = run_stage(stage, [&](Stage& st) {
            emit_report(cfg.out_dir);
            for (const auto& f : list_tree_files(paths.report_dir)) {
                if (f.find("stage.json") == std::string::npos) st.add_output_file(f);
            }
        });
        manifest.add_stage(stage.record(outcome.cached, outcome.seconds));
    }

    bool zero_recompute = true;
    for (const auto& s : manifest.json()["stages"]) {
        if (!s.value("cached", false)) zero_recompute = false;
    }
    manifest.set_note("zero_recompute", zero_recompute);
    manifest.save();

    return {cfg.out_dir, manifest.json()};
}

namespace {

void draw_fraction_plot(const std::string& png_path, const std::vector<double>& x,
                        const std::vector<double>& y, const std::string& label) {
    const int width = 480, height = 320, margin = 48;
    cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::rectangle(canvas, {margin, margin}, {width - margin, height - margin}, cv::Scalar(0, 0, 0),
                  1);
    if (!x.empty()) {
        const double x_lo = *std::min_element(x.begin(), x.end());
        const double x_hi = *std::max_element(x.begin(), x.end());
        double y_lo = *std::min_element(y.begin(), y.end());
        double y_hi = *std::max_element(y.begin(), y.end());
        if (y_hi - y_lo < 1e-9) {
            y_lo -= 1.0;
            y_hi += 1.0;
        }
        auto px = [&](double v) {
            const double t = x_hi > x_lo ? (v - x_lo) / (x_hi - x_lo) : 0.5;
            return static_cast<int>(margin + t * (width - 2 * margin));
        };
        auto py = [&](double v) {
            const double t = (v - y_lo) / (y_hi - y_lo);
            return static_cast<int>(height - margin - t * (height - 2 * margin));
        };
        for (std::size_t i = 0; i + 1 < x.size(); ++i) {
            cv::line(canvas, {px(x[i]), py(y[i])}, {px(x[i + 1]), py(y[i + 1])},
                     cv::Scalar(160, 60, 20), 2);
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            cv::circle(canvas, {px(x[i]), py(y[i])}, 3, cv::Scalar(40, 40, 200), cv::FILLED);
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.2f", x[i]);
            cv::putText(canvas, buf, {px(x[i]) - 14, height - margin + 16},
                        cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(0, 0, 0), 1);
        }
    }
    cv::putText(canvas, label, {margin, margin - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(0, 0, 0), 1);
    cv::putText(canvas, "key-share fraction", {width / 2 - 60, height - 8},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
    cv::imwrite(png_path, canvas);
}

}  // namespace

void emit_report(const std::string& out_dir) {
    const PipelinePaths paths(out_dir);
    fs::create_directories(paths.report_dir);

    std::vector<std::pair<std::string, json>> reports;
    if (fs::is_directory(paths.eval_dir)) {
        std::vector<std::string> run_ids;
        for (const auto& entry : fs::directory_iterator(paths.eval_dir)) {
            if (entry.is_directory()) run_ids.push_back(entry.path().filename().string());
        }
        std::sort(run_ids.begin(), run_ids.end());
        for (const auto& id : run_ids) {
            const fs::path rpath = fs::path(paths.eval_dir) / id / "report.json";
            if (!fs::exists(rpath)) {
                reports.emplace_back(id, json());  // absent cell
                continue;
            }
            try {
                reports.emplace_back(id, read_json_file(rpath.string()));
            } catch (...) {
                reports.emplace_back(id, json());
            }
        }
    }

    // Comparison table: one row per run (ours per fraction/cell + baselines).
    json table = json::array();
    std::ostringstream csv;
    csv << "run,fraction,gan,aug,tpr,rank1,rank5,map,mse,mse_std,psnr,psnr_std,ssim,ssim_std,"
           "perceptual,perceptual_std\n";
    for (const auto& [id, rep] : reports) {
        json row;
        row["run"] = id;
        if (rep.is_null() || rep.empty()) {
            row["absent"] = true;
            table.push_back(row);
            csv << id << ",,,,,,,,,,,,,,,\n";
            continue;
        }
        const auto& prov = rep["provenance"];
        const bool ours = prov.contains("fraction");
        row["fraction"] = ours ? json(prov["fraction"]) : json();
        row["gan"] = prov.value("gan", 0);
        row["aug"] = prov.value("aug", 0);
        row["tpr"] = rep["accuracy"]["tpr_at_far"];
        row["rank1"] = rep["accuracy"]["rank1"];
        row["rank5"] = rep["accuracy"]["rank5"];
        row["map"] = rep["accuracy"]["map"];
        for (const char* m : {"mse", "psnr", "ssim", "perceptual"}) {
            row[m] = rep["aggregate"][m]["mean"];
            row[std::string(m) + "_std"] = rep["aggregate"][m]["std"];
        }
        table.push_back(row);
        csv << id << "," << (ours ? std::to_string(prov["fraction"].get<double>()) : "") << ","
            << prov.value("gan", 0) << "," << prov.value("aug", 0) << ","
            << rep["accuracy"]["tpr_at_far"].get<double>() << ","
            << rep["accuracy"]["rank1"].get<double>() << ","
            << rep["accuracy"]["rank5"].get<double>() << ","
            << rep["accuracy"]["map"].get<double>();
        for (const char* m : {"mse", "psnr", "ssim", "perceptual"}) {
            csv << "," << rep["aggregate"][m]["mean"].get<double>() << ","
                << rep["aggregate"][m]["std"].get<double>();
        }
        csv << "\n";
    }
    write_json_file((fs::path(paths.report_dir) / "tables.json").string(), table);
    write_text((fs::path(paths.report_dir) / "tables.csv").string(), csv.str());

    // Fraction plot over the (gan, aug) = (1, 1) rows.
    std::vector<std::pair<double, std::pair<double, double>>> points;
    for (const auto& [id, rep] : reports) {
        if (rep.is_null() || rep.empty()) continue;
        const auto& prov = rep["provenance"];
        if (!prov.contains("fraction")) continue;
        if (prov.value("gan", 0) != 1 || prov.value("aug", 0) != 1) continue;
        points.push_back({prov["fraction"].get<double>(),
                          {rep["aggregate"]["psnr"]["mean"].get<double>(),
                           rep["accuracy"]["tpr_at_far"].get<double>()}});
    }
    std::sort(points.begin(), points.end());
    json plot;
    plot["x"] = json::array();
    plot["psnr"] = json::array();
    plot["tpr"] = json::array();
    std::vector<double> xs, psnrs, tprs;
    for (const auto& [f, yv] : points) {
        plot["x"].push_back(f);
        plot["psnr"].push_back(yv.first);
        plot["tpr"].push_back(yv.second);
        xs.push_back(f);
        psnrs.push_back(yv.first);
        tprs.push_back(yv.second);
    }
    write_json_file((fs::path(paths.report_dir) / "plot.json").string(), plot);
    draw_fraction_plot((fs::path(paths.report_dir) / "plot_psnr.png").string(), xs, psnrs,
                       "eval PSNR (dB) vs key-share fraction");
    draw_fraction_plot((fs::path(paths.report_dir) / "plot_tpr.png").string(), xs, tprs,
                       "eval TPR@FAR vs key-share fraction");

    // Image grid: rows = original, encrypted, key recovery, attack recovery
    // per fraction; columns = saved previews.
    std::vector<std::string> grid_rows{"baseline_original", "baseline_protected",
                                       "baseline_keymodel"};
    for (const auto& [f, yv] : points) {
        (void)yv;
        grid_rows.push_back(cell_id(f, true, true));
    }
    std::vector<std::vector<Tensor>> rows;
    for (const auto& id : grid_rows) {
        std::vector<Tensor> row;
        for (int k = 0; k < 8; ++k) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "recon_%03d.png", k);
            const fs::path p = fs::path(paths.eval_dir) / id / buf;
            if (!fs::exists(p)) break;
            row.push_back(load_image_png(p.string()));
        }
        if (!row.empty()) rows.push_back(std::move(row));
    }
    if (!rows.empty()) {
        const std::int64_t h = rows[0][0].dim(2), w = rows[0][0].dim(3), pad = 2;
        std::size_t cols = 0;
        for (const auto& r : rows) cols = std::max(cols, r.size());
        Tensor grid({1, 3, static_cast<std::int64_t>(rows.size()) * (h + pad) + pad,
                     static_cast<std::int64_t>(cols) * (w + pad) + pad});
        grid.fill(1.0);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t c = 0; c < rows[r].size(); ++c) {
                const Tensor& img = rows[r][c];
                for (std::int64_t ch = 0; ch < 3; ++ch) {
                    for (std::int64_t y = 0; y < h; ++y) {
                        for (std::int64_t x = 0; x < w; ++x) {
                            grid.at(0, ch, static_cast<std::int64_t>(r) * (h + pad) + pad + y,
                                    static_cast<std::int64_t>(c) * (w + pad) + pad + x) =
                                img.at(0, ch, y, x);
                        }
                    }
                }
            }
        }
        save_image_png((fs::path(paths.report_dir) / "grid.png").string(), grid);
    }
}

}  // namespace avih::harness
