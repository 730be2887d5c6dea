// avih: AVIH gallery encryption, the dual-strategy reconstruction attack, and
// the desk-scale experiment pipeline around them.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "avih/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace avih;

namespace {

// Relative output paths resolve under AVIH_OUT_ROOT when it is set.
std::string resolve_out(const std::string& path) {
    const char* root = std::getenv("AVIH_OUT_ROOT");
    if (root && *root && !fs::path(path).is_absolute()) {
        return (fs::path(root) / path).string();
    }
    return path;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    AVIH_CHECK(static_cast<bool>(in), "cannot open " + path);
    json j;
    in >> j;
    return j;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    AVIH_CHECK(static_cast<bool>(out), "cannot write " + path);
    out << j.dump(2) << "\n";
}

struct GenDataArgs {
    std::string out;
    int identities = 64;
    int images_per_id = 4;
    int size = 64;
    int id_offset = 0;
    int image_offset = 0;
    std::uint64_t seed = 1;
};

struct TrainServiceArgs {
    std::string data, out;
    int size = 64;
    std::uint64_t seed = 2;
    int base_channels = 16;
    int embedding_dim = 128;
    int max_epochs = 40;
    double target_rank1 = 0.9;
};

struct EncryptArgs {
    std::string gallery, service, out;
    int size = 64;
    int steps = 800;
    double lr = 0.01;
    double lambda1 = 0.03, lambda2 = 3.0, lambda3 = 0.5;
    int kernel = 4, stride = 2;
    std::string init_mode = "from_noise";
    std::uint64_t key_seed = 3;
    int key_depth = 4, key_base = 32;
    int service_base = 16, service_dim = 128;
};

struct AttackArgs {
    std::string encrypted, service, aux, out;
    int size = 64;
    double fraction = 0.7;
    int steps = 1600, batch = 32;
    double identity_weight = 30.0;
    bool no_gan = false, no_aug = false, quantized = false;
    std::string convention = "standard";
    std::uint64_t seed = 4, split_seed = 4;
    int depth = 4, base = 32;
    int service_base = 16, service_dim = 128;
};

struct EvaluateArgs {
    std::string original, encrypted, surrogate, service_eval, out;
    int size = 64;
    double fraction = 0.7;  // only used to rebuild the same pool split
    double far = 0.01;
    std::uint64_t split_seed = 4;
    int depth = 4, base = 32;
    int service_base = 16, service_dim = 128;
};

models::ServiceModel load_service(const std::string& ckpt, int base, int dim) {
    models::ServiceModelSpec spec;
    spec.base_channels = base;
    spec.embedding_dim = dim;
    models::ServiceModel model(spec, 0);
    model.load(ckpt);
    return model;
}

int cmd_gen_data(const GenDataArgs& a) {
    harness::SyntheticDatasetSpec spec{a.identities, a.images_per_id, a.size,
                                       a.id_offset,  a.image_offset,  a.seed};
    harness::generate_synthetic_dataset(spec, resolve_out(a.out));
    std::cout << json{{"out", resolve_out(a.out)}, {"files", a.identities * a.images_per_id}}.dump()
              << "\n";
    return 0;
}

int cmd_train_service(const TrainServiceArgs& a) {
    auto data = harness::ingest_gallery(a.data, a.size);
    models::ServiceModelSpec spec;
    spec.base_channels = a.base_channels;
    spec.embedding_dim = a.embedding_dim;
    models::ServiceModel model(spec, a.seed);
    models::ServiceTrainOptions opts;
    opts.max_epochs = a.max_epochs;
    opts.target_rank1 = a.target_rank1;
    opts.seed = derive_seed(a.seed, 0x7241);
    auto summary = models::train_service_model(model, data.set, opts);
    const std::string out = resolve_out(a.out);
    const auto parent = fs::path(out).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    model.save(out);
    json sidecar{{"seed", a.seed},
                 {"epochs_run", summary.epochs_run},
                 {"holdout_rank1", summary.holdout_rank1},
                 {"converged", summary.converged},
                 {"warning", summary.converged ? "" : "rank-1 target not reached"},
                 {"weight_digest", model.weight_digest()}};
    write_json_file(out + ".json", sidecar);
    std::cout << sidecar.dump() << "\n";
    return 0;
}

int cmd_encrypt(const EncryptArgs& a) {
    auto gallery = harness::ingest_gallery(a.gallery, a.size);
    auto fs_target = load_service(a.service, a.service_base, a.service_dim);
    models::UNetSpec kspec;
    kspec.depth = a.key_depth;
    kspec.base_channels = a.key_base;
    models::UNet fk(kspec, a.key_seed);

    encryptor::EncryptionConfig cfg;
    cfg.steps = a.steps;
    cfg.optimizer.learning_rate = a.lr;
    cfg.weights.lambda1 = a.lambda1;
    cfg.weights.lambda2 = a.lambda2;
    cfg.weights.lambda3 = a.lambda3;
    cfg.patch_spec = {a.kernel, a.kernel, a.stride};
    cfg.init_mode = a.init_mode == "from_original" ? encryptor::InitMode::from_original
                                                   : encryptor::InitMode::from_noise;
    cfg.seed = derive_seed(a.key_seed, 0xec);

    std::vector<Tensor> images;
    for (std::int64_t i = 0; i < gallery.set.images.dim(0); ++i)
        images.push_back(harness::image_row(gallery.set.images, i));
    auto enc = encryptor::encrypt_gallery(images, fs_target, fk, cfg);
    int failures = 0;
    for (const auto& e : enc.errors)
        if (!e.empty()) ++failures;
    AVIH_CHECK(failures == 0, "encrypt: " + std::to_string(failures) + " image(s) failed");

    const std::string out = resolve_out(a.out);
    fs::create_directories(out);
    fk.save((fs::path(out) / "key_model.bin").string());
    harness::encrypted_store::save(out, enc.results);
    json summary{{"config_hash", enc.results.front().config_hash},
                 {"key_model_id", enc.results.front().key_model_id},
                 {"seed", cfg.seed},
                 {"gallery_size", enc.results.size()},
                 {"labels", gallery.set.labels},
                 {"id_names", gallery.id_names}};
    write_json_file((fs::path(out) / "summary.json").string(), summary);
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_attack(const AttackArgs& a) {
    const json summary = read_json_file((fs::path(a.encrypted) / "summary.json").string());
    const std::int64_t gallery_size = summary.at("gallery_size").get<std::int64_t>();
    const auto split = attack::split_key_share(gallery_size, a.fraction, a.split_seed);

    std::vector<std::string> accessed;
    harness::FileAccessHook hook = [&accessed](const std::string& p) { accessed.push_back(p); };
    Tensor train_images =
        harness::encrypted_store::load_images(a.encrypted, split.train_indices, a.quantized, hook);
    Tensor aux_images;
    if (!a.no_gan) {
        auto aux = harness::ingest_gallery(a.aux, a.size, hook);
        aux_images = aux.set.images;
    }
    accessed.push_back(a.service);
    auto fs_target = load_service(a.service, a.service_base, a.service_dim);

    attack::AttackConfig cfg;
    cfg.steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.identity_weight = a.identity_weight;
    cfg.use_gan_loss = !a.no_gan;
    cfg.use_augmented_identity = !a.no_aug;
    cfg.gan_convention = a.convention == "printed" ? losses::GanConvention::printed
                                                   : losses::GanConvention::standard;
    cfg.surrogate.depth = a.depth;
    cfg.surrogate.base_channels = a.base;
    cfg.seed = a.seed;

    auto run = attack::train_attacker(train_images, fs_target, aux_images, cfg);
    run.key_share_fraction = a.fraction;

    const std::string out = resolve_out(a.out);
    fs::create_directories(out);
    run.attacker_model->save((fs::path(out) / "surrogate.bin").string());
    if (run.discriminator) run.discriminator->save((fs::path(out) / "discriminator.bin").string());
    std::sort(accessed.begin(), accessed.end());
    json rm{{"key_share_fraction", a.fraction},
            {"train_subset_size", split.train_indices.size()},
            {"pool_size", split.pool_size},
            {"surrogate_digest", run.attacker_model->weight_digest()},
            {"file_access", accessed},
            {"final_identity_loss", run.training_log.back().identity}};
    write_json_file((fs::path(out) / "run_manifest.json").string(), rm);
    std::cout << rm.dump() << "\n";
    return 0;
}

int cmd_evaluate(const EvaluateArgs& a) {
    auto gallery = harness::ingest_gallery(a.original, a.size);
    const json summary = read_json_file((fs::path(a.encrypted) / "summary.json").string());
    const std::int64_t gallery_size = summary.at("gallery_size").get<std::int64_t>();
    AVIH_CHECK(gallery_size == gallery.set.images.dim(0),
               "evaluate: original gallery and encrypted store sizes differ");
    const auto split = attack::split_key_share(gallery_size, a.fraction, a.split_seed);

    std::vector<int> labels_eval;
    std::vector<Tensor> originals;
    for (auto i : split.eval_indices) {
        labels_eval.push_back(gallery.set.labels[static_cast<std::size_t>(i)]);
        originals.push_back(harness::image_row(gallery.set.images, i));
    }
    Tensor originals_eval = harness::stack_images(originals);
    Tensor encrypted_eval =
        harness::encrypted_store::load_images(a.encrypted, split.eval_indices, false);

    models::UNetSpec sspec;
    sspec.depth = a.depth;
    sspec.base_channels = a.base;
    models::UNet surrogate(sspec, 0);
    surrogate.load(a.surrogate);
    Tensor recon = attack::reconstruct(surrogate, encrypted_eval);

    auto fs_eval = load_service(a.service_eval, a.service_base, a.service_dim);
    auto protocol = metrics::VerificationProtocol::from_labels(labels_eval, a.far);
    auto report = metrics::evaluate_reconstruction(
        originals_eval, recon, fs_eval, labels_eval, protocol,
        json{{"surrogate", surrogate.weight_digest().substr(0, 16)},
             {"eval_model", fs_eval.weight_digest().substr(0, 16)},
             {"images", labels_eval.size()}});

    const std::string out = resolve_out(a.out);
    fs::create_directories(out);
    write_json_file((fs::path(out) / "report.json").string(), report.to_json());
    std::ofstream csv((fs::path(out) / "per_image.csv").string());
    csv << report.to_csv();
    std::cout << report.to_json()["aggregate"].dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adversarial visual information hiding: encryption, reconstruction attack, "
                 "metrics and experiment pipeline"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic labeled image directory");
    gen->add_option("--out", gd.out, "output directory")->required();
    gen->add_option("--identities", gd.identities);
    gen->add_option("--images-per-id", gd.images_per_id);
    gen->add_option("--size", gd.size);
    gen->add_option("--id-offset", gd.id_offset);
    gen->add_option("--image-offset", gd.image_offset);
    gen->add_option("--seed", gd.seed);

    TrainServiceArgs ts;
    auto* train = app.add_subcommand("train-service", "train the embedding service model");
    train->add_option("--data", ts.data, "labeled image directory")->required();
    train->add_option("--out", ts.out, "checkpoint path")->required();
    train->add_option("--size", ts.size);
    train->add_option("--seed", ts.seed);
    train->add_option("--base-channels", ts.base_channels);
    train->add_option("--embedding-dim", ts.embedding_dim);
    train->add_option("--epochs", ts.max_epochs);
    train->add_option("--target-rank1", ts.target_rank1);

    EncryptArgs en;
    auto* enc = app.add_subcommand("encrypt", "encrypt a gallery against a fixed key model");
    enc->add_option("--gallery", en.gallery)->required();
    enc->add_option("--service", en.service)->required();
    enc->add_option("--out", en.out)->required();
    enc->add_option("--size", en.size);
    enc->add_option("--steps", en.steps);
    enc->add_option("--lr", en.lr);
    enc->add_option("--lambda1", en.lambda1);
    enc->add_option("--lambda2", en.lambda2);
    enc->add_option("--lambda3", en.lambda3);
    enc->add_option("--kernel", en.kernel);
    enc->add_option("--stride", en.stride);
    enc->add_option("--init", en.init_mode)->check(CLI::IsMember({"from_noise", "from_original"}));
    enc->add_option("--key-seed", en.key_seed);
    enc->add_option("--key-depth", en.key_depth);
    enc->add_option("--key-base", en.key_base);
    enc->add_option("--service-base", en.service_base);
    enc->add_option("--service-dim", en.service_dim);

    AttackArgs at;
    auto* att = app.add_subcommand("attack", "train the surrogate key model on encrypted images");
    att->add_option("--encrypted", at.encrypted)->required();
    att->add_option("--service", at.service)->required();
    att->add_option("--aux", at.aux);
    att->add_option("--out", at.out)->required();
    att->add_option("--size", at.size);
    att->add_option("--fraction", at.fraction);
    att->add_option("--steps", at.steps);
    att->add_option("--batch", at.batch);
    att->add_option("--identity-weight", at.identity_weight);
    att->add_flag("--no-gan", at.no_gan);
    att->add_flag("--no-aug", at.no_aug);
    att->add_flag("--quantized", at.quantized, "train from the 8-bit PNG exports");
    att->add_option("--convention", at.convention)->check(CLI::IsMember({"standard", "printed"}));
    att->add_option("--seed", at.seed);
    att->add_option("--split-seed", at.split_seed);
    att->add_option("--depth", at.depth);
    att->add_option("--base", at.base);
    att->add_option("--service-base", at.service_base);
    att->add_option("--service-dim", at.service_dim);

    EvaluateArgs ev;
    auto* eval = app.add_subcommand("evaluate", "score reconstructions of the held-out pool");
    eval->add_option("--original", ev.original)->required();
    eval->add_option("--encrypted", ev.encrypted)->required();
    eval->add_option("--surrogate", ev.surrogate)->required();
    eval->add_option("--service-eval", ev.service_eval)->required();
    eval->add_option("--out", ev.out)->required();
    eval->add_option("--size", ev.size);
    eval->add_option("--fraction", ev.fraction);
    eval->add_option("--far", ev.far);
    eval->add_option("--split-seed", ev.split_seed);
    eval->add_option("--depth", ev.depth);
    eval->add_option("--base", ev.base);
    eval->add_option("--service-base", ev.service_base);
    eval->add_option("--service-dim", ev.service_dim);

    std::string report_dir;
    auto* rep = app.add_subcommand("report", "re-emit tables, grids and plots for a run");
    rep->add_option("--run", report_dir, "pipeline output directory")->required();

    std::string config_path, pipe_out;
    std::vector<double> pipe_fractions, pipe_ablation;
    std::uint64_t seed_data = 0, seed_service = 0, seed_key = 0, seed_attack = 0, seed_eval = 0;
    bool has_quantized = false;
    int pipe_image_size = 0, pipe_enc_steps = 0, pipe_attack_steps = 0, pipe_attack_batch = 0;
    auto* pipe = app.add_subcommand("pipeline", "run the full experiment pipeline");
    pipe->add_option("--config", config_path, "RunConfig JSON file");
    pipe->add_option("--out", pipe_out, "output directory (overrides config)");
    pipe->add_option("--fraction", pipe_fractions, "key-share fractions (overrides config)");
    pipe->add_option("--ablation-fraction", pipe_ablation,
                     "fractions at which to run the 2x2 ablation grid");
    pipe->add_option("--seed-data", seed_data);
    pipe->add_option("--seed-service", seed_service);
    pipe->add_option("--seed-key", seed_key);
    pipe->add_option("--seed-attack", seed_attack);
    pipe->add_option("--seed-eval", seed_eval);
    pipe->add_option("--image-size", pipe_image_size);
    pipe->add_option("--encryption-steps", pipe_enc_steps);
    pipe->add_option("--attack-steps", pipe_attack_steps);
    pipe->add_option("--attack-batch", pipe_attack_batch);
    pipe->add_flag("--quantized", has_quantized, "attack from the 8-bit PNG exports");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gd);
        if (train->parsed()) return cmd_train_service(ts);
        if (enc->parsed()) return cmd_encrypt(en);
        if (att->parsed()) return cmd_attack(at);
        if (eval->parsed()) return cmd_evaluate(ev);
        if (rep->parsed()) {
            harness::emit_report(report_dir);
            std::cout << json{{"report", (fs::path(report_dir) / "report").string()}}.dump()
                      << "\n";
            return 0;
        }
        if (pipe->parsed()) {
            harness::RunConfig cfg;
            if (!config_path.empty())
                cfg = harness::RunConfig::from_json(read_json_file(config_path));
            if (!pipe_out.empty()) cfg.out_dir = pipe_out;
            cfg.out_dir = resolve_out(cfg.out_dir);
            if (!pipe_fractions.empty()) cfg.fractions = pipe_fractions;
            if (!pipe_ablation.empty()) cfg.ablation_fractions = pipe_ablation;
            if (seed_data) cfg.seeds.data = seed_data;
            if (seed_service) cfg.seeds.service = seed_service;
            if (seed_key) cfg.seeds.key = seed_key;
            if (seed_attack) cfg.seeds.attack = seed_attack;
            if (seed_eval) cfg.seeds.eval = seed_eval;
            if (pipe_image_size) cfg.image_size = pipe_image_size;
            if (pipe_enc_steps) cfg.encryption_steps = pipe_enc_steps;
            if (pipe_attack_steps) cfg.attack_steps = pipe_attack_steps;
            if (pipe_attack_batch) cfg.attack_batch = pipe_attack_batch;
            if (has_quantized) cfg.attack_from_quantized = true;
            auto result = harness::run_pipeline(cfg);
            std::cout << json{{"out_dir", result.out_dir},
                              {"stages", result.manifest["stages"].size()}}
                             .dump()
                      << "\n";
            return 0;
        }
    } catch (const ContractViolation& e) {
        std::cerr << json{{"error", e.what()}, {"kind", "contract"}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"kind", "runtime"}}.dump() << "\n";
        return 2;
    }
    return 0;
}
