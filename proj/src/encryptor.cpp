#include "avih/encryptor.hpp"

#include <omp.h>

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "avih/digest.hpp"
#include "avih/nn.hpp"
#include "avih/rng.hpp"

namespace avih::encryptor {

std::string EncryptionConfig::digest() const {
    nlohmann::json j{
        {"steps", steps},
        {"optimizer", {{"name", optimizer.name}, {"learning_rate", optimizer.learning_rate}}},
        {"weights",
         {{"lambda1", weights.lambda1},
          {"lambda2", weights.lambda2},
          {"lambda3", weights.lambda3}}},
        {"patch_spec",
         {{"height", patch_spec.height}, {"width", patch_spec.width}, {"stride", patch_spec.stride}}},
        {"init_mode", init_mode == InitMode::from_noise ? "from_noise" : "from_original"},
        {"seed", seed}};
    return sha256_hex(j.dump());
}

Tensor init_encrypted_image(const Tensor& x, const EncryptionConfig& cfg) {
    cfg.validate();
    AVIH_CHECK(x.rank() == 4, "init_encrypted_image: expected B x C x H x W");
    if (cfg.init_mode == InitMode::from_original) return x;
    Tensor out(x.shape());
    Rng rng(derive_seed(cfg.seed, 0x17));
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = rng.uniform();
    return out;
}

namespace {

void clamp01(Tensor& t) {
    double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = std::min(1.0, std::max(0.0, p[i]));
}

std::string key_model_id_of(const models::ImageToImageNetwork& fk) {
    if (const auto* m = dynamic_cast<const nn::Model*>(&fk)) {
        return m->weight_digest().substr(0, 16);
    }
    return "unidentified";
}

}  // namespace

EncryptionResult encrypt_image(const Tensor& x, const models::EmbeddingNetwork& fs,
                               const models::ImageToImageNetwork& fk,
                               const EncryptionConfig& cfg) {
    cfg.validate();
    AVIH_CHECK(x.rank() == 4 && x.dim(1) == 3, "encrypt_image: expected B x 3 x H x W");
    cfg.patch_spec.validate(x.dim(2), x.dim(3));

    EncryptionResult result;
    result.config_hash = cfg.digest();
    result.key_model_id = key_model_id_of(fk);
    result.seed = cfg.seed;
    result.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));

    Var x_const = constant(x);
    // Target embeddings are fixed throughout; compute once.
    Tensor target_emb = fs.embed(x_const)->value;

    Var x_prime = leaf(init_encrypted_image(x, cfg));
    clamp01(x_prime->value);
    nn::Adam opt({x_prime}, cfg.optimizer.learning_rate);

    for (int step = 0; step < cfg.steps; ++step) {
        Var emb = fs.embed(x_prime);
        Var lt = batch_l2_norm_mean(sub(constant(target_emb), emb));
        Var ld = losses::difference_loss(x_const, x_prime);
        Var lv = losses::variance_consistency_loss(x_prime, cfg.patch_spec);
        Var recovered = fk.forward(x_prime);
        Var lr = losses::recovery_loss(x_const, recovered);
        Var total = add(add(sub(lt, scale(ld, cfg.weights.lambda1)),
                            scale(lv, cfg.weights.lambda2)),
                        scale(lr, cfg.weights.lambda3));

        StepLosses sl{lt->value.item(), ld->value.item(), lv->value.item(), lr->value.item(),
                      total->value.item()};
        if (!std::isfinite(sl.total) || !std::isfinite(sl.task) || !std::isfinite(sl.difference) ||
            !std::isfinite(sl.variance) || !std::isfinite(sl.recovery)) {
            std::ostringstream msg;
            msg << "encrypt_image: non-finite loss at step " << step << " (task=" << sl.task
                << ", difference=" << sl.difference << ", variance=" << sl.variance
                << ", recovery=" << sl.recovery << ")";
            throw std::runtime_error(msg.str());
        }

        opt.zero_grad();
        backward(total);
        opt.step();
        clamp01(x_prime->value);
        result.loss_trace.push_back(sl);
    }

    result.x_prime = x_prime->value;
    return result;
}

GalleryEncryption encrypt_gallery(const std::vector<Tensor>& gallery,
                                  const models::EmbeddingNetwork& fs,
                                  const models::ImageToImageNetwork& fk,
                                  const EncryptionConfig& cfg) {
    cfg.validate();
    GalleryEncryption out;
    out.results.resize(gallery.size());
    out.errors.assign(gallery.size(), "");
    const std::int64_t n = static_cast<std::int64_t>(gallery.size());
#pragma omp parallel for schedule(dynamic) if (n > 1 && !omp_in_parallel())
    for (std::int64_t i = 0; i < n; ++i) {
        try {
            out.results[i] = encrypt_image(gallery[i], fs, fk, cfg);
        } catch (const std::exception& e) {
            out.errors[i] = e.what();
        }
    }
    return out;
}

Tensor recover(const models::ImageToImageNetwork& fk, const Tensor& x_prime) {
    AVIH_CHECK(x_prime.rank() == 4, "recover: expected B x C x H x W");
    Tensor out = fk.forward(constant(x_prime))->value;
    clamp01(out);
    return out;
}

}  // namespace avih::encryptor
