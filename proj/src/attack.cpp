#include "avih/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "avih/nn.hpp"

namespace avih::attack {

KeyShareSplit split_key_share(std::int64_t gallery_size, double fraction, std::uint64_t seed) {
    AVIH_CHECK(gallery_size >= 0, "split_key_share: negative gallery size");
    AVIH_CHECK(fraction > 0.0 && fraction <= 1.0, "split_key_share: fraction must be in (0, 1]");
    KeyShareSplit split;
    if (gallery_size == 0) return split;

    std::vector<std::int64_t> order(static_cast<std::size_t>(gallery_size));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0x51));
    for (std::int64_t i = gallery_size - 1; i > 0; --i) {
        std::int64_t j = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[i], order[j]);
    }

    split.pool_size = (gallery_size + 1) / 2;
    const std::int64_t take =
        std::llround(fraction * static_cast<double>(split.pool_size));
    AVIH_CHECK(take >= 1, "split_key_share: fraction yields an empty training subset");

    split.train_indices.assign(order.begin(), order.begin() + take);
    split.eval_indices.assign(order.begin() + split.pool_size, order.end());
    std::sort(split.train_indices.begin(), split.train_indices.end());
    std::sort(split.eval_indices.begin(), split.eval_indices.end());
    return split;
}

namespace {

Tensor gather_images(const Tensor& images, const std::vector<std::int64_t>& idx) {
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

void clamp01(Tensor& t) {
    double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = std::min(1.0, std::max(0.0, p[i]));
}

}  // namespace

AttackRun train_attacker(const Tensor& train_subset, const models::EmbeddingNetwork& fs,
                         const Tensor& aux, const AttackConfig& cfg) {
    cfg.validate();
    AVIH_CHECK(train_subset.rank() == 4 && train_subset.dim(0) >= 1,
               "train_attacker: empty encrypted training subset");
    AVIH_CHECK(!cfg.use_gan_loss || (aux.rank() == 4 && aux.dim(0) >= 1),
               "train_attacker: auxiliary dataset must be nonempty");

    const std::int64_t n_train = train_subset.dim(0);
    const std::int64_t n_aux = cfg.use_gan_loss ? aux.dim(0) : 0;

    AttackRun run;
    run.attacker_model =
        std::make_shared<models::UNet>(cfg.surrogate, derive_seed(cfg.seed, 1));
    if (cfg.use_gan_loss) {
        run.discriminator = std::make_shared<models::PatchDiscriminator>(
            cfg.discriminator, derive_seed(cfg.seed, 2));
    }
    run.training_log.reserve(static_cast<std::size_t>(cfg.steps));

    auto gen_params = run.attacker_model->params();
    nn::Adam gen_opt(gen_params, cfg.generator_opt.lr, cfg.generator_opt.beta1,
                     cfg.generator_opt.beta2);
    std::unique_ptr<nn::Adam> disc_opt;
    if (cfg.use_gan_loss) {
        disc_opt = std::make_unique<nn::Adam>(run.discriminator->params(),
                                              cfg.discriminator_opt.lr, cfg.discriminator_opt.beta1,
                                              cfg.discriminator_opt.beta2);
    }

    losses::LossWeights weights;
    weights.attack_identity_weight = cfg.identity_weight;
    Rng rng(derive_seed(cfg.seed, 3));

    double acc_gen = 0.0, acc_disc = 0.0, acc_id = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        // Batches are sampled with replacement so small key-share subsets
        // still fill a full batch.
        std::vector<std::int64_t> idx_train(static_cast<std::size_t>(cfg.batch_size));
        for (auto& i : idx_train)
            i = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(n_train)));
        Var x_prime = constant(gather_images(train_subset, idx_train));

        Var fake = run.attacker_model->forward(x_prime);

        StepLog log;
        if (cfg.use_gan_loss) {
            std::vector<std::int64_t> idx_aux(static_cast<std::size_t>(cfg.batch_size));
            for (auto& i : idx_aux)
                i = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(n_aux)));
            Var real = constant(gather_images(aux, idx_aux));

            Var d_fake = run.discriminator->forward(detach(fake));
            Var d_real = run.discriminator->forward(real);
            Var d_loss = losses::discriminator_loss(d_fake, d_real, cfg.gan_convention);
            log.discriminator = d_loss->value.item();
            disc_opt->zero_grad();
            backward(d_loss);
            disc_opt->step();
        }

        // Generator step against the freshly updated discriminator.
        Var recon_branch = fake;
        if (cfg.use_augmented_identity && !cfg.augmentation.is_identity()) {
            std::vector<AugmentationDescriptor> descriptors;
            descriptors.reserve(static_cast<std::size_t>(cfg.batch_size));
            for (int b = 0; b < cfg.batch_size; ++b)
                descriptors.push_back(sample_augmentation(cfg.augmentation, rng));
            recon_branch = apply_augmentation(fake, descriptors);
        }
        Var id_loss = batch_l2_norm_mean(sub(fs.embed(recon_branch), fs.embed(x_prime)));
        log.identity = id_loss->value.item();

        Var g_loss;
        if (cfg.use_gan_loss) {
            Var d_fake2 = run.discriminator->forward(fake);
            g_loss = losses::attacker_generator_loss(d_fake2, id_loss, weights,
                                                     cfg.gan_convention);
        } else {
            g_loss = scale(id_loss, cfg.identity_weight);
        }
        log.generator = g_loss->value.item();

        if (!std::isfinite(log.generator) || !std::isfinite(log.discriminator) ||
            !std::isfinite(log.identity)) {
            std::ostringstream msg;
            msg << "train_attacker: non-finite loss at step " << step
                << " (generator=" << log.generator << ", discriminator=" << log.discriminator
                << ", identity=" << log.identity << ")";
            throw std::runtime_error(msg.str());
        }

        gen_opt.zero_grad();
        backward(g_loss);
        gen_opt.step();

        run.training_log.push_back(log);
        acc_gen += log.generator;
        acc_disc += log.discriminator;
        acc_id += log.identity;
        if ((step + 1) % 100 == 0) {
            run.snapshots.push_back({step + 1, acc_gen / 100.0, acc_disc / 100.0, acc_id / 100.0});
            acc_gen = acc_disc = acc_id = 0.0;
        }
    }
    return run;
}

Tensor reconstruct(const models::ImageToImageNetwork& attacker_model, const Tensor& encrypted) {
    AVIH_CHECK(encrypted.rank() == 4, "reconstruct: expected B x C x H x W");
    const std::int64_t n = encrypted.dim(0);
    const std::int64_t chunk = 16;  // bound graph memory on large batches
    Tensor out(encrypted.shape());
    const std::int64_t per = encrypted.numel() / std::max<std::int64_t>(n, 1);
    for (std::int64_t start = 0; start < n; start += chunk) {
        const std::int64_t stop = std::min(n, start + chunk);
        std::vector<std::int64_t> shape = encrypted.shape();
        shape[0] = stop - start;
        Tensor part(shape);
        std::copy(encrypted.data() + start * per, encrypted.data() + stop * per, part.data());
        Tensor rec = attacker_model.forward(constant(part))->value;
        std::copy(rec.data(), rec.data() + rec.numel(), out.data() + start * per);
    }
    clamp01(out);
    return out;
}

}  // namespace avih::attack
