#include "avih/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace avih::models {

namespace {

int level_channels(const UNetSpec& spec, int level) {
    // level 0 .. depth: base * 2^level, capped.
    long long c = static_cast<long long>(spec.base_channels) << level;
    return static_cast<int>(std::min<long long>(c, spec.max_channels));
}

}  // namespace

UNet::UNet(const UNetSpec& spec, std::uint64_t seed) : spec_(spec) {
    AVIH_CHECK(spec.depth >= 1 && spec.depth <= 6, "UNetSpec: depth must be in [1, 6]");
    AVIH_CHECK(spec.base_channels >= 1, "UNetSpec: base_channels must be >= 1");
    Rng rng(seed);
    int in_c = 3;
    for (int l = 0; l < spec.depth; ++l) {
        int out_c = level_channels(spec, l);
        enc_.push_back({nn::Conv2d(in_c, out_c, 3, 1, 1, rng), nn::Conv2d(out_c, out_c, 3, 1, 1, rng)});
        in_c = out_c;
    }
    int bott_c = level_channels(spec, spec.depth);
    bottleneck_ = {nn::Conv2d(in_c, bott_c, 3, 1, 1, rng), nn::Conv2d(bott_c, bott_c, 3, 1, 1, rng)};
    int cur = bott_c;
    for (int l = spec.depth - 1; l >= 0; --l) {
        int skip_c = level_channels(spec, l);
        up_.emplace_back(cur, skip_c, rng);
        dec_.push_back({nn::Conv2d(2 * skip_c, skip_c, 3, 1, 1, rng),
                        nn::Conv2d(skip_c, skip_c, 3, 1, 1, rng)});
        cur = skip_c;
    }
    head_ = nn::Conv2d(cur, 3, 1, 1, 0, rng);
}

Var UNet::run_block(const Block& b, const Var& x) const { return relu(b.c2(relu(b.c1(x)))); }

Var UNet::forward(const Var& images) const {
    AVIH_CHECK(images->value.rank() == 4 && images->value.dim(1) == 3,
               "UNet: input must be B x 3 x H x W");
    const std::int64_t h = images->value.dim(2), w = images->value.dim(3);
    const std::int64_t div = 1LL << spec_.depth;
    AVIH_CHECK(h % div == 0 && w % div == 0,
               "UNet: H and W must be divisible by 2^depth = " + std::to_string(div));
    Var s = images;
    std::vector<Var> skips;
    for (const auto& block : enc_) {
        s = run_block(block, s);
        skips.push_back(s);
        s = maxpool2x2(s);
    }
    s = run_block(bottleneck_, s);
    for (int l = spec_.depth - 1; l >= 0; --l) {
        const int i = spec_.depth - 1 - l;  // up_/dec_ are stored deep-to-shallow
        s = up_[i](s);
        s = concat_channels(skips[l], s);
        s = run_block(dec_[i], s);
    }
    return head_(s);
}

void UNet::named_params(std::vector<std::pair<std::string, Var>>& out) const {
    auto block = [&out](const std::string& prefix, const Block& b) {
        out.emplace_back(prefix + ".c1.w", b.c1.w);
        out.emplace_back(prefix + ".c1.b", b.c1.b);
        out.emplace_back(prefix + ".c2.w", b.c2.w);
        out.emplace_back(prefix + ".c2.b", b.c2.b);
    };
    for (std::size_t l = 0; l < enc_.size(); ++l) block("enc" + std::to_string(l), enc_[l]);
    block("bottleneck", bottleneck_);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        out.emplace_back("up" + std::to_string(i) + ".w", up_[i].w);
        out.emplace_back("up" + std::to_string(i) + ".b", up_[i].b);
        block("dec" + std::to_string(i), dec_[i]);
    }
    out.emplace_back("head.w", head_.w);
    out.emplace_back("head.b", head_.b);
}

PatchDiscriminator::PatchDiscriminator(const PatchDiscriminatorSpec& spec, std::uint64_t seed)
    : spec_(spec) {
    AVIH_CHECK(spec.layers >= 1, "PatchDiscriminatorSpec: layers must be >= 1");
    Rng rng(seed);
    int in_c = 3;
    for (int l = 0; l < spec.layers; ++l) {
        int out_c = std::min(spec.base_channels << l, spec.max_channels);
        convs_.emplace_back(in_c, out_c, 4, 2, 1, rng);
        if (l > 0) norms_.emplace_back(out_c);
        in_c = out_c;
    }
    proj_ = nn::Conv2d(in_c, 1, 4, 1, 1, rng);
}

Var PatchDiscriminator::forward(const Var& images) const {
    AVIH_CHECK(images->value.rank() == 4 && images->value.dim(1) == 3,
               "PatchDiscriminator: input must be B x 3 x H x W");
    AVIH_CHECK(images->value.dim(2) >= min_input_size() && images->value.dim(3) >= min_input_size(),
               "PatchDiscriminator: input smaller than the receptive requirement (need >= " +
                   std::to_string(min_input_size()) + " pixels)");
    Var s = images;
    for (std::size_t l = 0; l < convs_.size(); ++l) {
        s = convs_[l](s);
        if (l > 0) s = norms_[l - 1](s);
        s = leaky_relu(s, 0.2);
    }
    return tanh_probability(proj_(s), spec_.prob_eps);
}

int PatchDiscriminator::receptive_field() const {
    int rf = 1, jump = 1;
    for (int l = 0; l < spec_.layers; ++l) {
        rf += 3 * jump;  // kernel 4
        jump *= 2;
    }
    rf += 3 * jump;  // final kernel-4 stride-1 projection
    return rf;
}

int PatchDiscriminator::min_input_size() const {
    // Work the conv arithmetic backwards from a 1x1 final map:
    // projection (k4 s1 p1) needs >= 2, each strided block (k4 s2 p1) doubles.
    int need = 2;
    for (int l = 0; l < spec_.layers; ++l) need *= 2;
    return need;
}

void PatchDiscriminator::named_params(std::vector<std::pair<std::string, Var>>& out) const {
    for (std::size_t l = 0; l < convs_.size(); ++l) {
        out.emplace_back("conv" + std::to_string(l) + ".w", convs_[l].w);
        out.emplace_back("conv" + std::to_string(l) + ".b", convs_[l].b);
    }
    for (std::size_t l = 0; l < norms_.size(); ++l) {
        out.emplace_back("norm" + std::to_string(l) + ".gamma", norms_[l].gamma);
        out.emplace_back("norm" + std::to_string(l) + ".beta", norms_[l].beta);
    }
    out.emplace_back("proj.w", proj_.w);
    out.emplace_back("proj.b", proj_.b);
}

ServiceModel::ServiceModel(const ServiceModelSpec& spec, std::uint64_t seed) : spec_(spec) {
    AVIH_CHECK(spec.base_channels % spec.groups == 0 || spec.groups <= spec.base_channels,
               "ServiceModelSpec: groups must divide the channel counts");
    Rng rng(seed);
    const int c = spec.base_channels;
    stem_ = nn::Conv2d(3, c, 3, 1, 1, rng);
    stem_norm_ = nn::GroupNorm(c, spec.groups);
    const int widths[3] = {2 * c, 4 * c, 4 * c};
    int in_c = c;
    for (int s = 0; s < 3; ++s) {
        Stage st;
        st.down = nn::Conv2d(in_c, widths[s], 3, 2, 1, rng);
        st.down_norm = nn::GroupNorm(widths[s], spec_.groups);
        st.r1 = nn::Conv2d(widths[s], widths[s], 3, 1, 1, rng);
        st.n1 = nn::GroupNorm(widths[s], spec_.groups);
        st.r2 = nn::Conv2d(widths[s], widths[s], 3, 1, 1, rng);
        st.n2 = nn::GroupNorm(widths[s], spec_.groups);
        stages_.push_back(std::move(st));
        in_c = widths[s];
    }
    fc_ = nn::Linear(in_c, spec.embedding_dim, rng);
}

Var ServiceModel::run_stage(const Stage& s, const Var& x) const {
    Var d = relu(s.down_norm(s.down(x)));
    Var r = s.n2(s.r2(relu(s.n1(s.r1(d)))));
    return relu(add(d, r));
}

Var ServiceModel::embed(const Var& images) const {
    AVIH_CHECK(images->value.rank() == 4 && images->value.dim(1) == 3,
               "ServiceModel: input must be B x 3 x H x W");
    Var s = relu(stem_norm_(stem_(images)));
    for (const auto& st : stages_) s = run_stage(st, s);
    Var pooled = global_avg_pool(s);
    return l2_normalize_rows(fc_(pooled), 1e-12);
}

std::vector<Var> ServiceModel::features(const Var& images) const {
    Var s = relu(stem_norm_(stem_(images)));
    std::vector<Var> maps;
    for (const auto& st : stages_) {
        s = run_stage(st, s);
        maps.push_back(s);
    }
    return maps;
}

void ServiceModel::named_params(std::vector<std::pair<std::string, Var>>& out) const {
    out.emplace_back("stem.w", stem_.w);
    out.emplace_back("stem.b", stem_.b);
    out.emplace_back("stem_norm.gamma", stem_norm_.gamma);
    out.emplace_back("stem_norm.beta", stem_norm_.beta);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const std::string p = "stage" + std::to_string(i);
        const Stage& st = stages_[i];
        out.emplace_back(p + ".down.w", st.down.w);
        out.emplace_back(p + ".down.b", st.down.b);
        out.emplace_back(p + ".down_norm.gamma", st.down_norm.gamma);
        out.emplace_back(p + ".down_norm.beta", st.down_norm.beta);
        out.emplace_back(p + ".r1.w", st.r1.w);
        out.emplace_back(p + ".r1.b", st.r1.b);
        out.emplace_back(p + ".n1.gamma", st.n1.gamma);
        out.emplace_back(p + ".n1.beta", st.n1.beta);
        out.emplace_back(p + ".r2.w", st.r2.w);
        out.emplace_back(p + ".r2.b", st.r2.b);
        out.emplace_back(p + ".n2.gamma", st.n2.gamma);
        out.emplace_back(p + ".n2.beta", st.n2.beta);
    }
    out.emplace_back("fc.w", fc_.w);
    out.emplace_back("fc.b", fc_.b);
}

Tensor ServiceModel::embed_values(const Tensor& images) const {
    Var out = embed(constant(images));
    return out->value;
}

std::unique_ptr<UNet> make_unet(const UNetSpec& spec, std::uint64_t seed) {
    return std::make_unique<UNet>(spec, seed);
}

std::unique_ptr<PatchDiscriminator> make_patch_discriminator(const PatchDiscriminatorSpec& spec,
                                                             std::uint64_t seed) {
    return std::make_unique<PatchDiscriminator>(spec, seed);
}

namespace {

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

double rank1_accuracy(const ServiceModel& model, const Tensor& gallery,
                      const std::vector<int>& gallery_labels, const Tensor& queries,
                      const std::vector<int>& query_labels) {
    Tensor ge = model.embed_values(gallery);
    Tensor qe = model.embed_values(queries);
    const std::int64_t d = ge.dim(1);
    std::int64_t hits = 0;
    for (std::int64_t q = 0; q < qe.dim(0); ++q) {
        double best = -2.0;
        std::int64_t best_g = 0;
        for (std::int64_t g = 0; g < ge.dim(0); ++g) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < d; ++j) dot += qe[q * d + j] * ge[g * d + j];
            if (dot > best) {
                best = dot;
                best_g = g;
            }
        }
        if (gallery_labels[static_cast<std::size_t>(best_g)] ==
            query_labels[static_cast<std::size_t>(q)])
            ++hits;
    }
    return qe.dim(0) > 0 ? static_cast<double>(hits) / static_cast<double>(qe.dim(0)) : 0.0;
}

ServiceTrainSummary train_service_model(ServiceModel& model, const LabeledImageSet& data,
                                        const ServiceTrainOptions& options) {
    AVIH_CHECK(data.identities >= 2, "train_service_model: need at least 2 identities");
    const std::int64_t n = data.images.dim(0);
    AVIH_CHECK(n >= 2 * data.identities, "train_service_model: need >= 2 images per identity");

    // Per-identity holdout split for the rank-1 convergence gate.
    std::vector<std::int64_t> train_idx, hold_idx;
    {
        std::vector<int> held_count(static_cast<std::size_t>(data.identities), 0);
        for (std::int64_t i = 0; i < n; ++i) {
            int id = data.labels[static_cast<std::size_t>(i)];
            if (held_count[static_cast<std::size_t>(id)] < options.holdout_per_identity) {
                hold_idx.push_back(i);
                ++held_count[static_cast<std::size_t>(id)];
            } else {
                train_idx.push_back(i);
            }
        }
    }
    auto labels_of = [&data](const std::vector<std::int64_t>& idx) {
        std::vector<int> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(data.labels[static_cast<std::size_t>(i)]);
        return out;
    };
    Tensor train_images = gather_rows(data.images, train_idx);
    Tensor hold_images = gather_rows(data.images, hold_idx);
    std::vector<int> train_labels = labels_of(train_idx);
    std::vector<int> hold_labels = labels_of(hold_idx);

    // Cosine classifier head with additive margin on the target class.
    Rng rng(options.seed);
    Var class_w = leaf(nn::uniform_init({data.identities, model.embedding_dim()},
                                        model.embedding_dim(), rng));
    Var zero_bias = constant(Tensor({data.identities}));

    std::vector<Var> params = model.params();
    params.push_back(class_w);
    nn::Adam opt(params, options.lr);

    ServiceTrainSummary summary;
    std::vector<std::int64_t> order(train_idx.size());
    std::iota(order.begin(), order.end(), 0);
    const std::int64_t m = static_cast<std::int64_t>(order.size());

    for (int epoch = 0; epoch < options.max_epochs; ++epoch) {
        // Fisher-Yates with the run rng; deterministic given the seed.
        for (std::int64_t i = m - 1; i > 0; --i) {
            std::int64_t j = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
            std::swap(order[i], order[j]);
        }
        for (std::int64_t start = 0; start < m; start += options.batch_size) {
            const std::int64_t stop = std::min<std::int64_t>(m, start + options.batch_size);
            std::vector<std::int64_t> batch(order.begin() + start, order.begin() + stop);
            Tensor images = gather_rows(train_images, batch);
            std::vector<int> labels;
            labels.reserve(batch.size());
            for (auto i : batch) labels.push_back(train_labels[static_cast<std::size_t>(i)]);

            Var emb = model.embed(constant(images));
            Var wn = l2_normalize_rows(class_w, 1e-12);
            Var cosines = linear(emb, wn, zero_bias);
            Tensor margin_mask({stop - start, data.identities});
            for (std::int64_t i = 0; i < stop - start; ++i)
                margin_mask[i * data.identities + labels[static_cast<std::size_t>(i)]] =
                    options.margin;
            Var logits = scale(sub(cosines, constant(std::move(margin_mask))), options.logit_scale);
            Var loss = cross_entropy(logits, labels);

            opt.zero_grad();
            backward(loss);
            opt.step();
        }
        summary.epochs_run = epoch + 1;
        summary.holdout_rank1 =
            rank1_accuracy(model, train_images, train_labels, hold_images, hold_labels);
        if (summary.holdout_rank1 >= options.target_rank1) {
            summary.converged = true;
            break;
        }
    }
    return summary;
}

}  // namespace avih::models
