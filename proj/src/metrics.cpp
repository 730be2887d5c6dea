#include "avih/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace avih::metrics {

namespace {

void check_metric_pair(const Tensor& a, const Tensor& b, const char* op, bool check_range = true) {
    AVIH_CHECK(a.rank() == 4 && b.rank() == 4, std::string(op) + ": expected B x C x H x W");
    AVIH_CHECK(a.same_shape(b),
               std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    if (check_range) {
        const double lo = std::min(min_value(a), min_value(b));
        const double hi = std::max(max_value(a), max_value(b));
        AVIH_CHECK(lo >= -1e-9 && hi <= 1.0 + 1e-9,
                   std::string(op) + ": image values must lie in [0,1]");
    }
}

}  // namespace

std::vector<double> mse(const Tensor& a, const Tensor& b) {
    check_metric_pair(a, b, "mse");
    const std::int64_t n = a.dim(0), per = a.numel() / std::max<std::int64_t>(n, 1);
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* pa = a.data() + i * per;
        const double* pb = b.data() + i * per;
        double s = 0.0;
        for (std::int64_t j = 0; j < per; ++j) {
            double d = pa[j] - pb[j];
            s += d * d;
        }
        out[static_cast<std::size_t>(i)] = s / static_cast<double>(per);
    }
    return out;
}

std::vector<double> psnr(const Tensor& a, const Tensor& b) {
    auto errors = mse(a, b);
    std::vector<double> out(errors.size());
    for (std::size_t i = 0; i < errors.size(); ++i) {
        out[i] = errors[i] < 1e-10 ? 100.0 : 10.0 * std::log10(1.0 / errors[i]);
    }
    return out;
}

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size));
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        w[static_cast<std::size_t>(i)] = std::exp(-((i - c) * (i - c)) / (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Separable valid-region Gaussian filter of an H x W plane.
void gauss_valid(const double* img, std::int64_t h, std::int64_t w, const std::vector<double>& win,
                 std::vector<double>& tmp, std::vector<double>& out) {
    const std::int64_t k = static_cast<std::int64_t>(win.size());
    const std::int64_t vw = w - k + 1, vh = h - k + 1;
    tmp.assign(static_cast<std::size_t>(h * vw), 0.0);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < vw; ++x) {
            double s = 0.0;
            for (std::int64_t i = 0; i < k; ++i) s += win[static_cast<std::size_t>(i)] * img[y * w + x + i];
            tmp[static_cast<std::size_t>(y * vw + x)] = s;
        }
    }
    out.assign(static_cast<std::size_t>(vh * vw), 0.0);
    for (std::int64_t y = 0; y < vh; ++y) {
        for (std::int64_t x = 0; x < vw; ++x) {
            double s = 0.0;
            for (std::int64_t i = 0; i < k; ++i)
                s += win[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>((y + i) * vw + x)];
            out[static_cast<std::size_t>(y * vw + x)] = s;
        }
    }
}

}  // namespace

std::vector<double> ssim(const Tensor& a, const Tensor& b) {
    check_metric_pair(a, b, "ssim");
    constexpr int kWindow = 11;
    constexpr double kSigma = 1.5;
    constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
    const std::int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    AVIH_CHECK(h >= kWindow && w >= kWindow, "ssim: image smaller than the 11x11 window");
    static const std::vector<double> win = gaussian_window(kWindow, kSigma);

    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    std::vector<double> tmp, mu_a, mu_b, m_aa, m_bb, m_ab;
    std::vector<double> plane_sq_a, plane_sq_b, plane_ab;
    const std::int64_t hw = h * w;
    for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::int64_t cc = 0; cc < c; ++cc) {
            const double* pa = a.data() + (i * c + cc) * hw;
            const double* pb = b.data() + (i * c + cc) * hw;
            plane_sq_a.assign(static_cast<std::size_t>(hw), 0.0);
            plane_sq_b.assign(static_cast<std::size_t>(hw), 0.0);
            plane_ab.assign(static_cast<std::size_t>(hw), 0.0);
            for (std::int64_t j = 0; j < hw; ++j) {
                plane_sq_a[static_cast<std::size_t>(j)] = pa[j] * pa[j];
                plane_sq_b[static_cast<std::size_t>(j)] = pb[j] * pb[j];
                plane_ab[static_cast<std::size_t>(j)] = pa[j] * pb[j];
            }
            gauss_valid(pa, h, w, win, tmp, mu_a);
            gauss_valid(pb, h, w, win, tmp, mu_b);
            std::vector<double> s_aa, s_bb, s_ab;
            gauss_valid(plane_sq_a.data(), h, w, win, tmp, s_aa);
            gauss_valid(plane_sq_b.data(), h, w, win, tmp, s_bb);
            gauss_valid(plane_ab.data(), h, w, win, tmp, s_ab);
            double channel_sum = 0.0;
            for (std::size_t j = 0; j < mu_a.size(); ++j) {
                const double ma = mu_a[j], mb = mu_b[j];
                const double va = s_aa[j] - ma * ma;
                const double vb = s_bb[j] - mb * mb;
                const double cov = s_ab[j] - ma * mb;
                channel_sum += ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
                               ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
            }
            acc += channel_sum / static_cast<double>(mu_a.size());
        }
        out[static_cast<std::size_t>(i)] = acc / static_cast<double>(c);
    }
    return out;
}

std::vector<double> perceptual_distance(const Tensor& a, const Tensor& b,
                                        const models::FeatureModel& feature_model) {
    check_metric_pair(a, b, "perceptual_distance");
    auto fa = feature_model.features(constant(a));
    auto fb = feature_model.features(constant(b));
    AVIH_CHECK(fa.size() >= 2, "perceptual_distance: feature model must expose >= 2 layers");
    const std::int64_t n = a.dim(0);
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (std::size_t layer = 0; layer < fa.size(); ++layer) {
        const Tensor& ta = fa[layer]->value;
        const Tensor& tb = fb[layer]->value;
        const std::int64_t c = ta.dim(1), hw = ta.dim(2) * ta.dim(3);
        for (std::int64_t i = 0; i < n; ++i) {
            double layer_sum = 0.0;
            for (std::int64_t p = 0; p < hw; ++p) {
                // Unit-normalize the channel vector at each position, as
                // learned perceptual metrics do, then take squared distance.
                double na = 0.0, nb = 0.0;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double va = ta[(i * c + ch) * hw + p];
                    const double vb = tb[(i * c + ch) * hw + p];
                    na += va * va;
                    nb += vb * vb;
                }
                na = std::sqrt(na) + 1e-10;
                nb = std::sqrt(nb) + 1e-10;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double d = ta[(i * c + ch) * hw + p] / na - tb[(i * c + ch) * hw + p] / nb;
                    layer_sum += d * d;
                }
            }
            out[static_cast<std::size_t>(i)] += layer_sum / static_cast<double>(hw);
        }
    }
    return out;
}

double tpr_at_far(const std::vector<double>& genuine, const std::vector<double>& impostor,
                  double far) {
    AVIH_CHECK(!genuine.empty() && !impostor.empty(), "tpr_at_far: score lists must be nonempty");
    AVIH_CHECK(far > 0.0 && far < 1.0, "tpr_at_far: far must be in (0,1)");
    for (double v : genuine) AVIH_CHECK(std::isfinite(v), "tpr_at_far: non-finite genuine score");
    for (double v : impostor) AVIH_CHECK(std::isfinite(v), "tpr_at_far: non-finite impostor score");

    std::vector<double> sorted = impostor;
    std::sort(sorted.begin(), sorted.end());
    const std::int64_t m = static_cast<std::int64_t>(sorted.size());
    const std::int64_t allowed = static_cast<std::int64_t>(std::floor(far * static_cast<double>(m)));

    double threshold = std::nextafter(sorted.back(), std::numeric_limits<double>::infinity());
    for (std::int64_t i = 0; i < m; ++i) {
        if (i > 0 && sorted[static_cast<std::size_t>(i)] == sorted[static_cast<std::size_t>(i - 1)])
            continue;  // count >= v from the first occurrence of v
        if (m - i <= allowed) {
            threshold = sorted[static_cast<std::size_t>(i)];
            break;
        }
    }
    std::int64_t hits = 0;
    for (double v : genuine)
        if (v >= threshold) ++hits;
    return static_cast<double>(hits) / static_cast<double>(genuine.size());
}

CmcResult cmc_and_map(const Tensor& query_embeddings, const Tensor& gallery_embeddings,
                      const std::vector<int>& query_ids, const std::vector<int>& gallery_ids) {
    AVIH_CHECK(query_embeddings.rank() == 2 && gallery_embeddings.rank() == 2,
               "cmc_and_map: embeddings must be B x D");
    AVIH_CHECK(query_embeddings.dim(1) == gallery_embeddings.dim(1),
               "cmc_and_map: embedding dimension mismatch");
    const std::int64_t nq = query_embeddings.dim(0), ng = gallery_embeddings.dim(0);
    AVIH_CHECK(static_cast<std::int64_t>(query_ids.size()) == nq &&
                   static_cast<std::int64_t>(gallery_ids.size()) == ng,
               "cmc_and_map: id lists must align with embeddings");
    AVIH_CHECK(ng >= 1, "cmc_and_map: empty gallery");
    const std::int64_t d = query_embeddings.dim(1);

    std::vector<double> gallery_norm(static_cast<std::size_t>(ng));
    for (std::int64_t g = 0; g < ng; ++g) {
        double s = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            double v = gallery_embeddings[g * d + j];
            s += v * v;
        }
        gallery_norm[static_cast<std::size_t>(g)] = std::sqrt(s) + 1e-12;
    }

    CmcResult res;
    std::int64_t used = 0;
    double rank1 = 0.0, rank5 = 0.0, ap_sum = 0.0;
    std::vector<std::int64_t> order(static_cast<std::size_t>(ng));
    std::vector<double> scores(static_cast<std::size_t>(ng));
    for (std::int64_t q = 0; q < nq; ++q) {
        bool has_match = false;
        for (std::int64_t g = 0; g < ng; ++g) {
            if (gallery_ids[static_cast<std::size_t>(g)] == query_ids[static_cast<std::size_t>(q)]) {
                has_match = true;
                break;
            }
        }
        if (!has_match) {
            ++res.excluded_queries;
            continue;
        }
        ++used;
        double qn = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            double v = query_embeddings[q * d + j];
            qn += v * v;
        }
        qn = std::sqrt(qn) + 1e-12;
        for (std::int64_t g = 0; g < ng; ++g) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < d; ++j)
                dot += query_embeddings[q * d + j] * gallery_embeddings[g * d + j];
            scores[static_cast<std::size_t>(g)] = dot / (qn * gallery_norm[static_cast<std::size_t>(g)]);
        }
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&scores](std::int64_t x, std::int64_t y) {
            return scores[static_cast<std::size_t>(x)] > scores[static_cast<std::size_t>(y)];
        });
        std::int64_t matches_seen = 0;
        double ap = 0.0;
        for (std::int64_t r = 0; r < ng; ++r) {
            const bool match = gallery_ids[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] ==
                               query_ids[static_cast<std::size_t>(q)];
            if (match) {
                ++matches_seen;
                ap += static_cast<double>(matches_seen) / static_cast<double>(r + 1);
                if (r == 0) rank1 += 1.0;
                if (r < 5 && matches_seen == 1) rank5 += 1.0;
            }
        }
        ap_sum += ap / static_cast<double>(matches_seen);
    }
    AVIH_CHECK(used >= 1, "cmc_and_map: no query has a gallery match");
    res.rank1 = rank1 / static_cast<double>(used);
    res.rank5 = rank5 / static_cast<double>(used);
    res.map = ap_sum / static_cast<double>(used);
    return res;
}

void VerificationProtocol::validate() const {
    AVIH_CHECK(!genuine_pairs.empty() && !impostor_pairs.empty(),
               "VerificationProtocol: pair lists must be nonempty");
    AVIH_CHECK(far_target > 0.0 && far_target < 1.0,
               "VerificationProtocol: far_target must be in (0,1)");
    for (const auto& g : genuine_pairs) {
        for (const auto& i : impostor_pairs) {
            AVIH_CHECK(g != i, "VerificationProtocol: genuine and impostor pair lists overlap");
        }
    }
}

VerificationProtocol VerificationProtocol::from_labels(const std::vector<int>& labels,
                                                       double far_target) {
    VerificationProtocol p;
    p.far_target = far_target;
    const int n = static_cast<int>(labels.size());
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
                p.genuine_pairs.emplace_back(i, j);
            } else if (i < j) {
                p.impostor_pairs.emplace_back(i, j);
            }
        }
    }
    return p;
}

Aggregate aggregate(const std::vector<double>& values) {
    Aggregate a;
    if (values.empty()) return a;
    a.mean = std::accumulate(values.begin(), values.end(), 0.0) /
             static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(var / static_cast<double>(values.size()));
    return a;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["per_image"] = {{"mse", per_image_mse},
                      {"psnr", per_image_psnr},
                      {"ssim", per_image_ssim},
                      {"perceptual", per_image_perceptual}};
    j["aggregate"] = {{"mse", {{"mean", mse.mean}, {"std", mse.stddev}}},
                      {"psnr", {{"mean", psnr.mean}, {"std", psnr.stddev}}},
                      {"ssim", {{"mean", ssim.mean}, {"std", ssim.stddev}}},
                      {"perceptual", {{"mean", perceptual.mean}, {"std", perceptual.stddev}}}};
    j["accuracy"] = {{"tpr_at_far", tpr},
                     {"far_target", far_target},
                     {"rank1", cmc.rank1},
                     {"rank5", cmc.rank5},
                     {"map", cmc.map},
                     {"excluded_queries", cmc.excluded_queries}};
    j["protocol"] = protocol;
    j["provenance"] = provenance;
    return j;
}

std::string MetricsReport::to_csv() const {
    std::ostringstream out;
    out << "image,metric,value\n";
    auto emit = [&out](const char* name, const std::vector<double>& vals) {
        for (std::size_t i = 0; i < vals.size(); ++i)
            out << i << "," << name << "," << vals[i] << "\n";
    };
    emit("mse", per_image_mse);
    emit("psnr", per_image_psnr);
    emit("ssim", per_image_ssim);
    emit("perceptual", per_image_perceptual);
    return out.str();
}

MetricsReport evaluate_reconstruction(const Tensor& original, const Tensor& reconstructed,
                                      const models::ServiceModel& fs_eval,
                                      const std::vector<int>& labels,
                                      const VerificationProtocol& protocol,
                                      nlohmann::json provenance) {
    check_metric_pair(original, reconstructed, "evaluate_reconstruction");
    AVIH_CHECK(static_cast<std::int64_t>(labels.size()) == original.dim(0),
               "evaluate_reconstruction: label list must align with images");
    protocol.validate();

    MetricsReport report;
    report.per_image_mse = mse(original, reconstructed);
    report.per_image_psnr = psnr(original, reconstructed);
    report.per_image_ssim = ssim(original, reconstructed);
    report.per_image_perceptual = perceptual_distance(original, reconstructed, fs_eval);
    report.mse = aggregate(report.per_image_mse);
    report.psnr = aggregate(report.per_image_psnr);
    report.ssim = aggregate(report.per_image_ssim);
    report.perceptual = aggregate(report.per_image_perceptual);

    Tensor probe = fs_eval.embed_values(reconstructed);  // reconstructed side
    Tensor ref = fs_eval.embed_values(original);         // original side
    const std::int64_t d = probe.dim(1);
    auto cosine = [&probe, &ref, d](int i, int j) {
        double dot = 0.0;
        for (std::int64_t k = 0; k < d; ++k) dot += probe[i * d + k] * ref[j * d + k];
        return dot;  // embeddings are unit-norm
    };
    std::vector<double> genuine, impostor;
    genuine.reserve(protocol.genuine_pairs.size());
    impostor.reserve(protocol.impostor_pairs.size());
    for (const auto& [i, j] : protocol.genuine_pairs) genuine.push_back(cosine(i, j));
    for (const auto& [i, j] : protocol.impostor_pairs) impostor.push_back(cosine(i, j));
    report.tpr = tpr_at_far(genuine, impostor, protocol.far_target);
    report.far_target = protocol.far_target;
    report.cmc = cmc_and_map(probe, ref, labels, labels);

    std::ostringstream desc;
    desc << "verification: " << protocol.genuine_pairs.size() << " genuine / "
         << protocol.impostor_pairs.size() << " impostor pairs, cosine(recon probe, original "
         << "reference), TPR@FAR=" << protocol.far_target << "; cmc: recon queries vs original "
         << "gallery";
    report.protocol = desc.str();
    report.provenance = std::move(provenance);
    return report;
}

}  // namespace avih::metrics
