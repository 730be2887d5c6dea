#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "avih/models.hpp"

namespace avih::metrics {

// Per-image metrics over order-aligned B x 3 x H x W batches in [0,1].
std::vector<double> mse(const Tensor& a, const Tensor& b);
// 10*log10(1/mse) in dB; mse below 1e-10 is reported as the 100 dB cap.
std::vector<double> psnr(const Tensor& a, const Tensor& b);
// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// computed per channel over the valid region and averaged.
std::vector<double> ssim(const Tensor& a, const Tensor& b);
// Sum over feature layers of the mean squared channel-normalized feature
// difference; a locally trained stand-in for learned perceptual distances.
std::vector<double> perceptual_distance(const Tensor& a, const Tensor& b,
                                        const models::FeatureModel& feature_model);

// Threshold = smallest impostor score v with fraction(impostor >= v) <= far
// (one ulp above the maximum when none qualifies); returns
// fraction(genuine >= threshold).
double tpr_at_far(const std::vector<double>& genuine, const std::vector<double>& impostor,
                  double far);

struct CmcResult {
    double rank1 = 0.0;
    double rank5 = 0.0;
    double map = 0.0;
    int excluded_queries = 0;  // queries with no same-id gallery entry
};
// Cosine-ranked CMC and mean average precision. Ties break on gallery index.
CmcResult cmc_and_map(const Tensor& query_embeddings, const Tensor& gallery_embeddings,
                      const std::vector<int>& query_ids, const std::vector<int>& gallery_ids);

struct VerificationProtocol {
    std::vector<std::pair<int, int>> genuine_pairs;   // (probe index, reference index)
    std::vector<std::pair<int, int>> impostor_pairs;
    double far_target = 0.01;

    void validate() const;
    // Same-identity vs cross-identity pairs (i != j) from a label list.
    static VerificationProtocol from_labels(const std::vector<int>& labels, double far_target);
};

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;
};
Aggregate aggregate(const std::vector<double>& values);

struct MetricsReport {
    std::vector<double> per_image_mse, per_image_psnr, per_image_ssim, per_image_perceptual;
    Aggregate mse, psnr, ssim, perceptual;
    double tpr = 0.0;
    double far_target = 0.01;
    CmcResult cmc;
    std::string protocol;  // human-readable protocol descriptor
    nlohmann::json provenance;

    nlohmann::json to_json() const;
    std::string to_csv() const;  // long format: image,metric,value
};

// Fills every metric between order-aligned originals and reconstructions.
// The verification scores are cosine similarities between embeddings of the
// reconstructed probe and the original reference under fs_eval.
MetricsReport evaluate_reconstruction(const Tensor& original, const Tensor& reconstructed,
                                      const models::ServiceModel& fs_eval,
                                      const std::vector<int>& labels,
                                      const VerificationProtocol& protocol,
                                      nlohmann::json provenance = {});

}  // namespace avih::metrics
