#pragma once

#include <torch/torch.h>

#include <vector>

#include "dpig/core.hpp"
#include "dpig/data_io.hpp"
#include "dpig/stage1.hpp"
#include "dpig/util.hpp"

namespace dpig {

// Structural similarity of two [3,H,W] images in [-1,1]: 7x7 Gaussian window
// (sigma 1.5), K1=0.01, K2=0.03, dynamic range 2, averaged over channels.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

// ssim of the mask-multiplied images ([H,W] binary mask, broadcast)
double mask_ssim(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask);

// Frechet distance between Gaussian fits of two [N,K] embedding sets:
// |mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Ca Cb)^{1/2}). Needs N >= K+1 per set.
double embedding_frechet(const torch::Tensor& a, const torch::Tensor& b);

struct RetrievalResult {
  double rank1 = 0;
  double mean_ap = 0;
  std::vector<double> per_query_ap;
};

// Euclidean retrieval on unit-norm features; AP is precision-at-hit averaged
// over a query's gallery matches, distance ties break by gallery index.
RetrievalResult reid_evaluate(const torch::Tensor& query_features,
                              const std::vector<int>& query_labels,
                              const torch::Tensor& gallery_features,
                              const std::vector<int>& gallery_labels);

struct DisentanglementReport {
  double fg_inside = 0, fg_outside = 0, fg_ratio = 1;  // want inside >> outside
  double bg_inside = 0, bg_outside = 0, bg_ratio = 1;  // want outside >> inside
  int probes = 0;
};

// Swaps one factor's embedding against other probe images and measures where
// pixels change, relative to each probe's ground-truth foreground mask.
// fg_ratio = mean inside-change / mean outside-change of the FG swap;
// bg_ratio is the reverse for the BG swap. No change at all gives ratio 1.
DisentanglementReport disentanglement_score(Stage1Model& model, const TrainingSet& probes,
                                            int n_probes, Rng& rng);

}  // namespace dpig
