#include "dpig/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dpig/pipeline.hpp"

namespace dpig {

namespace {

namespace F = torch::nn::functional;

constexpr int kWindow = 7;
constexpr double kWindowSigma = 1.5;
constexpr double kDynamicRange = 2.0;  // images live in [-1,1]

torch::Tensor ssim_window() {
  auto coords = torch::arange(kWindow, torch::kFloat64) - (kWindow - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * kWindowSigma * kWindowSigma));
  g = g / g.sum();
  auto win = torch::outer(g, g);
  return win.view({1, 1, kWindow, kWindow});
}

void check_ssim_input(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 3 || t.size(0) != 3)
    throw std::invalid_argument(std::string(what) + " must have shape [3,H,W]");
  if (t.size(1) < kWindow || t.size(2) < kWindow)
    throw std::invalid_argument("images are smaller than the 7x7 ssim window");
  if (!torch::isfinite(t).all().item<bool>())
    throw std::invalid_argument(std::string(what) + " has non-finite entries");
}

}  // namespace

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  check_ssim_input(a, "first image");
  check_ssim_input(b, "second image");
  if (!a.sizes().equals(b.sizes()))
    throw std::invalid_argument("ssim inputs must share their shape");

  const double c1 = std::pow(0.01 * kDynamicRange, 2);
  const double c2 = std::pow(0.03 * kDynamicRange, 2);

  auto x = a.to(torch::kFloat64).unsqueeze(1);  // [3,1,H,W]
  auto y = b.to(torch::kFloat64).unsqueeze(1);
  auto win = ssim_window();
  auto blur = [&](const torch::Tensor& t) { return F::conv2d(t, win); };

  auto mu_x = blur(x);
  auto mu_y = blur(y);
  auto mu_xx = mu_x * mu_x;
  auto mu_yy = mu_y * mu_y;
  auto mu_xy = mu_x * mu_y;
  auto sigma_x = blur(x * x) - mu_xx;
  auto sigma_y = blur(y * y) - mu_yy;
  auto sigma_xy = blur(x * y) - mu_xy;

  auto map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) /
             ((mu_xx + mu_yy + c1) * (sigma_x + sigma_y + c2));
  return map.mean().item<double>();
}

double mask_ssim(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask) {
  if (!mask.defined() || mask.dim() != 2)
    throw std::invalid_argument("mask must have shape [H,W]");
  if (mask.size(0) != a.size(1) || mask.size(1) != a.size(2))
    throw std::invalid_argument("mask shape must match the images");
  auto ok = ((mask == 0) | (mask == 1)).all().item<bool>();
  if (!ok) throw std::invalid_argument("mask entries must be 0 or 1");
  auto m = mask.to(a.dtype()).unsqueeze(0);
  return ssim(a * m, b * m);
}

namespace {

// PSD matrix square root via symmetric eigendecomposition, negative
// eigenvalues (numerical noise) clamped to zero
torch::Tensor psd_sqrt(const torch::Tensor& m) {
  auto [vals, vecs] = torch::linalg_eigh(m);
  auto root = vals.clamp_min(0).sqrt();
  return vecs.matmul(torch::diag(root)).matmul(vecs.transpose(0, 1));
}

}  // namespace

double embedding_frechet(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.defined() || !b.defined() || a.dim() != 2 || b.dim() != 2)
    throw std::invalid_argument("embedding sets must be [N,K] tensors");
  if (a.size(1) != b.size(1))
    throw std::invalid_argument("embedding sets must share their dimension");
  int64_t k = a.size(1);
  if (a.size(0) < k + 1 || b.size(0) < k + 1)
    throw std::invalid_argument("too few samples: each set needs at least K+1 members");

  auto x = a.to(torch::kFloat64);
  auto y = b.to(torch::kFloat64);
  auto mu_x = x.mean(0);
  auto mu_y = y.mean(0);
  auto xc = x - mu_x;
  auto yc = y - mu_y;
  auto cov_x = xc.transpose(0, 1).matmul(xc) / static_cast<double>(x.size(0) - 1);
  auto cov_y = yc.transpose(0, 1).matmul(yc) / static_cast<double>(y.size(0) - 1);

  // tr((Cx Cy)^{1/2}) computed via the symmetric product Cx^{1/2} Cy Cx^{1/2}
  auto rx = psd_sqrt(cov_x);
  auto inner = rx.matmul(cov_y).matmul(rx);
  auto [vals, vecs] = torch::linalg_eigh(inner);
  double tr_sqrt = vals.clamp_min(0).sqrt().sum().item<double>();

  double mean_term = (mu_x - mu_y).pow(2).sum().item<double>();
  double trace_term = cov_x.diagonal().sum().item<double>() +
                      cov_y.diagonal().sum().item<double>() - 2.0 * tr_sqrt;
  return mean_term + trace_term;
}

RetrievalResult reid_evaluate(const torch::Tensor& query_features,
                              const std::vector<int>& query_labels,
                              const torch::Tensor& gallery_features,
                              const std::vector<int>& gallery_labels) {
  if (!query_features.defined() || query_features.dim() != 2 ||
      !gallery_features.defined() || gallery_features.dim() != 2)
    throw std::invalid_argument("features must be [N,D] tensors");
  if (query_features.size(1) != gallery_features.size(1))
    throw std::invalid_argument("query and gallery feature dims differ");
  int64_t q = query_features.size(0);
  int64_t g = gallery_features.size(0);
  if (q == 0 || g == 0) throw std::invalid_argument("query and gallery must be non-empty");
  if (static_cast<int64_t>(query_labels.size()) != q ||
      static_cast<int64_t>(gallery_labels.size()) != g)
    throw std::invalid_argument("label counts must match the feature rows");

  auto dist = torch::cdist(query_features.to(torch::kFloat64),
                           gallery_features.to(torch::kFloat64));
  auto acc = dist.accessor<double, 2>();

  RetrievalResult res;
  res.per_query_ap.reserve(static_cast<size_t>(q));
  int64_t rank1_hits = 0;
  for (int64_t i = 0; i < q; ++i) {
    int label = query_labels[static_cast<size_t>(i)];
    int64_t total_hits = 0;
    for (int64_t j = 0; j < g; ++j)
      if (gallery_labels[static_cast<size_t>(j)] == label) ++total_hits;
    if (total_hits == 0)
      throw std::invalid_argument("query " + std::to_string(i) +
                                  " has no matching gallery identity");

    std::vector<int64_t> order(static_cast<size_t>(g));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t x, int64_t y) { return acc[i][x] < acc[i][y]; });

    if (gallery_labels[static_cast<size_t>(order[0])] == label) ++rank1_hits;
    double ap = 0;
    int64_t hits = 0;
    for (int64_t pos = 0; pos < g && hits < total_hits; ++pos) {
      if (gallery_labels[static_cast<size_t>(order[static_cast<size_t>(pos)])] == label) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
      }
    }
    res.per_query_ap.push_back(ap / static_cast<double>(total_hits));
  }
  res.rank1 = static_cast<double>(rank1_hits) / static_cast<double>(q);
  res.mean_ap = std::accumulate(res.per_query_ap.begin(), res.per_query_ap.end(), 0.0) /
                static_cast<double>(q);
  return res;
}

DisentanglementReport disentanglement_score(Stage1Model& model, const TrainingSet& probes,
                                            int n_probes, Rng& rng) {
  if (probes.size() < 2)
    throw std::invalid_argument("disentanglement needs at least 2 probe images");
  if (n_probes < 1) throw std::invalid_argument("n_probes must be at least 1");
  n_probes = std::min<int64_t>(n_probes, probes.size());
  for (int64_t i = 0; i < n_probes; ++i)
    if (!probes.fg_masks[static_cast<size_t>(i)].defined())
      throw std::invalid_argument("probe " + std::to_string(i) +
                                  " has no ground-truth foreground mask");

  torch::NoGradGuard ng;
  const auto& cfg = model.config();

  // cache every probe's factor codes once
  std::vector<EncodedFactors> codes;
  codes.reserve(static_cast<size_t>(probes.size()));
  for (int64_t i = 0; i < probes.size(); ++i)
    codes.push_back(encode_factors(model, probes.images[i],
                                   probes.poses[static_cast<size_t>(i)]));

  double fg_in_sum = 0, fg_out_sum = 0, bg_in_sum = 0, bg_out_sum = 0;
  for (int64_t i = 0; i < n_probes; ++i) {
    const auto& pose = probes.poses[static_cast<size_t>(i)];
    const auto& own = codes[static_cast<size_t>(i)];
    auto base = compose(model, own.fg, own.bg, pose);

    auto gt = probes.fg_masks[static_cast<size_t>(i)];
    double inside_px = gt.sum().item<double>();
    double outside_px = static_cast<double>(cfg.image_h) * cfg.image_w - inside_px;
    if (inside_px < 1 || outside_px < 1)
      throw std::invalid_argument("probe " + std::to_string(i) +
                                  " mask has a degenerate inside/outside split");

    int64_t donor = rng.uniform_int(probes.size() - 1);
    if (donor >= i) ++donor;  // swap with a different probe
    const auto& other = codes[static_cast<size_t>(donor)];

    auto delta_of = [&](const torch::Tensor& swapped) {
      auto delta = (swapped - base).abs().mean(0);  // [H,W]
      double inside = (delta * gt).sum().item<double>() / inside_px;
      double outside = (delta * (1 - gt)).sum().item<double>() / outside_px;
      return std::pair<double, double>{inside, outside};
    };

    auto [fi, fo] = delta_of(compose(model, other.fg, own.bg, pose));
    auto [bi, bo] = delta_of(compose(model, own.fg, other.bg, pose));
    fg_in_sum += fi;
    fg_out_sum += fo;
    bg_in_sum += bi;
    bg_out_sum += bo;
  }

  DisentanglementReport rep;
  rep.probes = static_cast<int>(n_probes);
  rep.fg_inside = fg_in_sum / n_probes;
  rep.fg_outside = fg_out_sum / n_probes;
  rep.bg_inside = bg_in_sum / n_probes;
  rep.bg_outside = bg_out_sum / n_probes;
  const double eps = 1e-12;
  // identical swaps change nothing anywhere; call that ratio 1 (no selectivity)
  rep.fg_ratio = (rep.fg_inside < eps && rep.fg_outside < eps)
                     ? 1.0
                     : rep.fg_inside / std::max(rep.fg_outside, eps);
  rep.bg_ratio = (rep.bg_inside < eps && rep.bg_outside < eps)
                     ? 1.0
                     : rep.bg_outside / std::max(rep.bg_inside, eps);
  return rep;
}

}  // namespace dpig
