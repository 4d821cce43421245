#include "dpig/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

#include "dpig/image_io.hpp"
#include "dpig/pose_geometry.hpp"
#include "dpig/util.hpp"

namespace dpig {

const char* to_string(SourceMode mode) {
  switch (mode) {
    case SourceMode::Sampled: return "sampled";
    case SourceMode::Conditioned: return "conditioned";
    case SourceMode::Fixed: return "fixed";
  }
  return "?";
}

namespace {

std::string tensor_hash(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  return hex64(fnv1a64(c.data_ptr<float>(), c.numel() * sizeof(float)));
}

torch::Tensor draw_noise(torch::Generator& gen, int dim) {
  return torch::randn({dim}, gen, torch::TensorOptions().dtype(torch::kFloat32));
}

}  // namespace

EncodedFactors encode_factors(Stage1Model& stage1, const torch::Tensor& image,
                              const PoseAnnotation& pose) {
  const auto& cfg = stage1.config();
  check_image(image, cfg);
  validate_pose(pose);
  torch::NoGradGuard ng;
  auto fmap = stage1.stem_features(image);
  auto mask = make_pose_mask(pose, cfg.image_h, cfg.image_w, scaled_mask_radius(cfg));
  auto rois = compute_body_rois(pose, cfg.image_h, cfg.image_w, cfg.roi_margin);
  auto fg = stage1.fg_encode(fmap, mask, rois);
  auto bg = stage1.bg_encode(fmap, inverse_mask(mask));
  return {std::move(fg), std::move(bg)};
}

torch::Tensor compose(Stage1Model& stage1, const FactorEmbedding& fg,
                      const FactorEmbedding& bg, const PoseAnnotation& pose) {
  const auto& cfg = stage1.config();
  if (fg.kind != FactorKind::FG || bg.kind != FactorKind::BG)
    throw std::invalid_argument("compose expects an FG and a BG embedding");
  check_embedding(fg, cfg);
  check_embedding(bg, cfg);
  validate_pose(pose);
  auto app = tile_appearance(fg, bg, cfg.image_h, cfg.image_w);
  auto heat = render_heatmaps(pose, cfg.image_h, cfg.image_w, scaled_sigma(cfg));
  return stage1.decode_image(app, heat);
}

GenerationResult generate(Stage1Model& stage1, Stage2Model* stage2,
                          const GenerationSources& sources,
                          const std::optional<ConditioningInput>& cond,
                          torch::Generator& gen) {
  const auto& cfg = stage1.config();
  bool needs_cond = sources.fg.mode == SourceMode::Conditioned ||
                    sources.bg.mode == SourceMode::Conditioned ||
                    sources.pose.mode == SourceMode::Conditioned;
  if (needs_cond && !cond)
    throw std::invalid_argument("a conditioning image is required for CONDITIONED factors");

  auto require_stage2 = [&](FactorKind kind) -> Stage2Model& {
    if (!stage2)
      throw std::runtime_error(std::string("missing stage-II model for SAMPLED ") +
                               to_string(kind) + " factor");
    if (!stage2->is_trained(kind))
      throw std::runtime_error(std::string("stage-II checkpoint has no trained mapper for "
                                           "SAMPLED ") +
                               to_string(kind) + " factor");
    return *stage2;
  };

  torch::NoGradGuard ng;
  std::optional<EncodedFactors> encoded;
  auto ensure_encoded = [&]() -> EncodedFactors& {
    if (!encoded) encoded = encode_factors(stage1, cond->image, cond->pose);
    return *encoded;
  };

  GenerationResult out;

  // z draws happen in fixed fg, bg, pose order so seeds reproduce exactly
  FactorEmbedding fg_emb, bg_emb;
  switch (sources.fg.mode) {
    case SourceMode::Sampled: {
      auto z = draw_noise(gen, cfg.fg_dim);
      fg_emb = require_stage2(FactorKind::FG).map_noise(z, FactorKind::FG);
      out.fg.z = z;
      break;
    }
    case SourceMode::Conditioned:
      fg_emb = ensure_encoded().fg;
      break;
    case SourceMode::Fixed:
      if (!sources.fg.fixed || sources.fg.fixed->kind != FactorKind::FG)
        throw std::invalid_argument("FIXED fg source needs an FG embedding");
      fg_emb = *sources.fg.fixed;
      break;
  }
  switch (sources.bg.mode) {
    case SourceMode::Sampled: {
      auto z = draw_noise(gen, cfg.bg_dim);
      bg_emb = require_stage2(FactorKind::BG).map_noise(z, FactorKind::BG);
      out.bg.z = z;
      break;
    }
    case SourceMode::Conditioned:
      bg_emb = ensure_encoded().bg;
      break;
    case SourceMode::Fixed:
      if (!sources.bg.fixed || sources.bg.fixed->kind != FactorKind::BG)
        throw std::invalid_argument("FIXED bg source needs a BG embedding");
      bg_emb = *sources.bg.fixed;
      break;
  }

  PoseAnnotation pose_ann;
  switch (sources.pose.mode) {
    case SourceMode::Sampled: {
      auto z = draw_noise(gen, cfg.pose_dim);
      auto e = require_stage2(FactorKind::POSE).map_noise(z, FactorKind::POSE);
      pose_ann = vector_to_pose(stage1.pose_decode(e));
      out.pose.z = z;
      break;
    }
    case SourceMode::Conditioned:
      pose_ann = cond->pose;
      break;
    case SourceMode::Fixed:
      if (sources.pose.fixed_pose) {
        pose_ann = *sources.pose.fixed_pose;
      } else if (sources.pose.fixed && sources.pose.fixed->kind == FactorKind::POSE) {
        pose_ann = vector_to_pose(stage1.pose_decode(*sources.pose.fixed));
      } else {
        throw std::invalid_argument("FIXED pose source needs a pose or a POSE embedding");
      }
      break;
  }

  out.image = compose(stage1, fg_emb, bg_emb, pose_ann);
  out.fg.mode = to_string(sources.fg.mode);
  out.fg.embedding = fg_emb.values;
  out.fg.embedding_hash = tensor_hash(fg_emb.values);
  out.bg.mode = to_string(sources.bg.mode);
  out.bg.embedding = bg_emb.values;
  out.bg.embedding_hash = tensor_hash(bg_emb.values);
  out.pose.mode = to_string(sources.pose.mode);
  out.pose.embedding = pose_vector_to_tensor(pose_to_vector(pose_ann));
  out.pose.embedding_hash = tensor_hash(out.pose.embedding);
  return out;
}

std::vector<GenerationResult> interpolate_between(
    Stage1Model& stage1, Stage2Model& stage2, FactorKind kind, const torch::Tensor& z1,
    const torch::Tensor& z2, int steps, const GenerationSources& base,
    const std::optional<ConditioningInput>& cond, torch::Generator& gen) {
  const auto& cfg = stage1.config();
  if (steps < 2) throw std::invalid_argument("interpolation needs at least 2 steps");
  int dim = embedding_dim(kind, cfg);
  if (z1.dim() != 1 || z1.size(0) != dim || z2.dim() != 1 || z2.size(0) != dim)
    throw std::invalid_argument("interpolation endpoints must be length-" +
                                std::to_string(dim) + " noise vectors");

  // resolve the held factors once; the walked factor is overridden per frame
  GenerationSources frame_sources = base;
  auto hold = [&](FactorSource& src, FactorKind k) {
    if (static_cast<int>(k) == static_cast<int>(kind)) return;
    if (src.mode != SourceMode::Sampled) return;
    auto z = draw_noise(gen, embedding_dim(k, cfg));
    src = FactorSource::fixed_embedding(stage2.map_noise(z, k));
  };
  hold(frame_sources.fg, FactorKind::FG);
  hold(frame_sources.bg, FactorKind::BG);
  hold(frame_sources.pose, FactorKind::POSE);

  std::vector<GenerationResult> frames;
  frames.reserve(steps);
  auto z1f = z1.to(torch::kFloat32);
  auto z2f = z2.to(torch::kFloat32);
  // a walk between equal endpoints must freeze every frame, which float
  // roundoff in the blend below would not guarantee
  const bool still = torch::equal(z1f, z2f);
  for (int s = 0; s < steps; ++s) {
    float t = static_cast<float>(s) / static_cast<float>(steps - 1);
    // endpoints reuse z1/z2 verbatim so the first and last frames match direct
    // generation bit for bit; the symmetric blend keeps the midpoint exact too
    auto zt = (s == 0 || still) ? z1f
              : s == steps - 1  ? z2f
                                : z1f * (1.f - t) + z2f * t;
    GenerationSources src = frame_sources;
    FactorEmbedding e = stage2.map_noise(zt, kind);
    if (kind == FactorKind::POSE)
      src.pose = FactorSource::fixed_embedding(e);
    else if (kind == FactorKind::FG)
      src.fg = FactorSource::fixed_embedding(e);
    else
      src.bg = FactorSource::fixed_embedding(e);
    auto result = generate(stage1, &stage2, src, cond, gen);
    auto& slot = kind == FactorKind::FG ? result.fg
                 : kind == FactorKind::BG ? result.bg
                                          : result.pose;
    slot.mode = "interpolated";
    slot.z = zt;
    frames.push_back(std::move(result));
  }
  return frames;
}

std::vector<GenerationResult> interpolate_gaussian(
    Stage1Model& stage1, Stage2Model& stage2, FactorKind kind, int steps,
    const GenerationSources& base, const std::optional<ConditioningInput>& cond,
    torch::Generator& gen) {
  int dim = embedding_dim(kind, stage1.config());
  auto z1 = draw_noise(gen, dim);
  auto z2 = draw_noise(gen, dim);
  return interpolate_between(stage1, stage2, kind, z1, z2, steps, base, cond, gen);
}

InversionResult invert_embedding(Stage2Model& stage2, const FactorEmbedding& target,
                                 const InvertOptions& opts) {
  const auto& cfg = stage2.config();
  check_embedding(target, cfg);
  if (opts.steps < 0) throw std::invalid_argument("inversion steps must be non-negative");
  if (!(opts.lr > 0)) throw std::invalid_argument("inversion lr must be positive");
  if (opts.mu < 0) throw std::invalid_argument("inversion mu must be non-negative");

  int dim = embedding_dim(target.kind, cfg);
  auto tgt = target.values.detach().to(torch::kFloat32);
  double tgt_norm = std::max(tgt.norm().item<double>(), 1e-12);

  auto z = torch::zeros({dim}, torch::requires_grad());
  torch::optim::Adam opt({z}, torch::optim::AdamOptions(opts.lr));

  auto residual_of = [&](const torch::Tensor& mapped) {
    return (mapped - tgt).norm().item<double>() / tgt_norm;
  };

  InversionResult res;
  for (int s = 0; s < opts.steps; ++s) {
    auto mapped = stage2.map_forward(z.unsqueeze(0), target.kind).squeeze(0);
    auto loss = (mapped - tgt).pow(2).sum() + opts.mu * z.pow(2).sum();
    opt.zero_grad();
    loss.backward();
    opt.step();
    {
      torch::NoGradGuard ng;
      res.residual_log.push_back(
          residual_of(stage2.map_forward(z.unsqueeze(0), target.kind).squeeze(0)));
    }
  }
  {
    torch::NoGradGuard ng;
    res.residual = residual_of(stage2.map_forward(z.unsqueeze(0), target.kind).squeeze(0));
  }
  res.z = z.detach();
  return res;
}

InverseInterpolation inverse_interpolate(Stage1Model& stage1, Stage2Model& stage2,
                                         FactorKind kind, const ConditioningInput& a,
                                         const ConditioningInput& b, int steps,
                                         const InvertOptions& opts) {
  auto factor_of = [&](const ConditioningInput& c) -> FactorEmbedding {
    if (kind == FactorKind::POSE)
      return stage1.pose_encode(pose_to_vector(c.pose));
    auto enc = encode_factors(stage1, c.image, c.pose);
    return kind == FactorKind::FG ? enc.fg : enc.bg;
  };

  InverseInterpolation out;
  out.from = invert_embedding(stage2, factor_of(a), opts);
  out.to = invert_embedding(stage2, factor_of(b), opts);

  GenerationSources base;
  base.fg = FactorSource::conditioned();
  base.bg = FactorSource::conditioned();
  base.pose = FactorSource::conditioned();
  auto gen = at::detail::createCPUGenerator(0);
  out.frames = interpolate_between(stage1, stage2, kind, out.from.z, out.to.z, steps, base,
                                   ConditioningInput{a.image, a.pose}, gen);
  return out;
}

torch::Tensor extract_reid_feature(Stage1Model& stage1, const torch::Tensor& image,
                                   const PoseAnnotation& pose) {
  auto enc = encode_factors(stage1, image, pose);
  auto v = enc.fg.values;
  double n = v.norm().item<double>();
  if (!(n > 0)) throw std::runtime_error("fg embedding has zero norm, no re-id feature");
  return v / n;
}

torch::Tensor extract_reid_features(Stage1Model& stage1, const TrainingSet& data) {
  auto features = extract_embeddings(stage1, data, FactorKind::FG);
  auto norms = features.pow(2).sum(1, true).sqrt();
  if (!(norms.min().item<double>() > 0))
    throw std::runtime_error("fg embedding has zero norm, no re-id feature");
  return features / norms;
}

void generate_virtual_dataset(Stage1Model& stage1, Stage2Model& stage2,
                              const VirtualDatasetSpec& spec,
                              const std::filesystem::path& out_root) {
  const auto& cfg = stage1.config();
  if (spec.n_identities < 1 || spec.images_per_identity < 1)
    throw std::invalid_argument("virtual dataset needs at least one identity and image");
  if (spec.n_identities > 10000 || spec.images_per_identity > 100)
    throw std::invalid_argument("virtual dataset naming supports up to 10000 identities "
                                "and 100 images each");
  if (spec.pose_pool.empty())
    throw std::invalid_argument("virtual dataset needs a non-empty pose pool");
  for (auto kind : {FactorKind::FG, FactorKind::BG})
    if (!stage2.is_trained(kind))
      throw std::runtime_error(std::string("stage-II checkpoint has no trained mapper for ") +
                               to_string(kind));

  std::filesystem::create_directories(out_root);
  std::ofstream vm(out_root / "virtual_manifest.tsv", std::ios::trunc);
  if (!vm) throw std::runtime_error("cannot write virtual manifest under " + out_root.string());
  vm << "# identity\tfile\tfg_hash\tpose_index\tbg_seed\n";

  torch::NoGradGuard ng;
  std::vector<DatasetRecord> records;
  records.reserve(static_cast<size_t>(spec.n_identities) * spec.images_per_identity);
  Rng base(spec.seed);

  for (int i = 0; i < spec.n_identities; ++i) {
    uint64_t fg_seed = base.fork(0x100000ull + i).seed();
    auto fg_gen = at::detail::createCPUGenerator(fg_seed);
    auto z_fg = draw_noise(fg_gen, cfg.fg_dim);
    auto fg_emb = stage2.map_noise(z_fg, FactorKind::FG);
    std::string fg_hash = tensor_hash(fg_emb.values);
    Rng pose_rng = base.fork(0x200000ull + i);

    for (int j = 0; j < spec.images_per_identity; ++j) {
      uint64_t bg_seed =
          base.fork(0x300000ull + static_cast<uint64_t>(i) * 128 + j).seed();
      auto bg_gen = at::detail::createCPUGenerator(bg_seed);
      auto z_bg = draw_noise(bg_gen, cfg.bg_dim);
      auto bg_emb = stage2.map_noise(z_bg, FactorKind::BG);
      int pose_idx = static_cast<int>(pose_rng.uniform_int(
          static_cast<int64_t>(spec.pose_pool.size())));
      const auto& pose = spec.pose_pool[static_cast<size_t>(pose_idx)];

      auto image = compose(stage1, fg_emb, bg_emb, pose);
      char stem[32];
      std::snprintf(stem, sizeof(stem), "%04d_%02d", i, j);
      DatasetRecord rec;
      rec.image_path = std::string(stem) + ".png";
      rec.pose_path = std::string(stem) + ".pose.txt";
      rec.identity = i;
      rec.pose = pose;
      write_image_png(out_root / rec.image_path, image);
      write_pose_file(out_root / rec.pose_path, pose);
      vm << i << '\t' << rec.image_path << '\t' << fg_hash << '\t' << pose_idx << '\t'
         << bg_seed << '\n';
      records.push_back(std::move(rec));
    }
  }
  if (!vm) throw std::runtime_error("write failed for virtual manifest");
  vm.close();
  write_manifest(out_root, records);
}

}  // namespace dpig
