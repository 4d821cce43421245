#include "dpig/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dpig/checkpoint.hpp"
#include "dpig/core.hpp"
#include "dpig/data_io.hpp"
#include "dpig/evaluation.hpp"
#include "dpig/image_io.hpp"
#include "dpig/pipeline.hpp"
#include "dpig/stage1.hpp"
#include "dpig/stage2.hpp"
#include "dpig/util.hpp"

namespace dpig {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// bad flag combinations and values exit 1; anything thrown as std::exception
// during the actual work exits 2
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config_path;
  long seed = 0;
  std::string out;
};

// DPIG_OUT overrides --out so wrappers can redirect whole artifact trees
fs::path resolve_out(const CommonArgs& c) {
  const char* env = std::getenv("DPIG_OUT");
  std::string out = (env && *env) ? std::string(env) : c.out;
  if (out.empty()) throw UsageError("no output directory: pass --out or set DPIG_OUT");
  fs::path p(out);
  fs::create_directories(p);
  return p;
}

PipelineConfig load_cli_config(const CommonArgs& c) {
  if (!fs::exists(c.config_path))
    throw std::runtime_error("config file not found: " + c.config_path);
  auto cfg = load_config(c.config_path);
  cfg.rng_seed = c.seed;
  return validate_config(cfg);
}

fs::path need_file(const std::string& path, const char* what, const char* flag) {
  if (path.empty())
    throw std::runtime_error(std::string("missing ") + what + ": pass " + flag + " <file>");
  if (!fs::exists(path))
    throw std::runtime_error(std::string(what) + " not found: " + path);
  return fs::path(path);
}

fs::path need_dir(const std::string& path, const char* what, const char* flag) {
  if (path.empty())
    throw std::runtime_error(std::string("missing ") + what + ": pass " + flag + " <dir>");
  if (!fs::is_directory(path))
    throw std::runtime_error(std::string(what) + " not found: " + path);
  return fs::path(path);
}

struct Provenance {
  std::string command;
  std::vector<std::string> argv;
  std::vector<std::pair<std::string, std::string>> inputs;  // label -> hashed file
  std::string data_dir;
  std::vector<std::string> outputs;
};

void write_provenance(const fs::path& out_dir, const CommonArgs& c, const Provenance& p) {
  json j;
  j["command"] = p.command;
  j["argv"] = p.argv;
  j["seed"] = c.seed;
  j["config"] = {{"path", c.config_path},
                 {"fnv1a64", hex64(hash_file(c.config_path))}};
  json ckpts = json::object();
  for (const auto& [label, path] : p.inputs)
    ckpts[label] = {{"path", path}, {"fnv1a64", hex64(hash_file(path))}};
  j["checkpoints"] = ckpts;
  if (!p.data_dir.empty()) j["data"] = p.data_dir;
  j["outputs"] = p.outputs;
  std::ofstream f(out_dir / "provenance.json");
  if (!f) throw std::runtime_error("cannot write provenance.json");
  f << j.dump(2) << "\n";
}

json factor_json(const FactorProvenance& p) {
  return json{{"mode", p.mode}, {"hash", p.embedding_hash}};
}

json cell_json(const GenerationResult& r) {
  return json{{"fg", factor_json(r.fg)}, {"bg", factor_json(r.bg)},
              {"pose", factor_json(r.pose)}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

FactorKind parse_kind_flag(const std::string& s) {
  try {
    return factor_kind_from_string(trim(s));
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string(e.what()) + " (expected fg, bg or pose)");
  }
}

std::vector<FactorKind> parse_kind_list(const std::string& csv) {
  std::vector<FactorKind> kinds;
  if (trim(csv).empty()) return kinds;
  for (const auto& part : split(csv, ','))
    if (!trim(part).empty()) kinds.push_back(parse_kind_flag(part));
  return kinds;
}

torch::Generator make_generator(long seed) {
  return at::detail::createCPUGenerator(static_cast<uint64_t>(seed));
}

ConditioningInput load_conditioning(const fs::path& root, const DatasetRecord& rec) {
  return ConditioningInput{read_image_png(root / rec.image_path), rec.pose};
}

// ------------------------------------------------------------------ synth --

struct SynthArgs {
  int count = 200;
};

void cmd_synth(const CommonArgs& c, const SynthArgs& a, Provenance& prov) {
  if (a.count < 1) throw UsageError("--count must be at least 1");
  auto cfg = load_cli_config(c);
  auto out = resolve_out(c);
  SynthConfig sc;
  sc.n_images = a.count;
  sc.image_h = cfg.image_h;
  sc.image_w = cfg.image_w;
  sc.seed = static_cast<uint64_t>(c.seed);
  validate_synth_config(sc);
  synth_generate(sc, out);
  prov.outputs.push_back("manifest.tsv");
  std::printf("synth: wrote %d samples to %s\n", a.count, out.string().c_str());
}

// ----------------------------------------------------------- train-stage1 --

struct TrainStage1Args {
  std::string data;
  std::string resume;
  long iters = -1;
  bool verbose = false;
};

json history_json(const Stage1History& h) {
  return json{{"d_value", h.d_value}, {"g_adv", h.g_adv}, {"l1", h.l1},
              {"pose_loss", h.pose_loss}};
}

void cmd_train_stage1(const CommonArgs& c, const TrainStage1Args& a, Provenance& prov) {
  auto cfg = load_cli_config(c);
  auto out = resolve_out(c);
  auto data_dir = need_dir(a.data, "dataset directory", "--data");
  prov.data_dir = data_dir.string();

  std::optional<Checkpoint> resume_ckpt;
  std::optional<Stage1Model> model;
  if (!a.resume.empty()) {
    resume_ckpt = load_checkpoint(need_file(a.resume, "stage-I checkpoint", "--resume"),
                                  "DPIG1");
    // the snapshot config wins on resume; --config stays in provenance
    model.emplace(stage1_from_checkpoint(*resume_ckpt));
    prov.inputs.emplace_back("resume", a.resume);
  } else {
    model.emplace(cfg);
  }

  auto set = load_training_set(data_dir, model->config());
  TrainStage1Options opts;
  opts.iterations = a.iters;
  opts.out_dir = out;
  opts.verbose = a.verbose;
  if (resume_ckpt) opts.resume = &*resume_ckpt;
  auto hist = train_stage1(*model, set, opts);

  write_json(out / "history.json", history_json(hist));
  prov.outputs = {"stage1.dpig", "history.json"};
  if (!hist.l1.empty())
    std::printf("train-stage1: %zu iterations, final l1 %.4f d %.4f pose %.6f\n",
                hist.l1.size(), hist.l1.back(), hist.d_value.back(),
                hist.pose_loss.back());
  else
    std::printf("train-stage1: no iterations run, checkpoint written\n");
}

// ----------------------------------------------------------- train-stage2 --

struct TrainStage2Args {
  std::string stage1;
  std::string data;
  std::string kinds = "fg,bg,pose";
  long iters = -1;
  bool verbose = false;
};

void cmd_train_stage2(const CommonArgs& c, const TrainStage2Args& a, Provenance& prov) {
  auto cfg = load_cli_config(c);
  auto out = resolve_out(c);
  auto kinds = parse_kind_list(a.kinds);
  if (kinds.empty()) throw UsageError("--kinds lists no factors (expected fg,bg,pose subset)");

  auto s1 = load_stage1_model(need_file(a.stage1, "stage-I checkpoint", "--stage1"));
  prov.inputs.emplace_back("stage1", a.stage1);
  auto data_dir = need_dir(a.data, "dataset directory", "--data");
  prov.data_dir = data_dir.string();
  auto set = load_training_set(data_dir, s1.config());

  Stage2Model s2(cfg);
  TrainStage2Options opts;
  opts.iterations = a.iters;
  opts.verbose = a.verbose;
  long iters_run = a.iters >= 0 ? a.iters : cfg.iters_stage2;

  for (auto kind : kinds) {
    auto real = extract_embeddings(s1, set, kind);
    if (real.size(1) != embedding_dim(kind, cfg))
      throw std::runtime_error(std::string("stage-I checkpoint produces ") +
                               std::to_string(real.size(1)) + "-d " + to_string(kind) +
                               " embeddings but the config expects " +
                               std::to_string(embedding_dim(kind, cfg)));
    auto cache = std::string("embeddings_") + to_string(kind) + ".bin";
    save_embedding_cache(out / cache, static_cast<int>(kind), real);
    prov.outputs.push_back(cache);

    auto hist = train_stage2(s2, real, kind, opts);
    double last = hist.critic_value.empty() ? 0.0 : hist.critic_value.back();
    std::printf("train-stage2: %s done, %zu mapper steps, critic value %.5f\n",
                to_string(kind), hist.mapper_value.size(), last);
  }

  save_stage2_model(out / "stage2.dpig", s2, static_cast<uint64_t>(iters_run));
  prov.outputs.push_back("stage2.dpig");
}

// ------------------------------------------------------------------ sample --

struct SampleArgs {
  std::string stage1;
  std::string stage2;
  int count = 8;
  int cols = 4;
};

void cmd_sample(const CommonArgs& c, const SampleArgs& a, Provenance& prov) {
  if (a.count < 1) throw UsageError("--count must be at least 1");
  if (a.cols < 1) throw UsageError("--cols must be at least 1");
  load_cli_config(c);
  auto out = resolve_out(c);
  auto s1 = load_stage1_model(need_file(a.stage1, "stage-I checkpoint", "--stage1"));
  auto s2 = load_stage2_model(need_file(a.stage2, "stage-II checkpoint", "--stage2"));
  prov.inputs.emplace_back("stage1", a.stage1);
  prov.inputs.emplace_back("stage2", a.stage2);

  auto gen = make_generator(c.seed);
  GenerationSources src{FactorSource::sampled(), FactorSource::sampled(),
                        FactorSource::sampled()};
  std::vector<torch::Tensor> imgs;
  json cells = json::array();
  for (int i = 0; i < a.count; ++i) {
    auto r = generate(s1, &s2, src, std::nullopt, gen);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03d.png", i);
    write_image_png(out / name, r.image);
    prov.outputs.emplace_back(name);
    imgs.push_back(r.image);
    cells.push_back(cell_json(r));
  }
  write_image_grid_png(out / "grid.png", imgs, a.cols);
  write_json(out / "samples.json", json{{"cells", cells}});
  prov.outputs.emplace_back("grid.png");
  prov.outputs.emplace_back("samples.json");
  std::printf("sample: wrote %d images and grid.png to %s\n", a.count,
              out.string().c_str());
}

// -------------------------------------------------------------- manipulate --

struct ManipulateArgs {
  std::string stage1;
  std::string stage2;
  std::string data;
  std::string sample;  // comma list of factors drawn fresh per cell
  std::string fix;     // comma list of factors conditioned on the row's image
  int rows = 4;
  int cols = 6;
};

void cmd_manipulate(const CommonArgs& c, const ManipulateArgs& a, Provenance& prov) {
  if (a.rows < 1 || a.cols < 1) throw UsageError("--rows/--cols must be at least 1");
  auto sampled = parse_kind_list(a.sample);
  auto fixed = parse_kind_list(a.fix);
  std::set<int> seen;
  for (auto k : sampled) seen.insert(static_cast<int>(k));
  for (auto k : fixed) seen.insert(static_cast<int>(k));
  if (sampled.size() + fixed.size() != 3 || seen.size() != 3)
    throw UsageError("each of fg, bg, pose must appear in exactly one of --sample/--fix");

  load_cli_config(c);
  auto out = resolve_out(c);
  auto s1 = load_stage1_model(need_file(a.stage1, "stage-I checkpoint", "--stage1"));
  prov.inputs.emplace_back("stage1", a.stage1);
  std::optional<Stage2Model> s2;
  if (!sampled.empty()) {
    s2 = load_stage2_model(need_file(a.stage2, "stage-II checkpoint", "--stage2"));
    prov.inputs.emplace_back("stage2", a.stage2);
  }
  auto data_dir = need_dir(a.data, "dataset directory", "--data");
  prov.data_dir = data_dir.string();
  auto records = load_dataset(data_dir);
  if (records.empty()) throw std::runtime_error("dataset has no records: " + a.data);
  int rows = std::min<int>(a.rows, static_cast<int>(records.size()));

  GenerationSources src;
  auto slot = [&](FactorKind k) -> FactorSource& {
    return k == FactorKind::FG ? src.fg : k == FactorKind::BG ? src.bg : src.pose;
  };
  for (auto k : sampled) slot(k) = FactorSource::sampled();
  for (auto k : fixed) slot(k) = FactorSource::conditioned();

  auto gen = make_generator(c.seed);
  std::vector<torch::Tensor> imgs;
  json row_list = json::array();
  for (int r = 0; r < rows; ++r) {
    const auto& rec = records[static_cast<size_t>(r)];
    auto cond = load_conditioning(data_dir, rec);
    json cells = json::array();
    for (int col = 0; col < a.cols; ++col) {
      auto res = generate(s1, s2 ? &*s2 : nullptr, src, cond, gen);
      imgs.push_back(res.image);
      cells.push_back(cell_json(res));
    }
    row_list.push_back(json{{"conditioning", rec.image_path}, {"cells", cells}});
  }

  write_image_grid_png(out / "grid.png", imgs, a.cols);
  json js = json::array(), jf = json::array();
  for (auto k : sampled) js.push_back(to_string(k));
  for (auto k : fixed) jf.push_back(to_string(k));
  write_json(out / "manipulate.json",
             json{{"sampled", js}, {"fixed", jf}, {"rows", row_list}});
  prov.outputs = {"grid.png", "manipulate.json"};
  std::printf("manipulate: %d x %d grid written to %s\n", rows, a.cols,
              out.string().c_str());
}

// ------------------------------------------------------------- interpolate --

struct InterpolateArgs {
  std::string stage1;
  std::string stage2;
  std::string kind = "fg";
  int steps = 8;
  std::string data;  // optional conditioning source for the held factors
  int index = 0;
};

void cmd_interpolate(const CommonArgs& c, const InterpolateArgs& a, Provenance& prov) {
  auto kind = parse_kind_flag(a.kind);
  if (a.steps < 2) throw UsageError("--steps must be at least 2");
  load_cli_config(c);
  auto out = resolve_out(c);
  auto s1 = load_stage1_model(need_file(a.stage1, "stage-I checkpoint", "--stage1"));
  auto s2 = load_stage2_model(need_file(a.stage2, "stage-II checkpoint", "--stage2"));
  prov.inputs.emplace_back("stage1", a.stage1);
  prov.inputs.emplace_back("stage2", a.stage2);

  GenerationSources base{FactorSource::sampled(), FactorSource::sampled(),
                         FactorSource::sampled()};
  std::optional<ConditioningInput> cond;
  if (!a.data.empty()) {
    auto data_dir = need_dir(a.data, "dataset directory", "--data");
    prov.data_dir = data_dir.string();
    auto records = load_dataset(data_dir);
    if (a.index < 0 || a.index >= static_cast<int>(records.size()))
      throw std::runtime_error("--index " + std::to_string(a.index) +
                               " out of range: dataset has " +
                               std::to_string(records.size()) + " records");
    cond = load_conditioning(data_dir, records[static_cast<size_t>(a.index)]);
    base = GenerationSources{FactorSource::conditioned(), FactorSource::conditioned(),
                             FactorSource::conditioned()};
  }

  auto gen = make_generator(c.seed);
  auto frames = interpolate_gaussian(s1, s2, kind, a.steps, base, cond, gen);

  std::vector<torch::Tensor> imgs;
  json cells = json::array();
  for (size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%02zu.png", i);
    write_image_png(out / name, frames[i].image);
    prov.outputs.emplace_back(name);
    imgs.push_back(frames[i].image);
    cells.push_back(cell_json(frames[i]));
  }
  write_image_grid_png(out / "grid.png", imgs, a.steps);
  write_json(out / "interpolate.json",
             json{{"kind", to_string(kind)}, {"steps", a.steps}, {"cells", cells}});
  prov.outputs.emplace_back("grid.png");
  prov.outputs.emplace_back("interpolate.json");
  std::printf("interpolate: %d %s frames written to %s\n", a.steps, to_string(kind),
              out.string().c_str());
}

// ------------------------------------------------------------------ invert --

struct InvertArgs {
  std::string stage1;
  std::string stage2;
  std::string data;
  int index = 0;
  std::string kind = "fg";
  int steps = 1000;
  double lr = 1e-2;
  double mu = 1e-4;
};

void cmd_invert(const CommonArgs& c, const InvertArgs& a, Provenance& prov) {
  auto kind = parse_kind_flag(a.kind);
  if (a.steps < 0) throw UsageError("--steps must be non-negative");
  load_cli_config(c);
  auto out = resolve_out(c);
  auto s1 = load_stage1_model(need_file(a.stage1, "stage-I checkpoint", "--stage1"));
  auto s2 = load_stage2_model(need_file(a.stage2, "stage-II checkpoint", "--stage2"));
  prov.inputs.emplace_back("stage1", a.stage1);
  prov.inputs.emplace_back("stage2", a.stage2);
  auto data_dir = need_dir(a.data, "dataset directory", "--data");
  prov.data_dir = data_dir.string();
  auto records = load_dataset(data_dir);
  if (a.index < 0 || a.index >= static_cast<int>(records.size()))
    throw std::runtime_error("--index " + std::to_string(a.index) +
                             " out of range: dataset has " +
                             std::to_string(records.size()) + " records");
  const auto& rec = records[static_cast<size_t>(a.index)];
  auto cond = load_conditioning(data_dir, rec);

  auto enc = encode_factors(s1, cond.image, cond.pose);
  FactorEmbedding target = kind == FactorKind::FG   ? enc.fg
                           : kind == FactorKind::BG ? enc.bg
                                                    : s1.pose_encode(pose_to_vector(cond.pose));
  InvertOptions opts;
  opts.steps = a.steps;
  opts.lr = a.lr;
  opts.mu = a.mu;
  auto res = invert_embedding(s2, target, opts);

  std::vector<double> z(res.z.numel());
  {
    auto zf = res.z.detach().to(torch::kFloat64).contiguous();
    std::memcpy(z.data(), zf.data_ptr<double>(), z.size() * sizeof(double));
  }
  write_json(out / "inversion.json",
             json{{"kind", to_string(kind)},
                  {"image", rec.image_path},
                  {"steps", a.steps},
                  {"residual", res.residual},
                  {"residual_log", res.residual_log},
                  {"z", z}});

  // side-by-side: conditioned composite vs the re-mapped inversion
  {
    torch::NoGradGuard ng;
    auto base = compose(s1, enc.fg, enc.bg, cond.pose);
    auto mapped = s2.map_noise(res.z.detach(), kind);
    torch::Tensor redone;
    if (kind == FactorKind::FG)
      redone = compose(s1, mapped, enc.bg, cond.pose);
    else if (kind == FactorKind::BG)
      redone = compose(s1, enc.fg, mapped, cond.pose);
    else
      redone = compose(s1, enc.fg, enc.bg, vector_to_pose(s1.pose_decode(mapped)));
    write_image_grid_png(out / "invert_compare.png", {base, redone}, 2);
  }
  prov.outputs = {"inversion.json", "invert_compare.png"};
  std::printf("invert: %s residual %.5f after %d steps\n", to_string(kind), res.residual,
              a.steps);
}

// ------------------------------------------------------------- gen-virtual --

struct GenVirtualArgs {
  std::string stage1;
  std::string stage2;
  std::string data;  // pose pool source
  int ids = 500;
  int per_id = 24;
};

void cmd_gen_virtual(const CommonArgs& c, const GenVirtualArgs& a, Provenance& prov) {
  if (a.ids < 1 || a.per_id < 1) throw UsageError("--ids/--per-id must be at least 1");
  load_cli_config(c);
  auto out = resolve_out(c);
  auto s1 = load_stage1_model(need_file(a.stage1, "stage-I checkpoint", "--stage1"));
  auto s2 = load_stage2_model(need_file(a.stage2, "stage-II checkpoint", "--stage2"));
  prov.inputs.emplace_back("stage1", a.stage1);
  prov.inputs.emplace_back("stage2", a.stage2);
  auto data_dir = need_dir(a.data, "dataset directory", "--data");
  prov.data_dir = data_dir.string();

  VirtualDatasetSpec spec;
  spec.n_identities = a.ids;
  spec.images_per_identity = a.per_id;
  spec.seed = static_cast<uint64_t>(c.seed);
  for (const auto& rec : load_dataset(data_dir)) spec.pose_pool.push_back(rec.pose);

  generate_virtual_dataset(s1, s2, spec, out);
  prov.outputs = {"manifest.tsv", "virtual_manifest.tsv"};
  std::printf("gen-virtual: %d identities x %d images written to %s\n", a.ids, a.per_id,
              out.string().c_str());
}

// ---------------------------------------------------------------- evaluate --

struct EvaluateArgs {
  std::string stage1;
  std::string stage2;
  std::string data;
  std::string metrics = "recon";
  int probes = 32;
};

json evaluate_recon(Stage1Model& s1, const TrainingSet& set) {
  torch::NoGradGuard ng;
  double l1_sum = 0, ssim_sum = 0, mask_ssim_sum = 0;
  int64_t mask_n = 0;
  const int64_t chunk = 8;
  for (int64_t at = 0; at < set.size(); at += chunk) {
    int64_t n = std::min(chunk, set.size() - at);
    auto index = torch::arange(at, at + n, torch::kLong);
    std::vector<RoiSet> rois(set.rois.begin() + at, set.rois.begin() + at + n);
    auto x = set.images.index_select(0, index);
    auto x_hat = s1.reconstruct_batch(x, set.heatmaps.index_select(0, index),
                                      set.masks.index_select(0, index), rois);
    for (int64_t i = 0; i < n; ++i) {
      l1_sum += (x_hat[i] - x[i]).abs().mean().item<double>();
      ssim_sum += ssim(x_hat[i], x[i]);
      const auto& gt = set.fg_masks[static_cast<size_t>(at + i)];
      if (gt.defined()) {
        mask_ssim_sum += mask_ssim(x_hat[i], x[i], gt);
        ++mask_n;
      }
    }
  }
  double n = static_cast<double>(set.size());
  json j{{"l1", l1_sum / n}, {"ssim", ssim_sum / n}, {"images", set.size()}};
  if (mask_n > 0) j["mask_ssim"] = mask_ssim_sum / static_cast<double>(mask_n);
  return j;
}

json evaluate_frechet(Stage1Model& s1, Stage2Model* s2, const TrainingSet& set,
                      long seed) {
  json j = json::object();
  if (!s2) {
    j["skipped"] = "no stage-II checkpoint given";
    return j;
  }
  torch::NoGradGuard ng;
  auto gen = make_generator(seed);
  for (auto kind : {FactorKind::FG, FactorKind::BG, FactorKind::POSE}) {
    const char* name = to_string(kind);
    if (!s2->is_trained(kind)) {
      j[name] = "skipped: mapper not trained";
      continue;
    }
    auto real = extract_embeddings(s1, set, kind);
    int64_t k = real.size(1);
    if (real.size(0) < k + 1) {
      j[name] = "skipped: needs at least " + std::to_string(k + 1) + " samples";
      continue;
    }
    auto z = torch::randn({real.size(0), k}, gen);
    auto mapped = s2->map_forward(z, kind);
    j[name] = embedding_frechet(mapped, real);
  }
  return j;
}

json evaluate_reid(Stage1Model& s1, const TrainingSet& set) {
  // Market-style protocol: per identity with 2+ images the first one queries,
  // everything else (same identity and all others) forms the gallery
  std::map<int, std::vector<int64_t>> by_id;
  for (int64_t i = 0; i < set.size(); ++i) {
    int id = set.identities[static_cast<size_t>(i)];
    if (id >= 0) by_id[id].push_back(i);
  }
  std::vector<int64_t> query, gallery;
  std::set<int64_t> is_query;
  for (const auto& [id, idx] : by_id)
    if (idx.size() >= 2) {
      query.push_back(idx[0]);
      is_query.insert(idx[0]);
    }
  if (query.empty())
    throw std::runtime_error("re-id needs at least one identity with 2 or more images");
  for (int64_t i = 0; i < set.size(); ++i)
    if (set.identities[static_cast<size_t>(i)] >= 0 && !is_query.count(i))
      gallery.push_back(i);

  auto features = extract_reid_features(s1, set);
  auto pick = [&](const std::vector<int64_t>& idx) {
    return features.index_select(0, torch::tensor(idx, torch::kLong));
  };
  std::vector<int> qlab, glab;
  for (auto i : query) qlab.push_back(set.identities[static_cast<size_t>(i)]);
  for (auto i : gallery) glab.push_back(set.identities[static_cast<size_t>(i)]);
  auto res = reid_evaluate(pick(query), qlab, pick(gallery), glab);
  return json{{"rank1", res.rank1},
              {"mean_ap", res.mean_ap},
              {"queries", query.size()},
              {"gallery", gallery.size()}};
}

json evaluate_disentangle(Stage1Model& s1, const TrainingSet& set, int probes, long seed) {
  Rng rng(static_cast<uint64_t>(seed));
  auto rep = disentanglement_score(s1, set, probes, rng);
  return json{{"fg_inside", rep.fg_inside},   {"fg_outside", rep.fg_outside},
              {"fg_ratio", rep.fg_ratio},     {"bg_inside", rep.bg_inside},
              {"bg_outside", rep.bg_outside}, {"bg_ratio", rep.bg_ratio},
              {"probes", rep.probes}};
}

void cmd_evaluate(const CommonArgs& c, const EvaluateArgs& a, Provenance& prov) {
  std::set<std::string> metrics;
  for (const auto& part : split(a.metrics, ',')) {
    auto m = trim(part);
    if (m.empty()) continue;
    if (m != "recon" && m != "frechet" && m != "reid" && m != "disentangle")
      throw UsageError("unknown metric '" + m +
                       "' (expected recon, frechet, reid, disentangle)");
    metrics.insert(m);
  }
  if (metrics.empty()) throw UsageError("--metrics lists no metrics");
  if (a.probes < 1) throw UsageError("--probes must be at least 1");

  load_cli_config(c);
  auto out = resolve_out(c);
  auto s1 = load_stage1_model(need_file(a.stage1, "stage-I checkpoint", "--stage1"));
  prov.inputs.emplace_back("stage1", a.stage1);
  std::optional<Stage2Model> s2;
  if (!a.stage2.empty()) {
    s2 = load_stage2_model(need_file(a.stage2, "stage-II checkpoint", "--stage2"));
    prov.inputs.emplace_back("stage2", a.stage2);
  }
  auto data_dir = need_dir(a.data, "dataset directory", "--data");
  prov.data_dir = data_dir.string();
  auto set = load_training_set(data_dir, s1.config());

  json j;
  if (metrics.count("recon")) {
    j["recon"] = evaluate_recon(s1, set);
    std::printf("evaluate: recon l1 %.4f ssim %.4f\n", j["recon"]["l1"].get<double>(),
                j["recon"]["ssim"].get<double>());
  }
  if (metrics.count("frechet")) {
    j["frechet"] = evaluate_frechet(s1, s2 ? &*s2 : nullptr, set, c.seed);
    std::printf("evaluate: frechet %s\n", j["frechet"].dump().c_str());
  }
  if (metrics.count("reid")) {
    j["reid"] = evaluate_reid(s1, set);
    std::printf("evaluate: reid rank1 %.4f mAP %.4f\n", j["reid"]["rank1"].get<double>(),
                j["reid"]["mean_ap"].get<double>());
  }
  if (metrics.count("disentangle")) {
    j["disentangle"] = evaluate_disentangle(s1, set, a.probes, c.seed);
    std::printf("evaluate: disentangle fg_ratio %.3f bg_ratio %.3f\n",
                j["disentangle"]["fg_ratio"].get<double>(),
                j["disentangle"]["bg_ratio"].get<double>());
  }
  write_json(out / "metrics.json", j);
  prov.outputs = {"metrics.json"};
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"two-stage disentangled person image generation pipeline"};
  app.require_subcommand(1);

  CommonArgs common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "pipeline config file")->required();
    sub->add_option("--seed", common.seed, "RNG seed")->required();
    sub->add_option("--out", common.out, "output directory (DPIG_OUT overrides)");
  };

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "write a synthetic stick-figure dataset");
  add_common(synth);
  synth->add_option("--count", synth_args.count, "number of images");

  TrainStage1Args ts1_args;
  auto* ts1 = app.add_subcommand("train-stage1",
                                 "train the reconstruction networks and pose autoencoder");
  add_common(ts1);
  ts1->add_option("--data", ts1_args.data, "dataset directory")->required();
  ts1->add_option("--iters", ts1_args.iters, "iteration override (-1: config value)");
  ts1->add_option("--resume", ts1_args.resume, "checkpoint to resume from");
  ts1->add_flag("--verbose", ts1_args.verbose, "log every 100 iterations");

  TrainStage2Args ts2_args;
  auto* ts2 = app.add_subcommand("train-stage2", "train the noise-to-embedding mappers");
  add_common(ts2);
  ts2->add_option("--stage1", ts2_args.stage1, "stage-I checkpoint")->required();
  ts2->add_option("--data", ts2_args.data, "dataset directory")->required();
  ts2->add_option("--kinds", ts2_args.kinds, "factors to train (default fg,bg,pose)");
  ts2->add_option("--iters", ts2_args.iters, "mapper steps override (-1: config value)");
  ts2->add_flag("--verbose", ts2_args.verbose, "log every 200 iterations");

  SampleArgs sample_args;
  auto* sample = app.add_subcommand("sample", "generate images from noise alone");
  add_common(sample);
  sample->add_option("--stage1", sample_args.stage1, "stage-I checkpoint");
  sample->add_option("--stage2", sample_args.stage2, "stage-II checkpoint");
  sample->add_option("--count", sample_args.count, "number of images");
  sample->add_option("--cols", sample_args.cols, "grid columns");

  ManipulateArgs manip_args;
  auto* manip = app.add_subcommand(
      "manipulate", "resample chosen factors of real images (rows: images, cols: draws)");
  add_common(manip);
  manip->add_option("--stage1", manip_args.stage1, "stage-I checkpoint");
  manip->add_option("--stage2", manip_args.stage2, "stage-II checkpoint");
  manip->add_option("--data", manip_args.data, "conditioning dataset")->required();
  manip->add_option("--sample", manip_args.sample, "factors drawn fresh per cell");
  manip->add_option("--fix", manip_args.fix, "factors conditioned on the row image");
  manip->add_option("--rows", manip_args.rows, "conditioning rows");
  manip->add_option("--cols", manip_args.cols, "draws per row");

  InterpolateArgs interp_args;
  auto* interp = app.add_subcommand("interpolate",
                                    "walk one factor between two noise draws");
  add_common(interp);
  interp->add_option("--stage1", interp_args.stage1, "stage-I checkpoint");
  interp->add_option("--stage2", interp_args.stage2, "stage-II checkpoint");
  interp->add_option("--kind", interp_args.kind, "factor to interpolate (fg|bg|pose)");
  interp->add_option("--steps", interp_args.steps, "frames including endpoints");
  interp->add_option("--data", interp_args.data, "condition held factors on this dataset");
  interp->add_option("--index", interp_args.index, "conditioning record index");

  InvertArgs invert_args;
  auto* invert = app.add_subcommand("invert",
                                    "recover the noise vector behind a real image's factor");
  add_common(invert);
  invert->add_option("--stage1", invert_args.stage1, "stage-I checkpoint");
  invert->add_option("--stage2", invert_args.stage2, "stage-II checkpoint");
  invert->add_option("--data", invert_args.data, "dataset directory")->required();
  invert->add_option("--index", invert_args.index, "record to invert");
  invert->add_option("--kind", invert_args.kind, "factor to invert (fg|bg|pose)");
  invert->add_option("--steps", invert_args.steps, "optimizer steps");
  invert->add_option("--lr", invert_args.lr, "optimizer learning rate");
  invert->add_option("--mu", invert_args.mu, "z-norm prior weight");

  GenVirtualArgs gv_args;
  auto* gv = app.add_subcommand("gen-virtual",
                                "write a virtual identity dataset (one fg code per id)");
  add_common(gv);
  gv->add_option("--stage1", gv_args.stage1, "stage-I checkpoint");
  gv->add_option("--stage2", gv_args.stage2, "stage-II checkpoint");
  gv->add_option("--data", gv_args.data, "pose pool dataset")->required();
  gv->add_option("--ids", gv_args.ids, "identities");
  gv->add_option("--per-id", gv_args.per_id, "images per identity");

  EvaluateArgs eval_args;
  auto* ev = app.add_subcommand("evaluate", "compute metrics on a dataset");
  add_common(ev);
  ev->add_option("--stage1", eval_args.stage1, "stage-I checkpoint");
  ev->add_option("--stage2", eval_args.stage2, "stage-II checkpoint (frechet only)");
  ev->add_option("--data", eval_args.data, "dataset directory")->required();
  ev->add_option("--metrics", eval_args.metrics,
                 "comma list: recon, frechet, reid, disentangle");
  ev->add_option("--probes", eval_args.probes, "disentangle probe count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);  // prints the message / help text
    return code == 0 ? 0 : 1;
  }

  try {
    Provenance prov;
    for (int i = 0; i < argc; ++i) prov.argv.emplace_back(argv[i]);

    if (app.got_subcommand(synth)) {
      prov.command = "synth";
      cmd_synth(common, synth_args, prov);
    } else if (app.got_subcommand(ts1)) {
      prov.command = "train-stage1";
      cmd_train_stage1(common, ts1_args, prov);
    } else if (app.got_subcommand(ts2)) {
      prov.command = "train-stage2";
      cmd_train_stage2(common, ts2_args, prov);
    } else if (app.got_subcommand(sample)) {
      prov.command = "sample";
      cmd_sample(common, sample_args, prov);
    } else if (app.got_subcommand(manip)) {
      prov.command = "manipulate";
      cmd_manipulate(common, manip_args, prov);
    } else if (app.got_subcommand(interp)) {
      prov.command = "interpolate";
      cmd_interpolate(common, interp_args, prov);
    } else if (app.got_subcommand(invert)) {
      prov.command = "invert";
      cmd_invert(common, invert_args, prov);
    } else if (app.got_subcommand(gv)) {
      prov.command = "gen-virtual";
      cmd_gen_virtual(common, gv_args, prov);
    } else {
      prov.command = "evaluate";
      cmd_evaluate(common, eval_args, prov);
    }

    write_provenance(resolve_out(common), common, prov);
    return 0;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace dpig
