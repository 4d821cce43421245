#include "dpig/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "dpig/util.hpp"

namespace dpig {

const char* to_string(FactorKind kind) {
  switch (kind) {
    case FactorKind::FG: return "fg";
    case FactorKind::BG: return "bg";
    case FactorKind::POSE: return "pose";
  }
  return "?";
}

FactorKind factor_kind_from_string(const std::string& name) {
  if (name == "fg") return FactorKind::FG;
  if (name == "bg") return FactorKind::BG;
  if (name == "pose") return FactorKind::POSE;
  throw std::invalid_argument("unknown factor kind: " + name);
}

void validate_pose(const PoseAnnotation& pose) {
  for (int i = 0; i < kKeypoints; ++i) {
    float px = pose.x(i);
    float py = pose.y(i);
    if (!std::isfinite(px) || !std::isfinite(py))
      throw std::invalid_argument("pose keypoint " + std::to_string(i) + " has non-finite coords");
    if (px < -1.f || px > 1.f || py < -1.f || py > 1.f)
      throw std::invalid_argument("pose keypoint " + std::to_string(i) +
                                  " outside normalized range [-1,1]");
    if (pose.visibility[i] > 1)
      throw std::invalid_argument("pose keypoint " + std::to_string(i) +
                                  " visibility flag must be 0 or 1");
    if (pose.visibility[i] == 0 && (px != 0.f || py != 0.f))
      throw std::invalid_argument("pose keypoint " + std::to_string(i) +
                                  " is invisible but has non-zero coords");
  }
}

PoseVector pose_to_vector(const PoseAnnotation& pose) {
  PoseVector v;
  for (int i = 0; i < 2 * kKeypoints; ++i) v.values[i] = pose.coords[i];
  for (int i = 0; i < kKeypoints; ++i)
    v.values[2 * kKeypoints + i] = pose.visibility[i] ? 1.f : 0.f;
  return v;
}

PoseAnnotation vector_to_pose(const PoseVector& v) {
  PoseAnnotation pose;
  for (int i = 0; i < kKeypoints; ++i) {
    bool vis = v.values[2 * kKeypoints + i] >= 0.5f;
    pose.visibility[i] = vis ? 1 : 0;
    if (!vis) {
      // Occluded keypoints carry no position; pin them to the origin so the
      // flag alone decides what downstream rendering sees.
      pose.coords[2 * i] = 0.f;
      pose.coords[2 * i + 1] = 0.f;
      continue;
    }
    for (int k = 0; k < 2; ++k) {
      float c = v.values[2 * i + k];
      if (!std::isfinite(c)) throw std::invalid_argument("pose vector has non-finite coord");
      pose.coords[2 * i + k] = std::clamp(c, -1.f, 1.f);
    }
  }
  return pose;
}

torch::Tensor pose_vector_to_tensor(const PoseVector& v) {
  auto t = torch::empty({kPoseVectorDim}, torch::kFloat32);
  std::copy(v.values.begin(), v.values.end(), t.data_ptr<float>());
  return t;
}

PoseVector tensor_to_pose_vector(const torch::Tensor& t) {
  if (t.dim() != 1 || t.size(0) != kPoseVectorDim)
    throw std::invalid_argument("pose vector tensor must have shape [54]");
  auto c = t.to(torch::kFloat32).contiguous();
  PoseVector v;
  std::copy(c.data_ptr<float>(), c.data_ptr<float>() + kPoseVectorDim, v.values.begin());
  return v;
}

PipelineConfig validate_config(const PipelineConfig& cfg) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };

  if (cfg.image_h < 1 || cfg.image_w < 1) fail("image dims positive");
  if (cfg.n_blocks < 2) fail("n_blocks must be at least 2");
  if (cfg.base_channels < 1) fail("base_channels must be positive");
  if (cfg.roi_size < 2) fail("roi_size must be at least 2");
  if (cfg.roi_margin < 0) fail("roi_margin must be non-negative");
  if (!(cfg.heatmap_sigma > 0)) fail("heatmap_sigma must be positive");
  if (cfg.mask_radius < 1) fail("mask_radius must be at least 1");
  if (cfg.fg_dim < 7 || cfg.fg_dim % 7 != 0) fail("fg_dim must be a positive multiple of 7");
  if (cfg.bg_dim < 1) fail("bg_dim must be positive");
  if (cfg.pose_dim < 1) fail("pose_dim must be positive");
  if (cfg.fc_hidden < 1) fail("fc_hidden must be positive");
  if (!(cfg.l1_weight > 0)) fail("l1_weight must be positive");
  if (!(cfg.clip_value > 0)) fail("clip_value must be positive");
  if (cfg.n_critic < 1) fail("n_critic must be at least 1");
  if (cfg.adam_beta1 < 0 || cfg.adam_beta1 >= 1 || cfg.adam_beta2 < 0 || cfg.adam_beta2 >= 1)
    fail("adam betas must lie in [0,1)");
  if (!(cfg.learning_rate > 0) || !(cfg.pose_learning_rate > 0) ||
      !(cfg.stage2_learning_rate > 0))
    fail("learning rates must be positive");
  if (cfg.batch_stage1 < 1 || cfg.batch_pose < 1 || cfg.batch_stage2 < 1)
    fail("batch sizes must be at least 1");
  if (cfg.iters_stage1 < 0 || cfg.iters_pose < 0 || cfg.iters_stage2 < 0)
    fail("iteration counts must be non-negative");
  if (cfg.checkpoint_every < 1) fail("checkpoint_every must be at least 1");
  if (cfg.rng_seed < 0) fail("rng_seed must be non-negative");

  // Stride-2 convs use ceil semantics (k=3, pad=1), so sizes go ceil(d/2) at each
  // of the n_blocks-1 transitions. Check every level stays at least 1 pixel for
  // both the image path and the ROI path.
  for (auto dims : {std::pair<int, int>{cfg.image_h, cfg.image_w},
                    std::pair<int, int>{cfg.roi_size, cfg.roi_size}}) {
    int h = dims.first, w = dims.second;
    for (int k = 0; k + 1 < cfg.n_blocks; ++k) {
      h = (h + 1) / 2;
      w = (w + 1) / 2;
      if (h < 1 || w < 1) fail("spatial dims collapse below 1 within the block stack");
    }
  }
  return cfg;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

struct ConfigField {
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <class T>
T parse_number(const std::string& key, const std::string& raw);

template <>
double parse_number<double>(const std::string& key, const std::string& raw) {
  size_t used = 0;
  double v;
  try {
    v = std::stod(raw, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid value for " + key + ": " + raw);
  }
  if (used != raw.size()) throw std::invalid_argument("invalid value for " + key + ": " + raw);
  return v;
}

template <>
long parse_number<long>(const std::string& key, const std::string& raw) {
  size_t used = 0;
  long v;
  try {
    v = std::stol(raw, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid value for " + key + ": " + raw);
  }
  if (used != raw.size()) throw std::invalid_argument("invalid value for " + key + ": " + raw);
  return v;
}

template <>
int parse_number<int>(const std::string& key, const std::string& raw) {
  long v = parse_number<long>(key, raw);
  if (v < INT32_MIN || v > INT32_MAX)
    throw std::invalid_argument("invalid value for " + key + ": " + raw);
  return static_cast<int>(v);
}

const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
#define DPIG_FIELD(name, type)                                                              \
  {#name, ConfigField{[](PipelineConfig& c, const std::string& raw) {                        \
                        c.name = parse_number<type>(#name, raw);                            \
                      },                                                                    \
                      [](const PipelineConfig& c) { return fmt_double(double(c.name)); }}}
#define DPIG_FIELD_INT(name, type)                                                          \
  {#name, ConfigField{[](PipelineConfig& c, const std::string& raw) {                        \
                        c.name = parse_number<type>(#name, raw);                            \
                      },                                                                    \
                      [](const PipelineConfig& c) { return std::to_string(c.name); }}}
  static const std::vector<std::pair<std::string, ConfigField>> fields = {
      DPIG_FIELD_INT(image_h, int),
      DPIG_FIELD_INT(image_w, int),
      DPIG_FIELD_INT(n_blocks, int),
      DPIG_FIELD_INT(base_channels, int),
      DPIG_FIELD_INT(roi_size, int),
      DPIG_FIELD(roi_margin, double),
      DPIG_FIELD(heatmap_sigma, double),
      DPIG_FIELD_INT(mask_radius, int),
      DPIG_FIELD_INT(fg_dim, int),
      DPIG_FIELD_INT(bg_dim, int),
      DPIG_FIELD_INT(pose_dim, int),
      DPIG_FIELD_INT(fc_hidden, int),
      DPIG_FIELD(l1_weight, double),
      DPIG_FIELD(clip_value, double),
      DPIG_FIELD_INT(n_critic, int),
      DPIG_FIELD(adam_beta1, double),
      DPIG_FIELD(adam_beta2, double),
      DPIG_FIELD(learning_rate, double),
      DPIG_FIELD(pose_learning_rate, double),
      DPIG_FIELD(stage2_learning_rate, double),
      DPIG_FIELD_INT(batch_stage1, int),
      DPIG_FIELD_INT(batch_pose, int),
      DPIG_FIELD_INT(batch_stage2, int),
      DPIG_FIELD_INT(iters_stage1, long),
      DPIG_FIELD_INT(iters_pose, long),
      DPIG_FIELD_INT(iters_stage2, long),
      DPIG_FIELD_INT(checkpoint_every, long),
      DPIG_FIELD_INT(rng_seed, long),
  };
#undef DPIG_FIELD
#undef DPIG_FIELD_INT
  return fields;
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg;
  std::map<std::string, const ConfigField*> table;
  for (const auto& [name, field] : config_fields()) table[name] = &field;

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = line;
    size_t hash = s.find('#');
    if (hash != std::string::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  " is not 'key = value': " + trim(line));
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    auto it = table.find(key);
    if (it == table.end())
      throw std::invalid_argument("unknown config key: " + key);
    it->second->set(cfg, value);
  }
  return validate_config(cfg);
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : config_fields()) {
    out += name;
    out += " = ";
    out += field.get(cfg);
    out += "\n";
  }
  return out;
}

int embedding_dim(FactorKind kind, const PipelineConfig& cfg) {
  switch (kind) {
    case FactorKind::FG: return cfg.fg_dim;
    case FactorKind::BG: return cfg.bg_dim;
    case FactorKind::POSE: return cfg.pose_dim;
  }
  return 0;
}

FactorEmbedding make_embedding(FactorKind kind, torch::Tensor values,
                               const PipelineConfig& cfg) {
  FactorEmbedding e{kind, std::move(values)};
  check_embedding(e, cfg);
  return e;
}

void check_embedding(const FactorEmbedding& e, const PipelineConfig& cfg) {
  if (!e.values.defined()) throw std::invalid_argument("embedding tensor is undefined");
  int64_t want = embedding_dim(e.kind, cfg);
  if (e.values.dim() != 1 || e.values.size(0) != want)
    throw std::invalid_argument(std::string("embedding for kind ") + to_string(e.kind) +
                                " must have length " + std::to_string(want));
  if (!torch::isfinite(e.values).all().item<bool>())
    throw std::invalid_argument("embedding has non-finite entries");
}

void check_image(const torch::Tensor& img, const PipelineConfig& cfg) {
  if (!img.defined() || img.dim() != 3 || img.size(0) != 3 || img.size(1) != cfg.image_h ||
      img.size(2) != cfg.image_w)
    throw std::invalid_argument("image must have shape [3," + std::to_string(cfg.image_h) +
                                "," + std::to_string(cfg.image_w) + "]");
  if (!img.is_floating_point()) throw std::invalid_argument("image must be floating point");
  double lo = img.min().item<double>();
  double hi = img.max().item<double>();
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo < -1.0001 || hi > 1.0001)
    throw std::invalid_argument("image values must lie in [-1,1]");
}

void check_mask(const torch::Tensor& mask, const PipelineConfig& cfg) {
  if (!mask.defined() || mask.dim() != 2 || mask.size(0) != cfg.image_h ||
      mask.size(1) != cfg.image_w)
    throw std::invalid_argument("mask must have shape [" + std::to_string(cfg.image_h) + "," +
                                std::to_string(cfg.image_w) + "]");
  auto ok = ((mask == 0) | (mask == 1)).all().item<bool>();
  if (!ok) throw std::invalid_argument("mask entries must be 0 or 1");
}

double scaled_sigma(const PipelineConfig& cfg) {
  return cfg.heatmap_sigma * cfg.image_h / kRefImageHeight;
}

int scaled_mask_radius(const PipelineConfig& cfg) {
  double r = cfg.mask_radius * cfg.image_h / kRefImageHeight;
  return std::max(1, static_cast<int>(std::lround(r)));
}

}  // namespace dpig
