#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace dpig {

// Little-endian binary archive for model state:
//   magic        6 bytes, "DPIG1\0" (stage I) or "DPIG2\0" (stage II)
//   version      u32, currently 1
//   iteration    u64
//   config_len   u32 + that many bytes of config snapshot text
//   meta_len     u32 + that many bytes of "key = value" lines (may be empty)
//   n_arrays     u32
//   per array:   u16 name_len, name bytes, u8 dtype (0=f32, 1=f64, 2=i64),
//                u8 ndim, u64 dims[ndim], raw tensor data
// Optimizer slots ride along as arrays named "opt/<param>/exp_avg" etc.

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

struct Checkpoint {
  std::string magic;  // "DPIG1" or "DPIG2" (without the trailing NUL)
  uint32_t version = 1;
  uint64_t iteration = 0;
  std::string config_text;
  std::map<std::string, std::string> meta;
  NamedTensors arrays;

  const torch::Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_magic);

// Copies the optimizer's Adam slots (exp_avg, exp_avg_sq, step) for each named
// parameter into / out of the array list under "opt/<name>/...". Parameters
// with no state yet (never stepped) are skipped on save and on restore.
void append_adam_state(NamedTensors& arrays, const torch::optim::Adam& opt,
                       const NamedTensors& params);
void restore_adam_state(torch::optim::Adam& opt, const Checkpoint& ckpt,
                        const NamedTensors& params);

// Embedding cache: magic "DPIGE\0", u8 kind, u32 dim, u64 count, then count
// rows of dim float32 values.
void save_embedding_cache(const std::filesystem::path& path, int kind,
                          const torch::Tensor& rows);
std::pair<int, torch::Tensor> load_embedding_cache(const std::filesystem::path& path);

}  // namespace dpig
