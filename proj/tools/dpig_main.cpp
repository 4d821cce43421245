#include <torch/torch.h>

#include "dpig/cli.hpp"

int main(int argc, char** argv) {
  // single-threaded math keeps runs reproducible and plays nicely with small
  // CPU-only boxes; the workloads here are too small to gain from intra-op
  // parallelism anyway
  torch::set_num_threads(1);
  return dpig::run_cli(argc, argv);
}
