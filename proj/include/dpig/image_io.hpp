#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

namespace dpig {

// PNG <-> tensor conversions. Images are [3,H,W] float32 in [-1,1] (8-bit RGB
// on disk), masks are [H,W] float32 in {0,1} (8-bit gray, 0 or 255 on disk).

torch::Tensor read_image_png(const std::filesystem::path& path);
void write_image_png(const std::filesystem::path& path, const torch::Tensor& img);

torch::Tensor read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask);

// Montage of equally sized images, row-major, 2 px white separators.
void write_image_grid_png(const std::filesystem::path& path,
                          const std::vector<torch::Tensor>& images, int cols);

}  // namespace dpig
