#include "dpig/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace dpig {

namespace {

torch::Tensor to_u8_hwc(const torch::Tensor& img) {
  // [-1,1] float -> u8, 255 at +1, 0 at -1
  auto u8 = ((img.clamp(-1, 1) + 1) * 127.5f).round().clamp(0, 255).to(torch::kUInt8);
  return u8.permute({1, 2, 0}).contiguous();  // HWC
}

cv::Mat tensor_to_mat_bgr(const torch::Tensor& img) {
  if (!img.defined() || img.dim() != 3 || img.size(0) != 3)
    throw std::invalid_argument("image must have shape [3,H,W]");
  // store BGR (OpenCV's order) by flipping the channel axis before packing
  auto hwc = to_u8_hwc(img.to(torch::kFloat32).flip(0));
  cv::Mat bgr(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3);
  std::memcpy(bgr.data, hwc.data_ptr<uint8_t>(), hwc.numel());
  return bgr;
}

void write_png_bytes(const std::filesystem::path& path, const cv::Mat& mat) {
  std::vector<uchar> buf;
  if (!cv::imencode(".png", mat, buf))
    throw std::runtime_error("png encode failed for " + path.string());
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  size_t wrote = std::fwrite(buf.data(), 1, buf.size(), f);
  std::fclose(f);
  if (wrote != buf.size()) throw std::runtime_error("short write: " + path.string());
}

cv::Mat read_png_mat(const std::filesystem::path& path, int flags) {
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty()) throw std::runtime_error("cannot read image: " + path.string());
  return m;
}

}  // namespace

torch::Tensor read_image_png(const std::filesystem::path& path) {
  cv::Mat bgr = read_png_mat(path, cv::IMREAD_COLOR);
  auto t = torch::from_blob(bgr.data, {bgr.rows, bgr.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).flip(0).to(torch::kFloat32) / 127.5f - 1.f;
}

void write_image_png(const std::filesystem::path& path, const torch::Tensor& img) {
  write_png_bytes(path, tensor_to_mat_bgr(img));
}

torch::Tensor read_mask_png(const std::filesystem::path& path) {
  cv::Mat g = read_png_mat(path, cv::IMREAD_GRAYSCALE);
  auto t = torch::from_blob(g.data, {g.rows, g.cols}, torch::kUInt8).clone();
  return (t > 127).to(torch::kFloat32);
}

void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask) {
  if (!mask.defined() || mask.dim() != 2)
    throw std::invalid_argument("mask must have shape [H,W]");
  auto u8 = (mask.to(torch::kFloat32) > 0.5f).to(torch::kUInt8) * 255;
  u8 = u8.contiguous();
  cv::Mat g(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1);
  std::memcpy(g.data, u8.data_ptr<uint8_t>(), u8.numel());
  write_png_bytes(path, g);
}

void write_image_grid_png(const std::filesystem::path& path,
                          const std::vector<torch::Tensor>& images, int cols) {
  if (images.empty()) throw std::invalid_argument("image grid needs at least one image");
  if (cols < 1) throw std::invalid_argument("image grid needs at least one column");
  int64_t h = images[0].size(1), w = images[0].size(2);
  for (const auto& im : images)
    if (im.dim() != 3 || im.size(0) != 3 || im.size(1) != h || im.size(2) != w)
      throw std::invalid_argument("image grid entries must share shape [3,H,W]");

  int rows = static_cast<int>((images.size() + cols - 1) / cols);
  const int sep = 2;
  auto canvas = torch::ones({3, rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep},
                            torch::kFloat32);
  for (size_t i = 0; i < images.size(); ++i) {
    int64_t r = static_cast<int64_t>(i) / cols;
    int64_t c = static_cast<int64_t>(i) % cols;
    canvas.slice(1, r * (h + sep), r * (h + sep) + h)
        .slice(2, c * (w + sep), c * (w + sep) + w)
        .copy_(images[i].to(torch::kFloat32));
  }
  write_image_png(path, canvas);
}

}  // namespace dpig
