#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ds3/image.hpp"

namespace ds3 {

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Effective window for an image: the configured size, shrunk to the largest odd
/// size that fits when the image is smaller.
int ssim_window_size(Eigen::Index rows, Eigen::Index cols, const SsimOptions& opt = {});

/// Normalized 1-D Gaussian taps of the given odd size.
Eigen::ArrayXd gaussian_window(int size, double sigma);

namespace detail {

// 'valid' separable filtering: out(i,j) = sum_{u,v} g(u) g(v) in(i+u, j+v).
inline ImageD filter_valid(const ImageD& in, const Eigen::ArrayXd& g) {
  const Eigen::Index k = g.size();
  const Eigen::Index rows = in.rows() - k + 1, cols = in.cols() - k + 1;
  ImageD horiz(in.rows(), cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    horiz.col(j).setZero();
    for (Eigen::Index v = 0; v < k; ++v) horiz.col(j) += g(v) * in.col(j + v);
  }
  ImageD out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    out.row(i).setZero();
    for (Eigen::Index u = 0; u < k; ++u) out.row(i) += g(u) * horiz.row(i + u);
  }
  return out;
}

}  // namespace detail

/// Per-window SSIM over all 'valid' Gaussian windows; entry (i, j) belongs to the
/// window whose top-left pixel is (i, j).
template <typename DerivedA, typename DerivedB>
ImageD ssim_map(const Eigen::ArrayBase<DerivedA>& a, const Eigen::ArrayBase<DerivedB>& b, const SsimOptions& opt = {}) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("ssim: shape mismatch");
  const ImageD x = a.template cast<double>();
  const ImageD y = b.template cast<double>();
  const auto g = gaussian_window(ssim_window_size(x.rows(), x.cols(), opt), opt.sigma);
  const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2);
  const double c2 = std::pow(opt.k2 * opt.dynamic_range, 2);

  const ImageD mx = detail::filter_valid(x, g);
  const ImageD my = detail::filter_valid(y, g);
  const ImageD sxx = detail::filter_valid(x * x, g) - mx * mx;
  const ImageD syy = detail::filter_valid(y * y, g) - my * my;
  const ImageD sxy = detail::filter_valid(x * y, g) - mx * my;
  return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
}

/// Mean SSIM over all 'valid' Gaussian windows.
template <typename DerivedA, typename DerivedB>
double ssim(const Eigen::ArrayBase<DerivedA>& a, const Eigen::ArrayBase<DerivedB>& b, const SsimOptions& opt = {}) {
  return ssim_map(a, b, opt).mean();
}

/// Mean SSIM over windows whose centre pixel is foreground (falls back to all
/// windows when none is).
double ssim_foreground(const Image& a, const Image& b, const Mask& mask, const SsimOptions& opt = {});

/// MSE over foreground pixels only.
double mse_foreground(const Image& a, const Image& b, const Mask& mask);

template <typename DerivedA, typename DerivedB>
double mse(const Eigen::ArrayBase<DerivedA>& a, const Eigen::ArrayBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("mse: shape mismatch");
  return (a.template cast<double>() - b.template cast<double>()).square().mean();
}

struct Psnr {
  double db = 0.0;
  bool identical = false;  // mse == 0; db is left at 0
};

inline Psnr psnr_from_mse(double mse_value, double dynamic_range = 1.0) {
  if (mse_value == 0.0) return {0.0, true};
  return {10.0 * std::log10(dynamic_range * dynamic_range / mse_value), false};
}

template <typename DerivedA, typename DerivedB>
Psnr psnr(const Eigen::ArrayBase<DerivedA>& a, const Eigen::ArrayBase<DerivedB>& b, double dynamic_range = 1.0) {
  return psnr_from_mse(mse(a, b), dynamic_range);
}

/// 8-bit grayscale image with the scale that produced it.
struct GrayImage {
  ImageT<std::uint8_t> pixels;
  double scale = 255.0;
};

/// round(|y - y_hat| * scale), clipped to [0, 255].
GrayImage error_map(const Image& y, const Image& y_hat, double scale = 255.0);

/// round(values * scale), clipped to [0, 255].
GrayImage to_gray(const Image& values, double scale);

/// Binary PGM (P5). The scale is stored in a comment line and restored on read.
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

/// pixels / scale
Image from_gray(const GrayImage& img);

struct SampleMetrics {
  int patient_id = 0;
  int slice_id = 0;
  double ssim = 0;
  double psnr = 0;
  bool psnr_identical = false;
  double mse = 0;
};

struct MetricReport {
  std::vector<SampleMetrics> samples;
  double mean_ssim = 0, mean_psnr = 0, mean_mse = 0;
  int n_identical = 0;  // samples excluded from mean_psnr
  std::string config_hash;
  std::string checkpoint_id;
  std::string split_name;

  void aggregate();
};

/// Per-sample CSV: patient_id,slice_id,ssim,psnr,psnr_identical,mse
void write_report_csv(const std::filesystem::path& path, const MetricReport& r);

}  // namespace ds3
