#include "ds3/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ds3 {

int ssim_window_size(Eigen::Index rows, Eigen::Index cols, const SsimOptions& opt) {
  int w = static_cast<int>(std::min<Eigen::Index>({static_cast<Eigen::Index>(opt.window), rows, cols}));
  if (w % 2 == 0) --w;
  if (w < 1) throw std::invalid_argument("ssim: empty image");
  return w;
}

Eigen::ArrayXd gaussian_window(int size, double sigma) {
  Eigen::ArrayXd g(size);
  const double c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) g(i) = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  return g / g.sum();
}

double ssim_foreground(const Image& a, const Image& b, const Mask& mask, const SsimOptions& opt) {
  const ImageD map = ssim_map(a, b, opt);
  const int half = ssim_window_size(a.rows(), a.cols(), opt) / 2;
  double sum = 0;
  long count = 0;
  for (Eigen::Index i = 0; i < map.rows(); ++i)
    for (Eigen::Index j = 0; j < map.cols(); ++j)
      if (mask(i + half, j + half)) {
        sum += map(i, j);
        ++count;
      }
  return count ? sum / count : map.mean();
}

double mse_foreground(const Image& a, const Image& b, const Mask& mask) {
  if (a.rows() != mask.rows() || a.cols() != mask.cols()) throw std::invalid_argument("mse: mask shape mismatch");
  const auto fg = (mask != 0).cast<double>();
  const double n = fg.sum();
  if (n == 0) return mse(a, b);
  return ((a.cast<double>() - b.cast<double>()).square() * fg).sum() / n;
}

GrayImage to_gray(const Image& values, double scale) {
  GrayImage out;
  out.scale = scale;
  out.pixels.resize(values.rows(), values.cols());
  for (Eigen::Index i = 0; i < values.rows(); ++i)
    for (Eigen::Index j = 0; j < values.cols(); ++j)
      out.pixels(i, j) = static_cast<std::uint8_t>(std::clamp(std::lround(values(i, j) * scale), 0L, 255L));
  return out;
}

GrayImage error_map(const Image& y, const Image& y_hat, double scale) {
  if (y.rows() != y_hat.rows() || y.cols() != y_hat.cols()) throw std::invalid_argument("error_map: shape mismatch");
  return to_gray((y - y_hat).abs(), scale);
}

Image from_gray(const GrayImage& img) { return img.pixels.cast<float>() / static_cast<float>(img.scale); }

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path.string());
  char scale[64];
  std::snprintf(scale, sizeof(scale), "%.17g", img.scale);
  os << "P5\n# scale " << scale << "\n" << img.pixels.cols() << " " << img.pixels.rows() << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: not a binary PGM: " + path.string());
  GrayImage img;
  int fields[3];
  int n = 0;
  while (n < 3) {
    is >> std::ws;
    if (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      std::istringstream ls(line);
      std::string hash, key;
      ls >> hash >> key;
      if (key == "scale") ls >> img.scale;
      continue;
    }
    is >> fields[n++];
  }
  is.get();
  if (fields[2] != 255) throw std::runtime_error("read_pgm: only 8-bit PGM supported");
  img.pixels.resize(fields[1], fields[0]);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw std::runtime_error("read_pgm: truncated " + path.string());
  return img;
}

void MetricReport::aggregate() {
  mean_ssim = mean_psnr = mean_mse = 0;
  n_identical = 0;
  if (samples.empty()) return;
  int finite = 0;
  for (const auto& s : samples) {
    mean_ssim += s.ssim;
    mean_mse += s.mse;
    if (s.psnr_identical) {
      ++n_identical;
    } else {
      mean_psnr += s.psnr;
      ++finite;
    }
  }
  mean_ssim /= samples.size();
  mean_mse /= samples.size();
  mean_psnr = finite ? mean_psnr / finite : 0.0;
}

void write_report_csv(const std::filesystem::path& path, const MetricReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_report_csv: cannot open " + path.string());
  os << "patient_id,slice_id,ssim,psnr,psnr_identical,mse\n";
  char buf[256];
  for (const auto& s : r.samples) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%d,%.9g\n", s.patient_id, s.slice_id, s.ssim, s.psnr,
                  s.psnr_identical ? 1 : 0, s.mse);
    os << buf;
  }
}

}  // namespace ds3
