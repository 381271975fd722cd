#include <doctest.h>

#include <filesystem>
#include <random>

#include "ds3/metrics.hpp"
#include "oracles.hpp"

using namespace ds3;

namespace {

ImageD random_image(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  ImageD img(n, n);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
  return img;
}

}  // namespace

TEST_CASE("SSIM identities") {
  std::mt19937_64 rng(1);
  const ImageD a = random_image(32, rng), b = random_image(32, rng);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  const double c1 = 1e-4, c2 = 9e-4;
  CHECK(ssim(ImageD::Zero(32, 32), ImageD::Ones(32, 32)) == doctest::Approx(c1 * c2 / ((1 + c1) * c2)).epsilon(1e-9));
  CHECK_THROWS(ssim(a, ImageD::Zero(8, 8)));
  const Image af = a.cast<float>();
  CHECK(ssim(af, af) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("SSIM matches brute-force windows") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const ImageD a = random_image(8, rng), b = random_image(8, rng);
    CHECK(ssim(a, b) == doctest::Approx(oracle::ssim_brute(a, b, 7)).epsilon(1e-9));
  }
  const ImageD a = random_image(20, rng), b = random_image(20, rng);
  CHECK(ssim(a, b) == doctest::Approx(oracle::ssim_brute(a, b, 11)).epsilon(1e-9));
}

TEST_CASE("MSE and PSNR") {
  const ImageD a = ImageD::Constant(8, 8, 0.3);
  CHECK(mse(a, a) == 0.0);
  CHECK(psnr(a, a).identical);
  const ImageD b = a + 0.1;
  CHECK(mse(a, b) == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(psnr(a, b).db == doctest::Approx(20.0).epsilon(1e-9));
  CHECK_FALSE(psnr(a, b).identical);
  const ImageD c = a + 0.2;
  CHECK(mse(a, c) == doctest::Approx(4 * mse(a, b)).epsilon(1e-9));
  CHECK(mse(a, b) == mse(b, a));
}

TEST_CASE("foreground-only metrics") {
  std::mt19937_64 rng(3);
  const Image a = random_image(16, rng).cast<float>();
  Image b = a;
  Mask m = Mask::Zero(16, 16);
  m.block(4, 4, 8, 8).setOnes();
  b(0, 0) += 0.5f;  // background only
  CHECK(mse_foreground(a, b, m) == 0.0);
  CHECK(mse(a, b) > 0.0);
  CHECK(ssim_foreground(a, a, m) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("error maps and PGM round trip") {
  const Image y = Image::Constant(4, 4, 0.5f);
  CHECK((error_map(y, y).pixels == 0).all());
  Image far = y;
  far(1, 2) = -0.5f;
  CHECK(error_map(y, far).pixels(1, 2) == 255);

  std::mt19937_64 rng(4);
  const Image v = random_image(9, rng).cast<float>();
  const auto g = to_gray(v, 255.0);
  const auto path = std::filesystem::temp_directory_path() / "ds3_pgm_test.pgm";
  write_pgm(path, g);
  const auto back = read_pgm(path);
  CHECK(back.scale == 255.0);
  CHECK((back.pixels == g.pixels).all());
  CHECK(((from_gray(back) - v).abs() <= 0.5f / 255.0f + 1e-6f).all());
  const auto half = to_gray(v, 127.5);
  write_pgm(path, half);
  CHECK(read_pgm(path).scale == 127.5);
  std::filesystem::remove(path);
}

TEST_CASE("report aggregation") {
  MetricReport r;
  r.samples = {{0, 0, 0.5, 20.0, false, 0.01}, {0, 1, 0.7, 0.0, true, 0.0}, {1, 0, 0.9, 30.0, false, 0.001}};
  r.aggregate();
  CHECK(r.mean_ssim == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(r.mean_mse == doctest::Approx(0.011 / 3).epsilon(1e-12));
  CHECK(r.mean_psnr == doctest::Approx(25.0).epsilon(1e-12));
  CHECK(r.n_identical == 1);
}
