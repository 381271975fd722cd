#include <doctest.h>

#include <cmath>
#include <random>

#include "ds3/losses.hpp"
#include "oracles.hpp"

using namespace ds3;

namespace {

std::vector<std::vector<double>> rows(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  std::vector<std::vector<double>> out(c.size(0), std::vector<double>(c.size(1)));
  for (int64_t i = 0; i < c.size(0); ++i)
    for (int64_t j = 0; j < c.size(1); ++j) out[i][j] = c[i][j].item<double>();
  return out;
}

}  // namespace

TEST_CASE("pixelwise difficulty L1") {
  torch::manual_seed(0);
  auto y = torch::rand({2, 1, 8, 8}), y_hat = torch::rand({2, 1, 8, 8});
  CHECK(pixelwise_difficulty_l1(torch::ones({2, 1, 8, 8}), y, y_hat).item<double>() ==
        doctest::Approx((y - y_hat).abs().mean().item<double>()).epsilon(1e-7));
  CHECK(pixelwise_difficulty_l1(torch::rand({2, 1, 8, 8}), y, y).item<double>() == 0.0);

  auto map = torch::tensor({1.0, 0.2, 0.5, 2.0}, torch::kDouble).view({1, 1, 2, 2});
  auto a = torch::tensor({0.1, 0.1, 0.2, 0.0}, torch::kDouble).view({1, 1, 2, 2});
  auto zero = torch::zeros({1, 1, 2, 2}, torch::kDouble);
  CHECK(pixelwise_difficulty_l1(map, a, zero).item<double>() == doctest::Approx(0.055).epsilon(1e-12));

  // monotone in the map at a pixel with nonzero residual
  auto bumped = map.clone();
  bumped[0][0][0][0] = 1.5;
  CHECK(pixelwise_difficulty_l1(bumped, a, zero).item<double>() > pixelwise_difficulty_l1(map, a, zero).item<double>());
  CHECK_THROWS(pixelwise_difficulty_l1(torch::ones({1, 1, 3, 3}), a, zero));
}

TEST_CASE("InfoNCE closed forms") {
  // single negative, equal logits: ln 2
  auto z = torch::tensor({1.0, 0.0}, torch::kDouble).view({1, 1, 2}).repeat({1, 2, 1});
  auto w = torch::ones({1, 2}, torch::kDouble);
  CHECK(weighted_infonce(z, z, w, 0.07).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // n negatives, equal logits: ln(n + 1)
  auto z5 = torch::tensor({0.6, 0.8}, torch::kDouble).view({1, 1, 2}).repeat({1, 5, 1});
  CHECK(weighted_infonce(z5, z5, torch::ones({1, 5}, torch::kDouble), 0.07).item<double>() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));
  // zero weights
  torch::manual_seed(1);
  auto a = torch::nn::functional::normalize(torch::randn({2, 4, 8}, torch::kDouble),
                                            torch::nn::functional::NormalizeFuncOptions().dim(2));
  CHECK(weighted_infonce(a, a.flip(1), torch::zeros({2, 4}, torch::kDouble), 0.07).item<double>() == 0.0);
  CHECK_THROWS(weighted_infonce(a.narrow(1, 0, 1), a.narrow(1, 0, 1), torch::ones({2, 1}), 0.07));
}

TEST_CASE("InfoNCE matches brute-force enumeration") {
  torch::manual_seed(2);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const int S = 3 + trial % 5;
    auto z = torch::nn::functional::normalize(torch::randn({1, S, 16}, torch::kDouble),
                                              torch::nn::functional::NormalizeFuncOptions().dim(2));
    auto zp = torch::nn::functional::normalize(torch::randn({1, S, 16}, torch::kDouble),
                                               torch::nn::functional::NormalizeFuncOptions().dim(2));
    auto w = torch::rand({1, S}, torch::kDouble) * 2;
    std::vector<double> wv(S);
    for (int s = 0; s < S; ++s) wv[s] = w[0][s].item<double>();
    const double expected = oracle::infonce_brute(rows(z[0]), rows(zp[0]), wv, 0.07);
    CHECK(weighted_infonce(z, zp, w, 0.07).item<double>() == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("patch InfoNCE over taps matches the oracle on a 4x4 grid") {
  torch::manual_seed(3);
  GeneratorSpec spec;
  spec.tap_indices = {2};
  spec.base_width = 4;
  ProjectionHeads heads(spec, 8);
  heads->to(torch::kDouble);
  const int C = 3 * spec.width_at(2);
  FeatureTapSet anchors, positives;
  anchors.taps[2] = torch::randn({2, C, 4, 4}, torch::kDouble);
  positives.taps[2] = torch::randn({2, C, 4, 4}, torch::kDouble);
  DifficultyMap map;
  map.full = torch::rand({2, 1, 16, 16}, torch::kDouble) * 2;
  build_pyramid(map, {{2, {4, 4}}});

  std::vector<GridPoint> pts{{0, 0}, {1, 3}, {3, 2}};
  auto got = patch_difficulty_infonce(anchors, positives, heads, {{2, pts}}, map, 0.07).item<double>();

  double expected = 0;
  for (int b = 0; b < 2; ++b) {
    std::vector<std::vector<double>> z, zp;
    std::vector<double> w;
    for (auto p : pts) {
      auto fa = anchors.taps[2].index({b, torch::indexing::Slice(), p.row, p.col}).unsqueeze(0);
      auto fp = positives.taps[2].index({b, torch::indexing::Slice(), p.row, p.col}).unsqueeze(0);
      z.push_back(rows(heads->embed(2, fa))[0]);
      zp.push_back(rows(heads->embed(2, fp))[0]);
      w.push_back(map.level(2)[b][0][p.row][p.col].item<double>());
    }
    expected += oracle::infonce_brute(z, zp, w, 0.07) / 2;
  }
  CHECK(got == doctest::Approx(expected).epsilon(1e-9));

  // zero pyramid -> zero loss
  DifficultyMap zero;
  zero.full = torch::zeros({2, 1, 16, 16}, torch::kDouble);
  build_pyramid(zero, {{2, {4, 4}}});
  CHECK(patch_difficulty_infonce(anchors, positives, heads, {{2, pts}}, zero, 0.07).item<double>() == 0.0);
}

TEST_CASE("location sampling") {
  auto gen = at::detail::createCPUGenerator(9);
  auto pts = sample_locations(4, 4, 16, gen);
  std::set<std::pair<int64_t, int64_t>> uniq;
  for (auto p : pts) {
    CHECK(p.row < 4);
    CHECK(p.col < 4);
    uniq.insert({p.row, p.col});
  }
  CHECK(uniq.size() == 16u);
  CHECK_THROWS(sample_locations(4, 4, 17, gen));
  auto g1 = at::detail::createCPUGenerator(5), g2 = at::detail::createCPUGenerator(5);
  CHECK((sample_locations(8, 8, 10, g1) == sample_locations(8, 8, 10, g2)));
  CHECK_THROWS(PatchSamplingPlan{1, 0}.validate());
}

TEST_CASE("LSGAN closed forms") {
  CHECK(lsgan_d(torch::ones({1, 1, 4, 4}), torch::zeros({1, 1, 4, 4})).item<double>() == 0.0);
  CHECK(lsgan_g(torch::ones({1, 1, 4, 4})).item<double>() == 0.0);
  auto half = torch::full({1, 1, 4, 4}, 0.5, torch::kDouble);
  CHECK(lsgan_d(half, half).item<double>() == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(lsgan_g(half).item<double>() == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("image and feature distillation") {
  torch::manual_seed(4);
  auto t = torch::rand({1, 1, 8, 8}, torch::kDouble);
  auto ones = torch::ones({1, 1, 8, 8}, torch::kDouble);
  CHECK(image_distill(ones, t, t).item<double>() == 0.0);
  CHECK(image_distill(ones, t, t + 0.1).item<double>() == doctest::Approx(0.1).epsilon(1e-9));
  auto s = torch::rand({1, 1, 8, 8}, torch::kDouble);
  auto m = torch::rand({1, 1, 8, 8}, torch::kDouble);
  CHECK(image_distill(2 * m, t, s).item<double>() ==
        doctest::Approx(2 * image_distill(m, t, s).item<double>()).epsilon(1e-12));

  FeatureTapSet ft, fs;
  ft.taps[4] = torch::randn({1, 6, 4, 4}, torch::kDouble);
  fs.taps[4] = torch::randn({1, 6, 4, 4}, torch::kDouble);
  DifficultyMap map;
  map.full = torch::rand({1, 1, 16, 16}, torch::kDouble);
  build_pyramid(map, {{4, {4, 4}}});
  CHECK(feature_distill(map, ft, ft, {4}).item<double>() == 0.0);
  const double single = (map.level(4) * (ft.taps[4] - fs.taps[4]).abs()).mean().item<double>();
  CHECK(feature_distill(map, ft, fs, {4}).item<double>() == doctest::Approx(single).epsilon(1e-12));
  CHECK(feature_distill(map, ft, fs, {4, 4}).item<double>() == doctest::Approx(single).epsilon(1e-12));
  try {
    feature_distill(map, ft, fs, {4, 21});
    FAIL("expected throw");
  } catch (const std::out_of_range& e) {
    CHECK(std::string(e.what()).find("21") != std::string::npos);
  }
  // teacher side is detached
  auto tf = ft.taps[4].clone().requires_grad_(true);
  FeatureTapSet ftg;
  ftg.taps[4] = tf;
  auto sf = fs.taps[4].clone().requires_grad_(true);
  FeatureTapSet fsg;
  fsg.taps[4] = sf;
  feature_distill(map, ftg, fsg, {4}).backward();
  CHECK_FALSE(tf.grad().defined());
  CHECK(sf.grad().defined());
}

TEST_CASE("totals and schedule") {
  LossWeights w;
  CHECK(teacher_total(0.01, 0.5, 0.3, w) == doctest::Approx(1.8).epsilon(1e-12));
  CHECK(teacher_total(0.0, 0.0, 0.0, w) == 0.0);
  LossWeights no_pid = w;
  no_pid.pid = 0;
  CHECK(teacher_total(0.01, 0.5, 0.3, no_pid) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(student_total(0.01, 0.5, 0.3, 0.2, w) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(student_total(0.0, 0.0, 0.0, 0.0, w) == 0.0);
  LossWeights no_id = w;
  no_id.id = 0;
  CHECK(student_total(0.01, 0.5, 0.3, 0.2, no_id) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK(schedule_weight(0, 30) == 1.0);
  CHECK(schedule_weight(15, 30) == 0.5);
  CHECK(schedule_weight(99, 100) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(combined_objective(2.0, 4.0, 0, 10) == 6.0);
  CHECK(combined_objective(2.0, 4.0, 5, 10) == 4.0);
  CHECK_THROWS(schedule_weight(10, 10));
  CHECK_THROWS(schedule_weight(-1, 10));

  LossBundle b;
  b.pid = 0.01;
  b.pad = 0.5;
  b.gan_g = 0.3;
  b.id = 0.02;
  b.fd = 0.4;
  b.pad_s = 0.6;
  b.gan_g_s = 0.7;
  b.schedule_weight = 0.5;
  b.finalize(w);
  CHECK(b.total_teacher == doctest::Approx(1.8));
  CHECK(b.total_student == doctest::Approx(2.0 + 0.4 + 0.6 + 0.7));
  CHECK(b.combined == doctest::Approx(1.8 + 0.5 * 3.7));
  CHECK(b.all_finite());
}
