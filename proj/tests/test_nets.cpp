#include <doctest.h>

#include <filesystem>

#include "ds3/losses.hpp"
#include "ds3/nets.hpp"

using namespace ds3;

namespace {

NetworkSpec small_spec() {
  NetworkSpec s;
  s.generator.base_width = 8;
  s.discriminator.base_width = 8;
  s.embed_dim = 16;
  return s;
}

Network make_net(std::uint64_t seed, const NetworkSpec& spec = small_spec()) {
  torch::manual_seed(seed);
  Network n(spec);
  init_weights(*n);
  return n;
}

}  // namespace

TEST_CASE("layer table matches the published enumeration") {
  GeneratorSpec g;
  const auto t = layer_table(g);
  REQUIRE(t.size() == 25u);
  CHECK(g.n_layers() == 25);
  CHECK(t[0].name == "enc.stem");
  CHECK(t[0].stride == 1);
  CHECK(t[2].stride == 4);
  CHECK(t[12].section == LayerSection::Fusion);
  CHECK(t[21].section == LayerSection::Decoder);
  CHECK(t[21].stride == 4);
  CHECK(t[24].stride == 1);
  CHECK(t[0].channels == 3 * 16);
  CHECK(t[4].channels == 3 * 32);
  CHECK(t[12].channels == 32);
}

TEST_CASE("spec validation names bad taps") {
  GeneratorSpec g;
  g.tap_indices = {0, 4, 99};
  try {
    g.validate();
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("99") != std::string::npos);
  }
  g.tap_indices = {4, 0};
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("generator: shapes, range, determinism, taps") {
  auto net = make_net(1);
  auto& G = net->generator;
  const auto& spec = net->spec().generator;
  auto x = torch::rand({2, 3, 32, 32});
  auto all = spec.tap_indices;
  all.push_back(21);
  auto a = G->forward(x, all);
  auto b = G->forward(x, all);
  CHECK(a.image.sizes() == torch::IntArrayRef({2, 1, 32, 32}));
  CHECK(torch::equal(a.image, b.image));
  for (int t : all) CHECK(torch::equal(a.taps.at(t), b.taps.at(t)));
  CHECK_NOTHROW(a.taps.check_shapes(32, 32));
  const auto table = layer_table(spec);
  for (int t : all) {
    CHECK(a.taps.at(t).size(1) == table[t].channels);
    CHECK(a.taps.at(t).size(2) == 32 / table[t].stride);
  }
  CHECK_THROWS_AS(a.taps.at(5), std::out_of_range);

  auto z = G->forward(torch::zeros({1, 3, 32, 32})).image;
  CHECK(torch::isfinite(z).all().item<bool>());
  CHECK(z.min().item<float>() >= 0.0f);
  CHECK(z.max().item<float>() <= 1.0f);
  CHECK((z.max() - z.min()).item<float>() < 1e-5f);

  // encode stops early but agrees with the full pass
  auto enc = G->encode(x, spec.tap_indices);
  for (int t : spec.tap_indices) CHECK(torch::allclose(enc.at(t), a.taps.at(t)));
}

TEST_CASE("fusion gates are a softmax across branches") {
  torch::manual_seed(3);
  FusionBlock block(8, 3);
  std::vector<torch::Tensor> f{torch::randn({2, 8, 5, 5}), torch::randn({2, 8, 5, 5}), torch::randn({2, 8, 5, 5})};
  auto r = fuse(block, f);
  CHECK((r.gates.sum(1) - 1).abs().max().item<float>() < 1e-6f);

  std::vector<torch::Tensor> same(3, f[0]);
  CHECK(torch::allclose(fuse(block, same).output, f[0], 1e-5, 1e-6));

  f[1] = f[1] * 0;
  auto z = fuse(block, f);
  CHECK(torch::isfinite(z.output).all().item<bool>());
  CHECK(torch::isfinite(z.gates).all().item<bool>());
}

TEST_CASE("discriminator grid, translation covariance, determinism") {
  auto net = make_net(2);
  auto& D = net->discriminator;
  CHECK(D->spec().stride() == 8);
  CHECK(D->spec().receptive_field() == 38);
  auto x = torch::rand({1, 1, 64, 64});
  auto s = D->forward(x);
  CHECK(s.sizes() == torch::IntArrayRef({1, 1, 8, 8}));
  CHECK(torch::equal(s, D->forward(x)));
  // shift by one stride: interior cells move by one
  auto shifted = torch::roll(x, {8}, {3});
  auto s2 = D->forward(shifted);
  auto interior_a = s.index({0, 0, torch::indexing::Slice(2, 6), torch::indexing::Slice(2, 5)});
  auto interior_b = s2.index({0, 0, torch::indexing::Slice(2, 6), torch::indexing::Slice(3, 6)});
  CHECK(torch::allclose(interior_a, interior_b, 1e-5, 1e-6));
  CHECK_THROWS(D->forward(torch::rand({1, 1, 16, 16})));
}

TEST_CASE("patch embeddings are unit norm and counted per location") {
  auto net = make_net(4);
  const auto& spec = net->spec().generator;
  auto taps = net->generator->encode(torch::rand({2, 3, 32, 32}), spec.tap_indices);
  std::map<int, std::vector<GridPoint>> locs;
  std::size_t total = 0;
  for (int t : spec.tap_indices) {
    locs[t] = {{0, 0}, {1, 2}, {3, 3}};
    total += 3;
  }
  auto e = extract_patch_embeddings(taps, net->heads, locs);
  auto e2 = extract_patch_embeddings(taps, net->heads, locs);
  std::size_t counted = 0;
  for (auto& [t, emb] : e) {
    CHECK(emb.size(2) == 16);
    CHECK((emb.norm(2, 2) - 1).abs().max().item<float>() < 1e-5f);
    CHECK(torch::equal(emb, e2.at(t)));
    counted += emb.size(1);
  }
  CHECK(counted == total);
  locs[spec.tap_indices.back()] = {{100, 0}};
  CHECK_THROWS(extract_patch_embeddings(taps, net->heads, locs));
}

TEST_CASE("copy_weights gives bitwise-equal student; checkpoints round-trip") {
  auto teacher = make_net(5);
  auto student = make_net(6);
  CHECK(parameter_hash(*teacher) != parameter_hash(*student));
  copy_weights(*teacher, *student);
  CHECK(parameter_hash(*teacher) == parameter_hash(*student));
  auto x = torch::rand({1, 3, 32, 32});
  CHECK(torch::equal(teacher->generator->forward(x).image, student->generator->forward(x).image));
  CHECK(teacher->parameters().size() == student->parameters().size());

  const auto path = std::filesystem::temp_directory_path() / "ds3_ckpt_test.ckpt";
  save_checkpoint(path, teacher);
  auto back = load_checkpoint(path);
  CHECK(back->spec() == teacher->spec());
  CHECK(parameter_hash(*back) == parameter_hash(*teacher));
  std::filesystem::remove(path);

  auto snap = snapshot(*student);
  for (auto& p : student->parameters()) {
    torch::NoGradGuard g;
    p.add_(1.0);
  }
  CHECK(parameter_hash(*student) != parameter_hash(*teacher));
  restore(*student, snap);
  CHECK(parameter_hash(*student) == parameter_hash(*teacher));
}
