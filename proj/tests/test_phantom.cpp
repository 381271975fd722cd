#include <doctest.h>

#include <filesystem>
#include <set>

#include "ds3/phantom.hpp"

using namespace ds3;

namespace {

bool subset_of(const Mask& a, const Mask& b) { return ((a != 0) && (b == 0)).count() == 0; }

double region_mean(const Image& img, const Mask& m) {
  return (img * (m != 0).cast<float>()).sum() / std::max<double>(1, (m != 0).count());
}

}  // namespace

TEST_CASE("phantom generation is deterministic and seed-sensitive") {
  CHECK(generate_phantom(7, 64) == generate_phantom(7, 64));
  CHECK_FALSE(generate_phantom(7, 64) == generate_phantom(8, 64));
  CHECK_THROWS_AS(generate_phantom(1, 8), std::invalid_argument);
}

TEST_CASE("region nesting and brain coverage") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = generate_phantom(seed, 64);
    const Mask brain = brain_mask(p), tumor = tumor_mask(p), core = core_mask(p);
    CHECK(subset_of(core, tumor));
    CHECK(subset_of(tumor, brain));
    const double coverage = static_cast<double>((brain != 0).count()) / brain.size();
    CHECK(coverage >= 0.30);
    CHECK(coverage <= 0.80);
    CHECK((tumor != 0).count() > 0);
  }
}

TEST_CASE("rendering: range, background, mask, determinism") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = generate_phantom(seed, 48);
    const auto s = render_modalities(p);
    const auto again = render_modalities(p);
    const Mask brain = brain_mask(p);
    REQUIRE(s.target.has_value());
    for (int c = 0; c < kNumSources; ++c) {
      CHECK(s.sources[c].rows() == 48);
      CHECK((s.sources[c] == again.sources[c]).all());
      CHECK(s.sources[c].minCoeff() >= 0.0f);
      CHECK(s.sources[c].maxCoeff() <= 1.0f);
      CHECK(((brain == 0).cast<float>() * s.sources[c].abs()).maxCoeff() == 0.0f);
    }
    CHECK((*s.target == *again.target).all());
    CHECK(((brain == 0).cast<float>() * s.target->abs()).maxCoeff() == 0.0f);
    // foreground <=> any source > 0
    Mask any = Mask::Zero(48, 48);
    for (const auto& src : s.sources) any = (any != 0 || src > 0.0f).cast<std::uint8_t>();
    CHECK((any == s.foreground_mask).all());
  }
}

TEST_CASE("target is brighter than every source over the core") {
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 20 && seed < 500; ++seed) {
    const auto p = generate_phantom(seed, 64);
    const Mask core = core_mask(p);
    if ((core != 0).count() == 0) continue;
    const auto s = render_modalities(p);
    const double t = region_mean(*s.target, core);
    for (const auto& src : s.sources) CHECK(t > region_mean(src, core));
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("split arithmetic") {
  const auto c = split_counts(40, 0.05);
  CHECK(c.train == 28);
  CHECK(c.val == 4);
  CHECK(c.test == 8);
  CHECK(c.paired == 2);
  CHECK(split_counts(40, 1.0).paired == 28);
  CHECK_THROWS(build_split(40, 2, 0.0, 1, 32));
  CHECK_THROWS(build_split(40, 2, 1.5, 1, 32));
}

TEST_CASE("split: disjoint patients, targets only on paired, balanced cores") {
  const auto split = build_split(40, 8, 0.05, 3, 32);
  std::set<int> seen[4];
  const std::vector<MultimodalSample>* subsets[] = {&split.paired, &split.unpaired, &split.val, &split.test};
  for (int k = 0; k < 4; ++k)
    for (const auto& s : *subsets[k]) seen[k].insert(s.patient_id);
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b)
      for (int id : seen[a]) CHECK(seen[b].count(id) == 0);
  CHECK(seen[0].size() == 2);
  CHECK(seen[1].size() == 26);
  CHECK(split.unpaired.size() > split.paired.size());
  for (const auto& s : split.paired) CHECK(s.target.has_value());
  for (const auto& s : split.unpaired) CHECK_FALSE(s.target.has_value());
  for (const auto& s : split.val) CHECK(s.target.has_value());
  for (const auto& s : split.test) CHECK(s.target.has_value());

  int with = 0, without = 0;
  for (const auto* sub : {&split.paired, &split.unpaired})
    for (const auto& s : *sub) (s.has_core ? with : without)++;
  CHECK(with == without);

  const auto full = build_split(40, 2, 1.0, 3, 32);
  CHECK(full.unpaired.empty());
  CHECK(split_hash(build_split(40, 8, 0.05, 3, 32)) == split_hash(split));
}

TEST_CASE("split export round-trips bit-exactly") {
  const auto split = build_split(10, 2, 0.5, 11, 24);
  const auto dir = std::filesystem::temp_directory_path() / "ds3_split_roundtrip";
  std::filesystem::remove_all(dir);
  save_split(dir, split);
  const auto back = load_split(dir);
  CHECK(split_hash(back) == split_hash(split));
  REQUIRE(back.paired.size() == split.paired.size());
  for (std::size_t i = 0; i < split.paired.size(); ++i) {
    const auto &a = split.paired[i], &b = back.paired[i];
    for (int c = 0; c < kNumSources; ++c) CHECK((a.sources[c] == b.sources[c]).all());
    CHECK((*a.target == *b.target).all());
    CHECK((a.foreground_mask == b.foreground_mask).all());
    CHECK(a.has_core == b.has_core);
  }
  for (const auto& s : back.unpaired) CHECK_FALSE(s.target.has_value());
  std::filesystem::remove_all(dir);
}
