#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>

#include "doctest.h"
#include "nucleiforge/synth_data.hpp"

using namespace nf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("nf_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void check_consistent(const DomainSample& s) {
  const std::size_t n = s.mask.size();
  int max_label = 0;
  std::set<int> seen;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = static_cast<int>(s.instances[i]);
    CHECK(s.mask[i] == (l > 0 ? 1.0 : 0.0));
    if (l) seen.insert(l);
    max_label = std::max(max_label, l);
  }
  CHECK(static_cast<int>(seen.size()) == max_label);
}

std::array<double, 3> mean_rgb(const DomainSample& s) {
  const std::size_t plane = s.image.size() / 3;
  std::array<double, 3> m{};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) m[c] += s.image[c * plane + i];
    m[c] /= static_cast<double>(plane);
  }
  return m;
}

}  // namespace

TEST_CASE("generation is deterministic and consistent") {
  for (const auto& name : {"primary", "aux1", "aux2", "aux3", "pretrain"}) {
    const auto spec = preset(name, 32);
    const auto a = generate(spec, 5, 3, 32), b = generate(spec, 5, 3, 32);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a[i].image.bitwise_equal(b[i].image));
      CHECK(a[i].instances.bitwise_equal(b[i].instances));
      CHECK(a[i].image.shape() == Shape{3, 32, 32});
      for (double v : a[i].image.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      check_consistent(a[i]);
      CHECK(a[i].label.domain_id == spec.domain_id);
    }
  }
  CHECK(generate(preset("primary", 32), 1, 0, 32).empty());

  // Sample i depends only on (seed, domain, i).
  const auto few = generate(preset("aux2", 32), 9, 2, 32), more = generate(preset("aux2", 32), 9, 4, 32);
  CHECK(few[1].image.bitwise_equal(more[1].image));
  CHECK_FALSE(few[0].image.bitwise_equal(generate(preset("aux2", 32), 10, 1, 32)[0].image));
}

TEST_CASE("foreground fraction stays within the geometric bound") {
  const std::size_t size = 64;
  for (const auto& name : {"primary", "aux1", "aux2", "aux3"}) {
    const auto spec = preset(name, size);
    const double area = static_cast<double>(size * size);
    const double lo = spec.count_min * std::numbers::pi * spec.radius_min * spec.radius_min / (area * 2.0);
    const double hi = spec.count_max * std::numbers::pi * spec.radius_max * spec.radius_max / area;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto s = generate(spec, seed, 1, size)[0];
      double fg = 0.0;
      for (double v : s.mask.data()) fg += v;
      fg /= area;
      CHECK(fg >= lo);
      CHECK(fg <= hi);
    }
  }
}

TEST_CASE("domain spec validation and placement failure") {
  DomainSpec spec = preset("primary", 32);
  spec.noise_sigma = -1.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = preset("primary", 32);
  spec.foreground[1] = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = preset("primary", 32);
  spec.count_min = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);

  spec = preset("primary", 16);
  spec.count_min = spec.count_max = 60;
  spec.radius_min = spec.radius_max = 6.0;
  spec.max_overlap_iou = 0.0;
  CHECK_THROWS_AS(generate(spec, 1, 1, 16), PlacementError);
  CHECK_THROWS(preset("nonexistent", 32));
}

TEST_CASE("domains are separable by mean colour") {
  const std::size_t size = 32;
  const auto primary = generate(preset("primary", size), 3, 100, size);
  for (const auto& aux_name : {"aux1", "aux2", "aux3"}) {
    const auto aux = generate(preset(aux_name, size), 3, 100, size, false);
    // Logistic probe on mean RGB: fit on the first half, score the second.
    std::array<double, 4> w{};
    auto logit = [&](const std::array<double, 3>& f) { return w[0] * f[0] + w[1] * f[1] + w[2] * f[2] + w[3]; };
    for (int iter = 0; iter < 2000; ++iter) {
      std::array<double, 4> g{};
      for (std::size_t i = 0; i < 50; ++i)
        for (int cls = 0; cls < 2; ++cls) {
          const auto f = mean_rgb(cls ? primary[i] : aux[i]);
          const double err = 1.0 / (1.0 + std::exp(-logit(f))) - cls;
          for (int c = 0; c < 3; ++c) g[c] += err * f[c];
          g[3] += err;
        }
      for (int c = 0; c < 4; ++c) w[c] -= 0.5 * g[c] / 100.0;
    }
    std::size_t correct = 0;
    for (std::size_t i = 50; i < 100; ++i) {
      correct += logit(mean_rgb(primary[i])) > 0.0;
      correct += logit(mean_rgb(aux[i])) <= 0.0;
    }
    CHECK_MESSAGE(correct >= 90, aux_name << " probe accuracy " << correct << "/100");
  }
}

TEST_CASE("netpbm round trip") {
  TempDir dir("pnm");
  const auto s = generate(preset("primary", 16), 4, 1, 16)[0];
  write_ppm(dir.path / "a.ppm", s.image);
  const Tensor back = read_ppm(dir.path / "a.ppm");
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - s.image[i]) <= 0.5 / 255.0 + 1e-12);

  Tensor inst({1, 16, 16});
  inst.mutable_data()[3] = 300.0;
  write_pgm(dir.path / "i.pgm", inst, 65535);
  int maxval = 0;
  const Tensor inst_back = read_pgm(dir.path / "i.pgm", &maxval);
  CHECK(maxval == 65535);
  CHECK(inst_back.bitwise_equal(inst));

  Tensor prob({1, 2, 2}, {0.0, 0.5, 1.0, 0.25});
  write_probability_pgm(dir.path / "p.pgm", prob);
  const Tensor pb = read_pgm(dir.path / "p.pgm", &maxval);
  CHECK(maxval == 255);
  CHECK(std::vector<double>(pb.data().begin(), pb.data().end()) == std::vector<double>{0.0, 128.0, 255.0, 64.0});

  CHECK_THROWS(read_ppm(dir.path / "missing.ppm"));
}

TEST_CASE("load pairs") {
  TempDir dir("pairs");
  CHECK(load_pairs(dir.path).empty());

  Tensor img({3, 8, 8}, 0.5);
  Tensor two({1, 8, 8});
  for (auto [y, x] : {std::pair{0, 0}, {0, 1}, {1, 0}, {1, 1}, {5, 5}, {5, 6}, {6, 6}, {7, 7}})
    two.mutable_data()[y * 8 + x] = 255.0;
  write_ppm(dir.path / "b.ppm", img);
  write_pgm(dir.path / "b_mask.pgm", two, 255);
  write_ppm(dir.path / "a.ppm", img);
  write_pgm(dir.path / "a_mask.pgm", Tensor({1, 8, 8}), 255);

  const auto samples = load_pairs(dir.path);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].id == "a");
  for (double v : samples[0].instances.data()) CHECK(v == 0.0);
  std::set<double> labels(samples[1].instances.data().begin(), samples[1].instances.data().end());
  CHECK(labels == std::set<double>{0.0, 1.0, 2.0});
  CHECK(samples[1].instances[0] == 1.0);
  CHECK(samples[1].instances[7 * 8 + 7] == 2.0);
  check_consistent(samples[1]);

  write_ppm(dir.path / "c.ppm", img);
  CHECK_THROWS(load_pairs(dir.path));
  fs::remove(dir.path / "c.ppm");

  write_ppm(dir.path / "d.ppm", Tensor({3, 6, 6}));
  write_pgm(dir.path / "d_mask.pgm", Tensor({1, 6, 6}), 255);
  CHECK_THROWS(load_pairs(dir.path));
}

TEST_CASE("manifest round trip and splits") {
  TempDir dir("manifest");
  const auto samples = generate(preset("aux1", 16), 2, 3, 16, false);
  auto rows = write_samples(dir.path, "aux1", samples);
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].split = i == 2 ? "test" : "train";
  write_manifest(dir.path / "manifest.tsv", rows);
  const auto read = read_manifest(dir.path / "manifest.tsv");
  REQUIRE(read.size() == 3);
  CHECK(read[0].domain_id == 1);
  CHECK(read[2].split == "test");
  const auto train = load_manifest_split(dir.path / "manifest.tsv", "train", 0);
  REQUIRE(train.count(1));
  CHECK(train.at(1).size() == 2);
  CHECK_FALSE(train.at(1)[0].label.is_primary);
  CHECK(train.at(1)[0].instances.bitwise_equal(samples[0].instances));
  CHECK_THROWS(read_manifest(dir.path / "nope.tsv"));

  std::map<std::string, int> counts;
  for (std::size_t i = 0; i < 20; ++i) ++counts[split_for(i, 20)];
  CHECK(counts["train"] == 14);
  CHECK(counts["val"] == 2);
  CHECK(counts["test"] == 4);
}

TEST_CASE("batch sampler") {
  Datasets data;
  data[0] = generate(preset("primary", 16), 1, 4, 16);
  data[2] = generate(preset("aux2", 16), 1, 4, 16, false);

  BatchSampler sampler(data, 0, 4, 11);
  CHECK(sampler.primary_per_batch() == 2);
  CHECK(sampler.batches_per_epoch() == 2);
  std::set<const DomainSample*> primaries;
  for (int epoch = 0; epoch < 3; ++epoch) {
    primaries.clear();
    const auto batches = sampler.next_epoch();
    CHECK(batches.size() == 2);
    for (const auto& b : batches) {
      CHECK(b.size() == 4);
      std::size_t p = 0;
      for (const auto* s : b) {
        CHECK(s->label.is_primary == (s->label.domain_id == 0));
        if (s->label.is_primary) {
          ++p;
          primaries.insert(s);
        }
      }
      CHECK(p >= 1);
      CHECK(p < b.size());
    }
    CHECK(primaries.size() == 4);  // without replacement
  }

  BatchSampler again(data, 0, 4, 11);
  auto first = again.next_epoch(), reference = BatchSampler(data, 0, 4, 11).next_epoch();
  CHECK(first == reference);

  Datasets single{{0, data[0]}};
  BatchSampler solo(single, 0, 3, 1);
  for (const auto& b : solo.next_epoch())
    for (const auto* s : b) CHECK(s->label.is_primary);

  CHECK_THROWS(BatchSampler(Datasets{{2, data[2]}}, 0, 4, 1));
  CHECK_THROWS(BatchSampler(data, 0, 1, 1));
}
