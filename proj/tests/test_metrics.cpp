#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "nucleiforge/metrics.hpp"
#include "nucleiforge/ops.hpp"
#include "metric_oracles.hpp"
#include "test_util.hpp"

using namespace nf;
using nf::testing::random_binary;
using nf::testing::random_tensor;
using namespace nf::testing;

namespace {

// Builds an H×W map from rows of digits ('.' is 0).
Tensor map_from(std::initializer_list<const char*> rows) {
  const std::size_t h = rows.size(), w = std::string(*rows.begin()).size();
  Tensor t({h, w});
  std::size_t y = 0;
  for (const char* r : rows) {
    for (std::size_t x = 0; x < w; ++x) t.mutable_data()[y * w + x] = r[x] == '.' ? 0.0 : r[x] - '0';
    ++y;
  }
  return t;
}

}  // namespace

TEST_CASE("dice and miou examples") {
  const Tensor a = map_from({"11..", "11..", "....", "...."});
  const Tensor b = map_from({".11.", ".11.", "....", "...."});
  const Tensor far = map_from({"....", "....", "..11", "..11"});
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, far) == 0.0);
  CHECK(dice(a, b) == 0.5);
  CHECK(dice(Tensor({4, 4}), Tensor({4, 4})) == 1.0);

  CHECK(miou(a, a) == 1.0);
  const Tensor half = map_from({"1100", "1100"});
  const Tensor other = map_from({"0011", "0011"});
  CHECK(miou(half, other) == 0.0);

  // gt = columns 0-3; pred = columns 0-2 plus four pixels of column 4.
  Tensor gt({8, 8}), pred({8, 8});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      gt.mutable_data()[y * 8 + x] = x < 4;
      pred.mutable_data()[y * 8 + x] = x < 3 || (x == 4 && y < 4);
    }
  CHECK(miou(pred, gt) == doctest::Approx((24.0 / 36.0 + 28.0 / 40.0) / 2.0).epsilon(1e-15));
  CHECK_THROWS(dice(Tensor({2, 2}), Tensor({2, 3})));
}

TEST_CASE("dice and miou agree with pixel counting on every 3x3 pair") {
  for (unsigned pa = 0; pa < 512; ++pa)
    for (unsigned pb = 0; pb < 512; ++pb) {
      Tensor a({3, 3}), b({3, 3});
      double inter = 0, sa = 0, sb = 0, bg_inter = 0;
      for (unsigned i = 0; i < 9; ++i) {
        const bool x = pa >> i & 1, y = pb >> i & 1;
        a.mutable_data()[i] = x;
        b.mutable_data()[i] = y;
        inter += x && y;
        bg_inter += !x && !y;
        sa += x;
        sb += y;
      }
      const double d = sa + sb == 0 ? 1.0 : 2.0 * inter / (sa + sb);
      const double fg_union = sa + sb - inter, bg_union = (9 - sa) + (9 - sb) - bg_inter;
      const double m = ((fg_union == 0 ? 1.0 : inter / fg_union) + (bg_union == 0 ? 1.0 : bg_inter / bg_union)) / 2.0;
      if (dice(a, b) != d || miou(a, b) != m) {
        FAIL("mismatch at pair " << pa << "," << pb);
      }
    }
}

TEST_CASE("object f1") {
  const Tensor gt = map_from({"11111...", "........", "...22...", "...22..."});
  CHECK(object_f1(gt, gt) == 1.0);
  CHECK(object_f1(Tensor({4, 8}), gt) == 0.0);
  const Tensor pred = map_from({"111.....", "........", "........", "........"});
  CHECK(object_f1(pred, gt) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("hausdorff") {
  const Tensor a = map_from({"1....", ".....", ".....", ".....", "....."});
  const Tensor b = map_from({".....", ".....", ".....", "....1", "....."});
  CHECK(hausdorff(a, b).value() == 5.0);
  CHECK(hausdorff(a, a).value() == 0.0);
  CHECK_FALSE(hausdorff(a, Tensor({5, 5})).has_value());

  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 3 + rng() % 12, w = 3 + rng() % 12;
    const Tensor x = random_binary({h, w}, rng, 0.3), y = random_binary({h, w}, rng, 0.3);
    const auto got = hausdorff(x, y), want = hausdorff_reference(x, y);
    REQUIRE(got.has_value() == want.has_value());
    if (got) {
      CHECK(*got == *want);
      CHECK(*got == *hausdorff(y, x));
      CHECK(*hausdorff(x, x) == 0.0);
    }
  }
}

TEST_CASE("aji and panoptic examples") {
  const Tensor gt = map_from({"111.22", "111.22", "......", "333...", "333...", "......"});
  CHECK(aji(gt, gt) == 1.0);
  CHECK(aji(Tensor({6, 6}), gt) == 0.0);
  CHECK(aji(Tensor({6, 6}), Tensor({6, 6})) == 1.0);

  const auto same = panoptic(gt, gt);
  CHECK(same.dq == 1.0);
  CHECK(same.sq == 1.0);
  CHECK(same.pq == 1.0);

  const Tensor elsewhere = map_from({"......", "......", "....11", "......", "......", "....22"});
  const auto none = panoptic(elsewhere, gt);
  CHECK(none.dq == 0.0);
  CHECK(none.sq == 0.0);
  CHECK(none.pq == 0.0);

  // One TP at IoU 4/5 and one FP.
  const Tensor g1 = map_from({"11111", ".....", "....."});
  const Tensor p1 = map_from({"1111.", ".....", "..2.."});
  const auto r = panoptic(p1, g1);
  CHECK(r.dq == doctest::Approx(1.0 / 1.5).epsilon(1e-15));
  CHECK(r.sq == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(r.pq == doctest::Approx(0.8 / 1.5).epsilon(1e-15));

  // 6x6 with two gt and two pred instances.
  const Tensor g6 = map_from({"111...", "111...", "111...", "...222", "...222", "......"});
  const Tensor p6 = map_from({"11....", "11....", "1111..", "..1122", "....22", "......"});
  CHECK(aji(p6, g6) == aji_reference(p6, g6));
}

TEST_CASE("aji and panoptic match brute force on random maps") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 2 + rng() % 7, w = 2 + rng() % 7;
    const int k = 1 + static_cast<int>(rng() % 5);
    const Tensor gt = random_instances(h, w, k, rng), pred = random_instances(h, w, k, rng);
    CHECK(std::abs(aji(pred, gt) - aji_reference(pred, gt)) < 1e-12);
    const auto got = panoptic(pred, gt), want = panoptic_reference(pred, gt);
    CHECK(std::abs(got.dq - want.dq) < 1e-12);
    CHECK(std::abs(got.sq - want.sq) < 1e-12);
    CHECK(std::abs(got.pq - want.pq) < 1e-12);
    CHECK(got.pq == got.dq * got.sq);
    for (double v : {got.dq, got.sq, got.pq, aji(pred, gt)}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("connected components and instance extraction") {
  const Tensor blobs = map_from({"11......", "11......", "........", "....1...", ".....1..", "......11", "........",
                                 "........"});
  const Tensor labels = label_components(blobs);
  CHECK(labels[0] == 1.0);
  CHECK(labels[4 * 8 + 5] == 2.0);
  CHECK(*std::max_element(labels.data().begin(), labels.data().end()) == 2.0);

  const Tensor zero = extract_instances(Tensor({8, 8}));
  for (double v : zero.data()) CHECK(v == 0.0);

  const Tensor prob = map_from({"11....1.", "11......", "........", "....1...", ".....1..", "......11", "........",
                                "........"});
  const Tensor inst = extract_instances(scale(prob, 0.9));
  CHECK(inst[0] == 1.0);
  CHECK(inst[6] == 0.0);  // single pixel dropped
  CHECK(inst[3 * 8 + 4] == 2.0);

  const Tensor none = extract_instances(Tensor({8, 8}, 1.0), 1.0 + 1e-9);
  for (double v : none.data()) CHECK(v == 0.0);
}

TEST_CASE("identity and erosion properties") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor m = random_binary({10, 10}, rng, 0.6);
    CHECK(dice(m, m) == 1.0);
    CHECK(miou(m, m) == 1.0);
    if (auto h = hausdorff(m, m)) CHECK(*h == 0.0);

    Tensor current = m;
    double last = dice(current, m);
    for (int step = 0; step < 4; ++step) {
      Tensor eroded = current;
      for (const auto& [y, x] : boundary_pixels(current)) eroded.mutable_data()[y * 10 + x] = 0.0;
      const double d = dice(eroded, m);
      CHECK(d <= last);
      last = d;
      current = eroded;
    }
  }
}

TEST_CASE("reports") {
  std::mt19937_64 rng(41);
  std::vector<ImageReport> reports;
  for (int i = 0; i < 5; ++i) {
    const Tensor gt = random_binary({1, 12, 12}, rng, 0.4);
    const Tensor prob = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
    reports.push_back(score_prediction("img" + std::to_string(i), prob, gt, label_components(gt)));
  }
  reports.push_back(score_prediction("empty", Tensor({1, 12, 12}), Tensor({1, 12, 12}), Tensor({1, 12, 12})));
  CHECK_FALSE(reports.back().semantic.hd_defined);
  for (const auto& r : reports) CHECK(r.instance.pq == r.instance.dq * r.instance.sq);

  const auto s = summarize(reports);
  CHECK(s.dsc.count == 6);
  CHECK(s.hd.count == 5);

  std::ostringstream csv;
  write_report_csv(csv, reports);
  std::istringstream in(csv.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == reports.size() + 2);
  CHECK(lines.front() == "image,dsc,miou,f1,hd,aji,dq,sq,pq");
  CHECK(lines[6].find("undefined") != std::string::npos);
  CHECK(lines.back().rfind("mean±std", 0) == 0);

  std::ostringstream jsonl;
  write_report_jsonl(jsonl, reports);
  const std::string text = jsonl.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(reports.size() + 1));
}
