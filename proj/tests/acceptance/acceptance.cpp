// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metric_oracles.hpp"
#include "nucleiforge/checkpoint.hpp"
#include "nucleiforge/domain_align.hpp"
#include "nucleiforge/gradcheck_suites.hpp"
#include "nucleiforge/hr_decoder.hpp"
#include "nucleiforge/ops.hpp"
#include "nucleiforge/tape.hpp"
#include "nucleiforge/train.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace nf;
using nf::testing::random_binary;
using nf::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::vector<DomainLabel> random_labels(std::size_t n, std::mt19937_64& rng) {
  std::vector<DomainLabel> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const int id = static_cast<int>(rng() % 4);
    labels.push_back({id, id == 0});
  }
  // Every batch mixes both kinds of rows.
  labels[0] = {0, true};
  labels[n - 1] = {1 + static_cast<int>(rng() % 3), false};
  return labels;
}

// dL/dX for the adversarial loss, with X passed through the reversal layer
// of `mode`, or through a plain identity when `mode` is None.
Tensor feature_grad(const Tensor& x, const Discriminator& disc, const std::vector<DomainLabel>& labels,
                    double lambda, const DomainWeights& w, AlignMode mode) {
  const Tensor leaf = Tensor(x).set_requires_grad(true);
  Tape tape;
  GradStore grads;
  {
    TapeScope scope(tape);
    Tensor loss;
    if (mode == AlignMode::None) {
      const std::size_t n = labels.size();
      Tensor target({n, 1}), weights({n, 1});
      for (std::size_t i = 0; i < n; ++i) {
        target.mutable_data()[i] = labels[i].is_primary ? 1.0 : 0.0;
        weights.mutable_data()[i] = labels[i].is_primary ? w.w_main : w.w_aux;
      }
      loss = bce(disc(leaf), target, weights);
    } else {
      loss = cgrl_loss({leaf, labels, lambda, w, mode}, disc);
    }
    grads = tape.backward(loss);
  }
  const auto g = grads.grad(leaf);
  if (!g) throw std::logic_error("no gradient reached the features");
  return *g;
}

Outcome criterion1() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  bool primary_zero = true;
  std::size_t aux_rows = 0, primary_rows = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 9, c = 1 + rng() % 12;
    ParamStore store;
    Rng init(rng());
    const auto disc = Discriminator::create(store, "disc", c, 4 + rng() % 12, init);
    const Tensor x = random_tensor({n, c}, rng, -2.0, 2.0);
    const auto labels = random_labels(n, rng);
    const double lambda = std::uniform_real_distribution<double>(0.05, 3.0)(rng);
    const DomainWeights w{0.5 + (rng() % 100) / 40.0, 0.5 + (rng() % 100) / 40.0};
    const Tensor reversed = feature_grad(x, disc, labels, lambda, w, AlignMode::Cgrl);
    const Tensor identity = feature_grad(x, disc, labels, lambda, w, AlignMode::None);
    for (std::size_t i = 0; i < n; ++i) {
      (labels[i].is_primary ? primary_rows : aux_rows) += 1;
      for (std::size_t j = 0; j < c; ++j) {
        const double got = reversed[i * c + j], ref = identity[i * c + j];
        if (labels[i].is_primary) {
          primary_zero = primary_zero && got == 0.0;
        } else {
          const double want = -lambda * ref;
          const double err = want == 0.0 ? std::abs(got) : std::abs(got - want) / std::abs(want);
          worst = std::max(worst, err);
        }
      }
    }
  }
  return {worst < 1e-10 && primary_zero,
          "max rel err " + fmt(worst) + " over " + std::to_string(aux_rows) + " auxiliary rows; " +
              std::to_string(primary_rows) + " primary rows " + (primary_zero ? "all zero" : "NOT zero")};
}

Outcome criterion2() {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 9, c = 1 + rng() % 8;
    ParamStore store;
    Rng init(rng());
    const auto disc = Discriminator::create(store, "disc", c, 8, init);
    const Tensor x = random_tensor({n, c}, rng, -3.0, 3.0);
    const auto labels = random_labels(n, rng);
    const DomainWeights w{0.2 + (rng() % 100) / 25.0, 0.2 + (rng() % 100) / 25.0};
    const double got = cgrl_loss({x, labels, 1.0, w, AlignMode::Cgrl}, disc).item();
    const Tensor d = disc(x);
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = std::clamp(d[i], kProbClamp, 1.0 - kProbClamp);
      want += labels[i].is_primary ? w.w_main * std::log(p) : w.w_aux * std::log(1.0 - p);
    }
    want = -want / static_cast<double>(n);
    worst = std::max(worst, std::abs(got - want));
  }

  // N = 2, one row per domain, D = 0.5, unit weights.
  ParamStore store;
  Rng init(0);
  auto disc = Discriminator::create(store, "disc", 2, 4, init);
  for (auto* p : store.all()) {
    auto v = p->value.mutable_data();
    std::fill(v.begin(), v.end(), 0.0);
  }
  const std::vector<DomainLabel> labels = {{0, true}, {1, false}};
  const double hand = cgrl_loss({Tensor({2, 2}, {0.4, -1.0, 1.5, 0.2}), labels, 1.0, {1.0, 1.0}, AlignMode::Cgrl},
                                disc)
                          .item();
  const double hand_err = std::abs(hand - std::log(2.0));
  return {worst < 1e-12 && hand_err < 1e-12,
          "max abs err " + fmt(worst) + " on 100 batches; hand case " + fmt(hand, 17) + " vs ln 2"};
}

Outcome criterion3() {
  std::mt19937_64 rng(303);
  int identical = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 4 * (1 + rng() % 6), w = 4 * (1 + rng() % 6);
    const Tensor x = random_tensor({1, h, w}, rng, -5.0, 5.0);
    bool ok = pixel_ensemble(feature_unensemble(x)).bitwise_equal(x);
    std::vector<Tensor> slices;
    for (int k = 0; k < 16; ++k) slices.push_back(random_tensor({1, h / 4, w / 4}, rng, -5.0, 5.0));
    const auto back = feature_unensemble(pixel_ensemble(slices));
    for (int k = 0; k < 16; ++k) ok = ok && back[k].bitwise_equal(slices[k]);
    identical += ok;
  }
  return {identical == 100, std::to_string(identical) + "/100 tensors round-trip bitwise in both directions"};
}

Outcome criterion4() {
  const auto entries = full_model_gradcheck(404);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& e : entries)
    if (e.worst >= worst) {
      worst = e.worst;
      worst_name = e.op;
    }
  return {!entries.empty() && worst < 1e-4,
          std::to_string(entries.size()) + " parameter groups; max rel err " + fmt(worst) + " (" + worst_name + ")"};
}

ExperimentConfig toy_experiment() {
  ExperimentConfig c;
  c.model = toy_model_config();
  c.data.primary_train = 4;
  c.data.aux_train = 4;
  c.data.val = 3;
  c.data.test = 3;
  c.train.epochs = 3;
  c.train.batch_size = 2;
  c.train.pretrain_images = 4;
  c.train.pretrain_epochs = 1;
  return c;
}

NamedTensors frozen_entries(const NamedTensors& all, const SegmentationModel& model) {
  NamedTensors out;
  for (const auto& [name, t] : all)
    if (model.is_base_parameter(name)) out.emplace_back(name, t);
  return out;
}

Outcome criterion5(const fs::path& work) {
  const auto config = toy_experiment();
  const auto data = load_experiment_data(config);
  auto model = build_model(config);
  fs::create_directories(work);
  save_checkpoint(work / "before.ckpt", model->params().snapshot());

  const auto n = config.data.primary_train;
  const auto weights = domain_weights({{0, n}, {1, config.data.aux_train}}, 0);
  Trainer trainer(*model, config, weights);
  for (std::size_t s = 0; s < 100; ++s) {
    const std::vector<const DomainSample*> batch = {&data.train.at(0)[s % n], &data.train.at(1)[s % n]};
    trainer.step(batch, learning_rate(s / 4, n, config.train), config.align.lambda);
  }
  save_checkpoint(work / "after.ckpt", model->params().snapshot());

  const auto before = load_checkpoint(work / "before.ckpt"), after = load_checkpoint(work / "after.ckpt");
  const auto fb = frozen_entries(before, *model), fa = frozen_entries(after, *model);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < fb.size(); ++i)
    if (fa[i].first != fb[i].first || !fa[i].second.bitwise_equal(fb[i].second)) ++changed;
  const bool trainable_moved = checkpoint_hash(before) != checkpoint_hash(after);
  return {fb.size() == fa.size() && changed == 0 && trainable_moved && trainer.steps() == 100,
          std::to_string(trainer.steps()) + " steps; " + std::to_string(changed) + " of " +
              std::to_string(fb.size()) + " frozen tensors differ; trainable set " +
              (trainable_moved ? "updated" : "NOT updated")};
}

Outcome criterion6() {
  std::size_t mismatches = 0;
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
      const double m =
          ((fg_union == 0 ? 1.0 : inter / fg_union) + (bg_union == 0 ? 1.0 : bg_inter / bg_union)) / 2.0;
      mismatches += dice(a, b) != d || miou(a, b) != m;
    }

  std::mt19937_64 rng(606);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 2 + rng() % 7, w = 2 + rng() % 7;
    const int k = 1 + static_cast<int>(rng() % 5);
    const Tensor gt = testing::random_instances(h, w, k, rng), pred = testing::random_instances(h, w, k, rng);
    const auto got = panoptic(pred, gt), want = testing::panoptic_reference(pred, gt);
    worst = std::max({worst, std::abs(aji(pred, gt) - testing::aji_reference(pred, gt)),
                      std::abs(got.dq - want.dq), std::abs(got.sq - want.sq), std::abs(got.pq - want.pq)});
  }

  std::size_t hd_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 3 + rng() % 12, w = 3 + rng() % 12;
    const Tensor x = random_binary({h, w}, rng, 0.3), y = random_binary({h, w}, rng, 0.3);
    const auto got = hausdorff(x, y), want = testing::hausdorff_reference(x, y);
    hd_mismatch += got.has_value() != want.has_value() || (got && *got != *want);
  }
  return {mismatches == 0 && worst < 1e-12 && hd_mismatch == 0,
          std::to_string(mismatches) + " dice/miou mismatches on 262144 pairs; AJI/DQ/SQ/PQ max err " + fmt(worst) +
              "; " + std::to_string(hd_mismatch) + "/100 hausdorff mismatches"};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion10(const fs::path& work) {
  const auto config = toy_experiment();
  std::vector<std::string> hashes;
  for (const char* run : {"run_a", "run_b"}) {
    const auto data = load_experiment_data(config);
    TrainOptions options;
    options.run_dir = work / run;
    hashes.push_back(run_training(config, data, options).best_hash);
  }
  std::vector<std::string> differ;
  for (const char* f : {"metrics.csv", "val_report.csv", "test_report.csv", "best.ckpt", "last.ckpt"})
    if (file_bytes(work / "run_a" / f) != file_bytes(work / "run_b" / f)) differ.push_back(f);
  std::string detail = "best hash " + hashes[0] + (hashes[0] == hashes[1] ? " on both runs" : " vs " + hashes[1]);
  detail += differ.empty() ? "; metrics CSVs and checkpoints identical" : "; differing files:";
  for (const auto& f : differ) detail += " " + f;
  return {differ.empty() && hashes[0] == hashes[1], detail};
}

struct AblationSetup {
  ExperimentConfig base;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
};

double pts(const AblationTable& t, const std::string& arm) { return 100.0 * t.mean(arm, "dsc"); }

Outcome criterion7(const AblationSetup& s) {
  const auto start = std::chrono::steady_clock::now();
  const auto t = run_ablation(Protocol::Alignment, s.base, s.seeds, s.jobs);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  const double po = pts(t, "primary-only"), nm = pts(t, "naive-mix"), g = pts(t, "grl"), c = pts(t, "cgrl");
  const bool pass = nm < po && c > g && g > nm && c - nm >= 0.5 && c >= po && minutes < 30.0;
  return {pass, "val DSC primary-only " + fmt(po) + ", naive-mix " + fmt(nm) + ", grl " + fmt(g) + ", cgrl " +
                    fmt(c) + " over " + std::to_string(s.seeds.size()) + " seeds in " + fmt(minutes, 3) + " min"};
}

Outcome criterion8(const AblationSetup& s) {
  const auto t = run_ablation(Protocol::AuxCount, s.base, s.seeds, s.jobs);
  std::string detail = "val DSC by auxiliary count:";
  bool monotone = true;
  for (std::size_t k = 0; k < t.arms.size(); ++k) {
    detail += " " + fmt(pts(t, t.arms[k]));
    if (k > 0 && pts(t, t.arms[k]) - pts(t, t.arms[k - 1]) < -0.1) monotone = false;
  }
  const double gain = pts(t, t.arms.back()) - pts(t, t.arms.front());
  detail += "; endpoint gain " + fmt(gain, 3) + " points";
  return {t.arms.size() == 4 && monotone && gain >= 0.3, detail};
}

Outcome criterion9(const AblationSetup& s) {
  const auto& enc = s.base.model.encoder;
  const std::size_t base_res = 4 * enc.grid();
  const auto t = run_ablation(Protocol::Decoder, s.base, s.seeds, s.jobs);
  const double bd = pts(t, "base"), hd = pts(t, "hr");
  const double bh = t.mean("base", "hd"), hh = t.mean("hr", "hd");
  return {enc.image_size > base_res && hd >= bd && hh < bh,
          "native " + std::to_string(enc.image_size) + " px vs base decoder " + std::to_string(base_res) +
              " px; val DSC base " + fmt(bd) + ", hr " + fmt(hd) + "; mean HD base " + fmt(bh) + ", hr " + fmt(hh)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  std::string config_path = NF_ABLATION_CONFIG;
  std::size_t seeds = 5, jobs = 1;
  std::string work = (fs::temp_directory_path() / "nucleiforge_acceptance").string();
  app.add_option("--criteria", selected, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--config", config_path, "Configuration for the ablation criteria")->check(CLI::ExistingFile);
  app.add_option("--seeds", seeds, "Seeds per ablation arm")->check(CLI::PositiveNumber);
  app.add_option("--jobs", jobs, "Parallel ablation runs")->check(CLI::PositiveNumber);
  app.add_option("--work-dir", work, "Scratch directory for checkpoints and runs");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty())
    for (int i = 1; i <= 10; ++i) selected.push_back(i);
  const std::set<int> chosen(selected.begin(), selected.end());

  AblationSetup ablation;
  if (chosen.count(7) || chosen.count(8) || chosen.count(9)) {
    ablation.base = load_config(config_path);
    for (std::uint64_t s = 0; s < seeds; ++s) ablation.seeds.push_back(s);
    ablation.jobs = jobs;
  }

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion1},
      {2, criterion2},
      {3, criterion3},
      {4, criterion4},
      {5, [&] { return criterion5(fs::path(work) / "freeze"); }},
      {6, criterion6},
      {7, [&] { return criterion7(ablation); }},
      {8, [&] { return criterion8(ablation); }},
      {9, [&] { return criterion9(ablation); }},
      {10, [&] { return criterion10(fs::path(work) / "determinism"); }},
  };

  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!chosen.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << " [" << fmt(secs, 3)
              << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
