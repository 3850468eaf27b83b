#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "nucleiforge/checkpoint.hpp"
#include "nucleiforge/gradcheck.hpp"
#include "nucleiforge/gradcheck_suites.hpp"
#include "nucleiforge/ops.hpp"
#include "nucleiforge/tape.hpp"
#include "nucleiforge/train.hpp"
#include "test_util.hpp"

using namespace nf;
using nf::testing::random_binary;
using nf::testing::random_tensor;

namespace {

// Toy experiment small enough to train in well under a second per epoch.
ExperimentConfig toy_experiment() {
  ExperimentConfig c;
  c.model = toy_model_config();
  c.data.primary_train = 4;
  c.data.aux_train = 4;
  c.data.val = 3;
  c.data.test = 3;
  c.train.epochs = 2;
  c.train.batch_size = 2;
  c.train.pretrain_images = 4;
  c.train.pretrain_epochs = 1;
  return c;
}


}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig t;
  CHECK(learning_rate(0, 40, t) == doctest::Approx(2e-4).epsilon(1e-15));
  CHECK(learning_rate(1, 40, t) == doctest::Approx(1.96e-4).epsilon(1e-15));
  CHECK(learning_rate(0, 80, t) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(learning_rate(10, 40, t) == doctest::Approx(2e-4 * std::pow(0.98, 10)).epsilon(1e-15));
  CHECK_THROWS(learning_rate(0, 0, t));
}

TEST_CASE("fine and coarse losses") {
  std::mt19937_64 rng(2);
  const Tensor mask = random_binary({1, 8, 8}, rng);

  Tensor perfect({1, 8, 8});
  for (std::size_t i = 0; i < 64; ++i) perfect.mutable_data()[i] = mask[i] > 0 ? 40.0 : -40.0;
  CHECK(fine_loss(perfect, mask).item() < 1e-6);

  Tensor perfect_prob({1, 4, 4});
  const Tensor small = downsample_mask(mask, 4);
  for (std::size_t i = 0; i < 16; ++i) perfect_prob.mutable_data()[i] = small[i] > 0 ? 1.0 : 0.0;
  CHECK(coarse_loss(perfect_prob, mask).item() < 1e-6);
  CHECK(coarse_loss(Tensor({1, 4, 4}), Tensor({1, 8, 8})).item() < 1e-6);

  SUBCASE("area-average downsampling") {
    Tensor m({1, 4, 4});
    // Top-left 2×2 block has 3 of 4 pixels set, top-right has 1 of 4.
    for (auto i : {0, 1, 4, 3}) m.mutable_data()[i] = 1.0;
    const Tensor d = downsample_mask(m, 2);
    CHECK(d[0] == 1.0);
    CHECK(d[1] == 0.0);
    CHECK(downsample_mask(m, 8).shape() == Shape{1, 8, 8});
  }

  SUBCASE("gradients pass finite differences") {
    ScalarProgram fine = [&](const std::vector<Tensor>& in) { return fine_loss(in[0], mask); };
    CHECK(grad_check(fine, {random_tensor({1, 8, 8}, rng, -3.0, 3.0)}).max_rel_error < 1e-6);
    ScalarProgram coarse = [&](const std::vector<Tensor>& in) { return coarse_loss(sigmoid(in[0]), mask); };
    CHECK(grad_check(coarse, {random_tensor({1, 4, 4}, rng, -3.0, 3.0)}).max_rel_error < 1e-6);
  }

  SUBCASE("joint spatial permutation leaves the loss unchanged") {
    const Tensor logits = random_tensor({1, 8, 8}, rng, -2.0, 2.0);
    std::vector<std::size_t> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor pl({1, 8, 8}), pm({1, 8, 8});
    for (std::size_t i = 0; i < 64; ++i) {
      pl.mutable_data()[i] = logits[perm[i]];
      pm.mutable_data()[i] = mask[perm[i]];
    }
    CHECK(fine_loss(pl, pm).item() == doctest::Approx(fine_loss(logits, mask).item()).epsilon(1e-12));
  }

  CHECK_THROWS(fine_loss(Tensor({1, 8, 8}), Tensor({1, 4, 4})));
}

TEST_CASE("loss bundle is linear in alpha and beta") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor f = Tensor::scalar(u(rng)), c = Tensor::scalar(u(rng)), k = Tensor::scalar(u(rng));
    const double alpha = u(rng), beta = u(rng);
    const auto b = combine_losses(f, c, k, alpha, beta);
    CHECK(std::abs(b.total.item() - (f.item() + alpha * c.item() + beta * k.item())) < 1e-12);
  }
}

TEST_CASE("adam matches hand-stepped formulas") {
  ParamStore store;
  Parameter* p = store.add("w", Tensor({2}, {0.5, -1.5}), true);
  Adam adam;
  double w[2] = {0.5, -1.5}, m[2] = {0, 0}, v[2] = {0, 0};
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 5; ++t) {
    // loss = Σ w³ / 3 so the gradient w² changes every step.
    Tape tape;
    GradStore grads;
    {
      TapeScope scope(tape);
      grads = tape.backward(scale(sum(mul(mul(p->value, p->value), p->value)), 1.0 / 3.0));
    }
    adam.step(store.trainable(), grads, lr);
    for (int i = 0; i < 2; ++i) {
      const double g = w[i] * w[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(std::abs(p->value[i] - w[i]) < 1e-14);
    }
  }
  CHECK(adam.steps() == 5);
}

TEST_CASE("adam clips by global norm") {
  ParamStore store;
  Parameter* p = store.add("w", Tensor({2}, {3.0, 4.0}), true);
  Tape tape;
  GradStore grads;
  {
    TapeScope scope(tape);
    grads = tape.backward(scale(sum(mul(p->value, p->value)), 0.5));  // gradient = w, norm 5
  }
  Adam adam;
  CHECK(adam.step(store.trainable(), grads, 0.0, 1.0) == doctest::Approx(5.0));
}

TEST_CASE("training steps") {
  const auto config = toy_experiment();
  const auto data = load_experiment_data(config);
  auto model = build_model(config);
  std::vector<const DomainSample*> batch = {&data.train.at(0)[0], &data.train.at(1)[0]};
  const DomainWeights weights{1.0, 1.0};

  SUBCASE("lr = 0 leaves every parameter unchanged") {
    const auto before = model->params().snapshot();
    Trainer trainer(*model, config, weights);
    trainer.step(batch, 0.0, 1.0);
    CHECK(checkpoint_hash(before) == checkpoint_hash(model->params().snapshot()));
  }

  SUBCASE("frozen parameters survive 100 steps") {
    const auto frozen = model->params().snapshot(false);
    const auto trainable = model->params().snapshot(true);
    Trainer trainer(*model, config, weights);
    for (int i = 0; i < 100; ++i) trainer.step(batch, 1e-3, 1.0);
    CHECK(checkpoint_hash(frozen) == checkpoint_hash(model->params().snapshot(false)));
    CHECK(checkpoint_hash(trainable) != checkpoint_hash(model->params().snapshot(true)));
  }

  SUBCASE("zero alpha and beta still report the alignment loss") {
    auto c = config;
    c.train.alpha = 0.0;
    c.train.beta = 0.0;
    Tape tape;
    TapeScope scope(tape);
    const auto b = batch_losses(*model, batch, c, weights, 1.0);
    CHECK(b.l_cgrl.item() > 0.0);
    CHECK(b.total.item() == b.l_fine.item());
  }

  SUBCASE("non-finite loss aborts with a diagnostic") {
    DomainSample broken = data.train.at(0)[0];
    broken.image = Tensor(broken.image.shape(), std::numeric_limits<double>::quiet_NaN());
    Trainer trainer(*model, config, weights);
    try {
      trainer.step({&broken}, 1e-3, 1.0);
      FAIL("expected TrainingDiverged");
    } catch (const TrainingDiverged& e) {
      const std::string msg = e.what();
      CHECK(msg.find("step 1") != std::string::npos);
      CHECK(msg.find("lr") != std::string::npos);
      CHECK(msg.find("l_fine") != std::string::npos);
    }
  }
}

TEST_CASE("evaluation") {
  const auto config = toy_experiment();
  const auto data = load_experiment_data(config);
  const auto model = build_model(config);
  const auto a = evaluate(*model, data.val), b = evaluate(*model, data.val);
  REQUIRE(a.size() == data.val.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].semantic.dsc == b[i].semantic.dsc);
    CHECK(a[i].semantic.hd == b[i].semantic.hd);
    CHECK(a[i].instance.pq == b[i].instance.pq);
  }
  std::ostringstream csv;
  write_report_csv(csv, a);
  const std::string text = csv.str();
  // header + one row per image + summary row
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(a.size() + 2));
}

TEST_CASE("training improves the training fit and is reproducible") {
  auto config = toy_experiment();
  config.train.epochs = 6;
  const auto data = load_experiment_data(config);
  // Mean fine loss over the primary training images.
  auto fit = [&](const SegmentationModel& m) {
    NoGradScope no_grad;
    double total = 0.0;
    for (const auto& s : data.train.at(0)) total += fine_loss(m.forward(s.image).logits, s.mask).item();
    return total / static_cast<double>(data.train.at(0).size());
  };
  const auto initial = build_model(config);
  const double before = fit(*initial);
  const auto r1 = run_training(config, data);
  const auto r2 = run_training(config, data);
  CHECK(r1.best_hash == r2.best_hash);
  REQUIRE(r1.history.size() == 6);

  SegmentationModel trained(config.model, config.train.seed);
  trained.params().load(r1.best_params);
  CHECK(fit(trained) < before);

  std::ostringstream h1, h2;
  write_history_csv(h1, r1.history);
  write_history_csv(h2, r2.history);
  CHECK(h1.str() == h2.str());
}

TEST_CASE("ablation arms") {
  const auto base = toy_experiment();
  CHECK(ablation_arms(Protocol::Alignment, base).size() == 4);
  CHECK(ablation_arms(Protocol::AuxCount, base).size() == 4);
  CHECK(ablation_arms(Protocol::Decoder, base).size() == 2);
  for (auto p : {Protocol::Alignment, Protocol::Decoder, Protocol::AuxCount}) CHECK(parse_protocol(to_string(p)) == p);
  CHECK_THROWS(parse_protocol("everything"));

  const auto arms = ablation_arms(Protocol::Alignment, base);
  CHECK(arms[0].config.data.auxiliary_presets().empty());
  CHECK(arms[1].config.align.mode == AlignMode::None);
  CHECK(arms[2].config.align.mode == AlignMode::Grl);
  CHECK(arms[3].config.align.mode == AlignMode::Cgrl);
  const auto counts = ablation_arms(Protocol::AuxCount, base);
  for (std::size_t k = 0; k < 4; ++k) CHECK(counts[k].config.data.auxiliary_presets().size() == k);
}

TEST_CASE("ablation tables are deterministic") {
  auto base = toy_experiment();
  base.train.epochs = 1;
  const auto a = run_ablation(Protocol::Decoder, base, {0, 1});
  const auto b = run_ablation(Protocol::Decoder, base, {0, 1}, 2);
  REQUIRE(a.runs.size() == 4);
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    CHECK(a.runs[i].hash == b.runs[i].hash);
    CHECK(a.runs[i].val.dsc.mean == b.runs[i].val.dsc.mean);
  }
  std::ostringstream s;
  write_ablation_summary(s, a, "val");
  CHECK(s.str().find("±") != std::string::npos);
}

TEST_CASE("hr warm start copies the base decoder head") {
  auto config = toy_experiment();
  const auto model = build_model(config);
  const auto& store = model->params();
  const Tensor& token = store.find("decoder.output_token")->value;
  const Tensor& slices = store.find("hr.slice_tokens")->value;
  for (std::size_t i = 0; i < slices.size(); ++i) CHECK(slices[i] == token[i % token.size()]);
  for (const char* suffix : {"0.weight", "0.bias", "2.weight", "2.bias"})
    CHECK(store.find(std::string("hr.slice_mlp.") + suffix)
              ->value.bitwise_equal(store.find(std::string("decoder.hypernet.") + suffix)->value));
  for (double v : store.find("hr.encoder_up2.weight")->value.data()) CHECK(v == 0.0);
  CHECK(store.find("hr.slice_tokens")->trainable);

  config.model.decoder.hr_warm_start = false;
  const auto cold = build_model(config);
  CHECK_FALSE(cold->params().find("hr.slice_mlp.0.weight")->value.bitwise_equal(
      cold->params().find("decoder.hypernet.0.weight")->value));
  config.model.decoder.hr_warm_start = true;
  config.model.decoder.mode = DecoderMode::Base;
  const auto base = build_model(config);
  CHECK_FALSE(base->params().find("hr.slice_mlp.0.weight")->value.bitwise_equal(
      base->params().find("decoder.hypernet.0.weight")->value));
}
