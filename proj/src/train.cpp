#include "nucleiforge/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <future>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace nf {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Losses

namespace {

Tensor composite(const Tensor& prob, const Tensor& target) {
  return add(scale(bce(prob, target), 0.5), scale(soft_dice(prob, target), 0.5));
}

void check_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs mask " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor fine_loss(const Tensor& logits, const Tensor& mask) {
  check_same_shape("fine_loss", logits, mask);
  return composite(sigmoid(logits), mask);
}

Tensor downsample_mask(const Tensor& mask, std::size_t size) {
  if (mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != mask.dim(2)) {
    throw ShapeError("downsample_mask: expected 1×S×S, got " + shape_str(mask.shape()));
  }
  const std::size_t s = mask.dim(1);
  if (size == s) return mask;
  Tensor out({1, size, size});
  auto dst = out.mutable_data();
  auto src = mask.data();
  if (size < s && s % size == 0) {
    const std::size_t f = s / size;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx) acc += src[(y * f + dy) * s + x * f + dx];
        dst[y * size + x] = acc / static_cast<double>(f * f) >= 0.5 ? 1.0 : 0.0;
      }
    return out;
  }
  if (size > s && size % s == 0) {
    const std::size_t f = size / s;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) dst[y * size + x] = src[(y / f) * s + x / f];
    return out;
  }
  throw ShapeError("downsample_mask: cannot map " + std::to_string(s) + " to " + std::to_string(size));
}

Tensor coarse_loss(const Tensor& coarse_prob, const Tensor& mask) {
  if (coarse_prob.rank() != 3 || coarse_prob.dim(1) != coarse_prob.dim(2)) {
    throw ShapeError("coarse_loss: expected 1×R×R, got " + shape_str(coarse_prob.shape()));
  }
  const Tensor target = downsample_mask(mask, coarse_prob.dim(1));
  check_same_shape("coarse_loss", coarse_prob, target);
  return composite(coarse_prob, target);
}

LossBundle combine_losses(const Tensor& l_fine, const Tensor& l_cgrl, const Tensor& l_coarse, double alpha,
                          double beta) {
  LossBundle b{l_fine, l_cgrl, l_coarse, {}};
  b.total = add(add(l_fine, scale(l_cgrl, alpha)), scale(l_coarse, beta));
  return b;
}

double learning_rate(std::size_t epoch, std::size_t n_primary, const TrainConfig& config) {
  if (n_primary == 0) throw std::invalid_argument("learning_rate: no primary images");
  return config.lr * (static_cast<double>(config.lr_images) / static_cast<double>(n_primary)) *
         std::pow(config.decay, static_cast<double>(epoch));
}

// ---------------------------------------------------------------------------
// Optimizer

Adam::Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

double Adam::step(const std::vector<Parameter*>& params, const GradStore& grads, double lr, double clip_norm) {
  ++t_;
  std::vector<std::pair<Parameter*, Tensor>> active;
  double sq = 0.0;
  for (auto* p : params) {
    auto g = grads.grad(p->value);
    if (!g) continue;
    for (double v : g->data()) sq += v * v;
    active.emplace_back(p, std::move(*g));
  }
  const double norm = std::sqrt(sq);
  const double factor = clip_norm > 0.0 && norm > clip_norm ? clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [p, g] : active) {
    auto& m = m_[p->name];
    auto& v = v_[p->name];
    m.resize(p->value.size(), 0.0);
    v.resize(p->value.size(), 0.0);
    auto w = p->value.mutable_data();
    auto gd = g.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = gd[i] * factor;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double delta = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      if (delta != 0.0) w[i] -= delta;  // keeps -0.0 intact under lr = 0
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training step

LossBundle batch_losses(const SegmentationModel& model, const std::vector<const DomainSample*>& batch,
                        const ExperimentConfig& config, const DomainWeights& weights, double lambda) {
  if (batch.empty()) throw std::invalid_argument("batch_losses: empty batch");
  std::vector<Tensor> pooled, fine, coarse;
  std::vector<DomainLabel> labels;
  for (const auto* s : batch) {
    auto r = model.forward(s->image);
    pooled.push_back(r.pooled);
    labels.push_back(s->label);
    if (!config.train.fine_on_primary_only || s->label.is_primary) fine.push_back(fine_loss(r.logits, s->mask));
    coarse.push_back(coarse_loss(r.coarse, s->mask));
  }
  if (fine.empty()) throw std::invalid_argument("batch_losses: no sample contributes to the fine loss");
  auto average = [](const std::vector<Tensor>& parts) {
    return scale(sum(concat(parts, 0)), 1.0 / static_cast<double>(parts.size()));
  };
  std::vector<Tensor> fine_flat, coarse_flat;
  for (auto& t : fine) fine_flat.push_back(reshape(t, {1}));
  for (auto& t : coarse) coarse_flat.push_back(reshape(t, {1}));
  AlignmentBatch align{concat(pooled, 0), labels, lambda, weights, config.align.mode};
  return combine_losses(average(fine_flat), cgrl_loss(align, model.discriminator()), average(coarse_flat),
                        config.train.alpha, config.train.beta);
}

Trainer::Trainer(SegmentationModel& model, const ExperimentConfig& config, DomainWeights weights)
    : model_(model), config_(config), weights_(weights) {}

StepValues Trainer::step(const std::vector<const DomainSample*>& batch, double lr, double lambda) {
  Tape tape;
  TapeScope scope(tape);
  const LossBundle losses = batch_losses(model_, batch, config_, weights_, lambda);
  StepValues v{losses.l_fine.item(), losses.l_cgrl.item(), losses.l_coarse.item(), losses.total.item(), 0.0};
  if (!std::isfinite(v.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << adam_.steps() + 1 << " (lr " << lr << "): l_fine=" << v.l_fine
       << " l_cgrl=" << v.l_cgrl << " l_coarse=" << v.l_coarse << " total=" << v.total;
    throw TrainingDiverged(os.str());
  }
  const GradStore grads = tape.backward(losses.total);
  v.grad_norm = adam_.step(model_.params().trainable(), grads, lr, config_.train.clip_norm);
  return v;
}

std::vector<ImageReport> evaluate(const SegmentationModel& model, const std::vector<DomainSample>& samples,
                                  double threshold) {
  std::vector<ImageReport> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(score_prediction(s.id, model.predict(s.image), s.mask, s.instances, threshold));
  return out;
}

// ---------------------------------------------------------------------------
// Data and model construction

ExperimentData load_experiment_data(const ExperimentConfig& config) {
  ExperimentData data;
  const int pid = config.data.primary_id;
  const auto aux = config.data.auxiliary_presets();
  if (!config.data.manifest.empty()) {
    const fs::path manifest = config.data.manifest;
    if (!fs::exists(manifest)) throw std::runtime_error("manifest not found: " + manifest.string());
    data.train = load_manifest_split(manifest, "train", pid);
    if (aux.empty()) std::erase_if(data.train, [&](const auto& kv) { return kv.first != pid; });
    auto pick = [&](const std::string& split) {
      auto d = load_manifest_split(manifest, split, pid);
      return d.count(pid) ? d.at(pid) : std::vector<DomainSample>{};
    };
    data.val = pick("val");
    data.test = pick("test");
    if (!data.train.count(pid) || data.train.at(pid).empty()) {
      throw std::runtime_error(manifest.string() + ": no training rows for primary domain " + std::to_string(pid));
    }
    return data;
  }
  const std::size_t size = config.model.encoder.image_size;
  auto primary = generate(preset(config.data.primary, size), config.data.seed,
                          config.data.primary_train + config.data.val + config.data.test, size, true);
  for (auto& s : primary) s.label = {pid, true};
  auto& train = data.train[pid];
  for (std::size_t i = 0; i < primary.size(); ++i) {
    auto& dst = i < config.data.primary_train                     ? train
                : i < config.data.primary_train + config.data.val ? data.val
                                                                  : data.test;
    dst.push_back(std::move(primary[i]));
  }
  for (const auto& name : aux) {
    const auto spec = preset(name, size);
    if (spec.domain_id == pid) throw std::invalid_argument("auxiliary preset '" + name + "' shares the primary domain id");
    if (data.train.count(spec.domain_id)) throw std::invalid_argument("auxiliary preset '" + name + "' listed twice");
    data.train[spec.domain_id] = generate(spec, config.data.seed, config.data.aux_train, size, false);
  }
  return data;
}

namespace {

std::string pretrain_key(const ModelConfig& model, const TrainConfig& train) {
  ExperimentConfig c;
  c.model = model;
  c.model.decoder.mode = DecoderMode::Base;
  std::ostringstream os;
  for (const auto& f : config_fields())
    if (f.name.rfind("model.", 0) == 0 || f.name.rfind("decoder.", 0) == 0) os << f.name << '=' << f.get(c) << ';';
  os << train.pretrain_images << ';' << train.pretrain_epochs << ';' << train.pretrain_lr << ';' << train.pretrain_seed;
  return os.str();
}

NamedTensors fit_base(const ModelConfig& model_config, const TrainConfig& train) {
  ModelConfig mc = model_config;
  mc.decoder.mode = DecoderMode::Base;
  SegmentationModel model(mc, train.pretrain_seed);
  for (auto* p : model.params().all()) {
    const bool fit = model.is_base_parameter(p->name) || p->name.rfind("spgen.", 0) == 0;
    model.params().set_trainable(p, fit);
  }
  const std::size_t size = mc.encoder.image_size;
  auto samples = generate(preset("pretrain", size), train.pretrain_seed, train.pretrain_images, size, true);
  Rng rng(train.pretrain_seed);
  Adam adam;
  ExperimentConfig loss_config;
  loss_config.align.mode = AlignMode::None;
  loss_config.train.alpha = 0.0;
  const std::size_t batch = 4;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < train.pretrain_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::vector<const DomainSample*> b;
      for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) b.push_back(&samples[order[i]]);
      Tape tape;
      TapeScope scope(tape);
      auto losses = batch_losses(model, b, loss_config, {}, 0.0);
      if (!std::isfinite(losses.total.item())) throw TrainingDiverged("non-finite loss while fitting the base model");
      auto grads = tape.backward(losses.total);
      adam.step(model.params().trainable(), grads, train.pretrain_lr, 5.0);
    }
  }
  NamedTensors base;
  for (const auto* p : std::as_const(model.params()).all())
    if (model.is_base_parameter(p->name)) base.emplace_back(p->name, p->value.detach());
  return base;
}

}  // namespace

NamedTensors pretrained_base(const ModelConfig& model, const TrainConfig& train) {
  static std::mutex mutex;
  static std::map<std::string, std::shared_future<NamedTensors>> cache;
  const auto key = pretrain_key(model, train);
  std::promise<NamedTensors> promise;
  std::shared_future<NamedTensors> future;
  bool owner = false;
  {
    std::lock_guard lock(mutex);
    auto it = cache.find(key);
    if (it == cache.end()) {
      future = promise.get_future().share();
      cache.emplace(key, future);
      owner = true;
    } else {
      future = it->second;
    }
  }
  if (owner) {
    try {
      promise.set_value(fit_base(model, train));
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(mutex);
      cache.erase(key);
    }
  }
  return future.get();
}

namespace {

void copy_param(ParamStore& store, const std::string& from, const std::string& to) {
  const auto* src = store.find(from);
  auto* dst = store.find(to);
  if (!src || !dst || src->value.shape() != dst->value.shape())
    throw CheckpointError("warm start: cannot copy " + from + " into " + to);
  dst->value = src->value.clone();
  dst->value.set_requires_grad(dst->trainable);
}

void warm_start_hr(SegmentationModel& model) {
  auto& store = model.params();
  auto* tokens = store.find("hr.slice_tokens");
  const auto* out = store.find("decoder.output_token");
  if (!tokens || !out) throw CheckpointError("warm start: decoder tokens missing");
  const std::size_t d = out->value.size();
  Tensor t = tokens->value.clone();
  auto v = t.mutable_data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = out->value[i % d];
  tokens->value = t.set_requires_grad(tokens->trainable);

  for (std::size_t l = 0;; ++l) {
    const std::string from = "decoder.hypernet." + std::to_string(l);
    if (!store.find(from + ".weight")) break;
    copy_param(store, from + ".weight", "hr.slice_mlp." + std::to_string(l) + ".weight");
    copy_param(store, from + ".bias", "hr.slice_mlp." + std::to_string(l) + ".bias");
  }
  for (const char* name : {"hr.encoder_up2.weight", "hr.encoder_up2.bias"}) {
    auto* p = store.find(name);
    if (!p) throw CheckpointError(std::string("warm start: missing ") + name);
    p->value = Tensor(p->value.shape()).set_requires_grad(p->trainable);
  }
}

}  // namespace

std::unique_ptr<SegmentationModel> build_model(const ExperimentConfig& config) {
  auto model = std::make_unique<SegmentationModel>(config.model, config.train.seed);
  if (config.train.pretrain_epochs == 0) return model;
  for (const auto& [name, value] : pretrained_base(config.model, config.train)) {
    auto* p = model->params().find(name);
    if (!p || p->value.shape() != value.shape()) throw CheckpointError("pretrained base does not fit parameter " + name);
    const bool trainable = p->trainable;
    p->value = value.clone();
    p->value.set_requires_grad(trainable);
  }
  if (config.model.decoder.mode == DecoderMode::Hr && config.model.decoder.hr_warm_start) warm_start_hr(*model);
  return model;
}

// ---------------------------------------------------------------------------
// Training run

namespace {

void write_reports(const fs::path& path, const std::vector<ImageReport>& reports) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_report_csv(out, reports);
}

}  // namespace

void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
  os << "epoch,lr,lambda,l_fine,l_cgrl,l_coarse,total,grad_norm,val_dsc,val_miou,val_f1,val_hd,val_aji,val_dq,val_sq,val_pq\n";
  os << std::setprecision(17);
  for (const auto& r : history) {
    const auto& l = r.mean_loss;
    const auto& v = r.val;
    os << r.epoch << ',' << r.lr << ',' << r.lambda << ',' << l.l_fine << ',' << l.l_cgrl << ',' << l.l_coarse << ','
       << l.total << ',' << l.grad_norm << ',' << v.dsc.mean << ',' << v.miou.mean << ',' << v.f1.mean << ','
       << v.hd.mean << ',' << v.aji.mean << ',' << v.dq.mean << ',' << v.sq.mean << ',' << v.pq.mean << '\n';
  }
}

TrainResult run_training(const ExperimentConfig& config, const ExperimentData& data, const TrainOptions& options) {
  config.validate();
  const int pid = config.data.primary_id;
  auto it = data.train.find(pid);
  if (it == data.train.end() || it->second.empty()) throw std::invalid_argument("training data has no primary samples");
  const std::size_t n_primary = it->second.size();

  std::map<int, std::size_t> sizes;
  for (const auto& [id, samples] : data.train)
    if (!samples.empty()) sizes[id] = samples.size();
  const DomainWeights weights = domain_weights(sizes, pid);

  auto model = build_model(config);
  BatchSampler sampler(data.train, pid, config.train.batch_size, config.train.seed ^ 0x5eedba7c4ULL,
                       config.train.primary_fraction);
  Trainer trainer(*model, config, weights);
  const std::size_t total_steps = config.train.epochs * sampler.batches_per_epoch();

  if (options.run_dir) {
    fs::create_directories(*options.run_dir);
    save_config(*options.run_dir / "config.ini", config);
  }

  TrainResult result;
  double best_dsc = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.train.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = learning_rate(epoch, n_primary, config.train);
    const auto batches = sampler.next_epoch();
    for (const auto& batch : batches) {
      rec.lambda = lambda_at(config.align.lambda, config.align.warmup_frac, step, total_steps);
      const auto v = trainer.step(batch, rec.lr, rec.lambda);
      ++step;
      rec.mean_loss.l_fine += v.l_fine;
      rec.mean_loss.l_cgrl += v.l_cgrl;
      rec.mean_loss.l_coarse += v.l_coarse;
      rec.mean_loss.total += v.total;
      rec.mean_loss.grad_norm += v.grad_norm;
    }
    const double nb = static_cast<double>(batches.size());
    for (double* x : {&rec.mean_loss.l_fine, &rec.mean_loss.l_cgrl, &rec.mean_loss.l_coarse, &rec.mean_loss.total,
                      &rec.mean_loss.grad_norm})
      *x /= nb;
    const auto val_reports = evaluate(*model, data.val, config.train.threshold);
    rec.val = summarize(val_reports);
    const double dsc = data.val.empty() ? static_cast<double>(epoch) : rec.val.dsc.mean;
    if (dsc > best_dsc) {
      best_dsc = dsc;
      result.best_epoch = epoch;
      result.best_params = model->params().snapshot();
      result.best_val = val_reports;
    }
    if (options.log) {
      *options.log << std::fixed << std::setprecision(4) << "epoch " << epoch << " lr " << std::setprecision(6) << rec.lr
                   << std::setprecision(4) << " loss " << rec.mean_loss.total << " (fine " << rec.mean_loss.l_fine
                   << ", cgrl " << rec.mean_loss.l_cgrl << ", coarse " << rec.mean_loss.l_coarse << ") val dsc "
                   << rec.val.dsc.mean << '\n'
                   << std::defaultfloat;
    }
    result.history.push_back(rec);
  }

  const NamedTensors last = model->params().snapshot();
  model->params().load(result.best_params);
  result.test = evaluate(*model, data.test, config.train.threshold);
  result.best_hash = hex64(checkpoint_hash(result.best_params));

  if (options.run_dir) {
    const fs::path& dir = *options.run_dir;
    std::ofstream metrics(dir / "metrics.csv");
    if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    write_history_csv(metrics, result.history);
    write_reports(dir / "val_report.csv", result.best_val);
    write_reports(dir / "test_report.csv", result.test);
    if (options.save_checkpoints) {
      save_checkpoint(dir / "best.ckpt", result.best_params);
      save_checkpoint(dir / "last.ckpt", last);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablations

Protocol parse_protocol(const std::string& s) {
  if (s == "alignment") return Protocol::Alignment;
  if (s == "decoder") return Protocol::Decoder;
  if (s == "aux-count") return Protocol::AuxCount;
  throw std::invalid_argument("unknown protocol '" + s + "' (expected alignment, decoder or aux-count)");
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::Alignment: return "alignment";
    case Protocol::Decoder: return "decoder";
    case Protocol::AuxCount: return "aux-count";
  }
  return "?";
}

std::vector<AblationArm> ablation_arms(Protocol protocol, const ExperimentConfig& base) {
  const auto aux = base.data.auxiliary_presets();
  const std::size_t bs = base.train.batch_size;
  const auto primary_per_batch = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(base.train.primary_fraction * static_cast<double>(bs))), 1,
      bs > 1 ? bs - 1 : 1);
  // Without auxiliary data every slot is primary; keep the primary count per
  // step equal to the mixed arms.
  auto primary_only = [&](ExperimentConfig c) {
    c.data.auxiliary.clear();
    c.train.batch_size = primary_per_batch;
    return c;
  };
  std::vector<AblationArm> arms;
  switch (protocol) {
    case Protocol::Alignment: {
      ExperimentConfig c = base;
      c.align.mode = AlignMode::None;
      arms.push_back({"primary-only", primary_only(c)});
      arms.push_back({"naive-mix", c});
      c.align.mode = AlignMode::Grl;
      arms.push_back({"grl", c});
      c.align.mode = AlignMode::Cgrl;
      arms.push_back({"cgrl", c});
      break;
    }
    case Protocol::Decoder: {
      ExperimentConfig c = base;
      c.model.decoder.mode = DecoderMode::Base;
      arms.push_back({"base", c});
      c.model.decoder.mode = DecoderMode::Hr;
      arms.push_back({"hr", c});
      break;
    }
    case Protocol::AuxCount: {
      ExperimentConfig c = base;
      c.align.mode = AlignMode::Cgrl;
      for (std::size_t k = 0; k <= aux.size(); ++k) {
        std::string list;
        for (std::size_t i = 0; i < k; ++i) list += (i ? "," : "") + aux[i];
        c.data.auxiliary = list;
        arms.push_back({"aux" + std::to_string(k), k == 0 ? primary_only(c) : c});
      }
      break;
    }
  }
  return arms;
}

const ArmRun& AblationTable::run(const std::string& arm, std::uint64_t seed) const {
  for (const auto& r : runs)
    if (r.arm == arm && r.seed == seed) return r;
  throw std::out_of_range("ablation: no run for arm " + arm + " seed " + std::to_string(seed));
}

double metric_value(const ReportSummary& s, const std::string& metric) {
  if (metric == "dsc") return s.dsc.mean;
  if (metric == "miou") return s.miou.mean;
  if (metric == "f1") return s.f1.mean;
  if (metric == "hd") return s.hd.mean;
  if (metric == "aji") return s.aji.mean;
  if (metric == "dq") return s.dq.mean;
  if (metric == "sq") return s.sq.mean;
  if (metric == "pq") return s.pq.mean;
  throw std::invalid_argument("unknown metric '" + metric + "'");
}

double AblationTable::mean(const std::string& arm, const std::string& metric, const std::string& split) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (r.arm != arm) continue;
    total += metric_value(split == "test" ? r.test : r.val, metric);
    ++n;
  }
  if (!n) throw std::out_of_range("ablation: unknown arm " + arm);
  return total / static_cast<double>(n);
}

AblationTable run_ablation(Protocol protocol, const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                           std::size_t jobs, std::ostream* log) {
  const auto arms = ablation_arms(protocol, base);
  AblationTable table;
  table.protocol = protocol;
  table.seeds = seeds;
  for (const auto& a : arms) table.arms.push_back(a.name);
  table.runs.resize(arms.size() * seeds.size());

  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::vector<std::exception_ptr> errors(table.runs.size());
  auto worker = [&]() {
    for (std::size_t task = next++; task < table.runs.size(); task = next++) {
      const auto& arm = arms[task / seeds.size()];
      const std::uint64_t seed = seeds[task % seeds.size()];
      try {
        ExperimentConfig c = arm.config;
        c.train.seed = seed;
        c.data.seed = base.data.seed + seed;
        const auto data = load_experiment_data(c);
        const auto result = run_training(c, data);
        ArmRun& r = table.runs[task];
        r.arm = arm.name;
        r.seed = seed;
        r.val = summarize(result.best_val);
        r.test = summarize(result.test);
        r.hash = result.best_hash;
        if (log) {
          std::lock_guard lock(log_mutex);
          *log << std::fixed << std::setprecision(4) << to_string(protocol) << ' ' << arm.name << " seed " << seed
               << ": val dsc " << r.val.dsc.mean << " hd " << r.val.hd.mean << ", test dsc " << r.test.dsc.mean
               << '\n'
               << std::defaultfloat;
        }
      } catch (...) {
        errors[task] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, table.runs.size()));
  std::vector<std::thread> threads;
  for (std::size_t i = 1; i < n_threads; ++i) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return table;
}

namespace {

const char* kMetrics[] = {"dsc", "miou", "f1", "hd", "aji", "dq", "sq", "pq"};

std::pair<double, double> seed_stats(const AblationTable& t, const std::string& arm, const std::string& metric,
                                     const std::string& split) {
  std::vector<double> v;
  for (const auto& r : t.runs)
    if (r.arm == arm) v.push_back(metric_value(split == "test" ? r.test : r.val, metric));
  double mean = 0.0, var = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0};
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_ablation_summary(std::ostream& os, const AblationTable& table, const std::string& split) {
  os << "arm";
  for (const char* m : kMetrics) os << ',' << m;
  os << '\n' << std::fixed << std::setprecision(4);
  for (const auto& arm : table.arms) {
    os << arm;
    for (const char* m : kMetrics) {
      auto [mean, sd] = seed_stats(table, arm, m, split);
      os << ',' << mean << "±" << sd;
    }
    os << '\n';
  }
  os << std::defaultfloat;
}

void write_ablation(const fs::path& dir, const AblationTable& table) {
  fs::create_directories(dir);
  {
    auto out = open_csv(dir / "runs.csv");
    out << "protocol,arm,seed";
    for (const char* split : {"val", "test"})
      for (const char* m : kMetrics) out << ',' << split << '_' << m;
    out << ",checkpoint_hash\n" << std::setprecision(17);
    for (const auto& r : table.runs) {
      out << to_string(table.protocol) << ',' << r.arm << ',' << r.seed;
      for (const auto* s : {&r.val, &r.test})
        for (const char* m : kMetrics) out << ',' << metric_value(*s, m);
      out << ',' << r.hash << '\n';
    }
  }
  for (const char* split : {"val", "test"}) {
    auto out = open_csv(dir / (std::string("summary_") + split + ".csv"));
    write_ablation_summary(out, table, split);
  }
  auto out = open_csv(dir / "wins.csv");
  out << "arm_a,arm_b,split,wins,losses,ties\n";
  for (const char* split : {"val", "test"})
    for (const auto& a : table.arms)
      for (const auto& b : table.arms) {
        if (a == b) continue;
        std::size_t w = 0, l = 0, t = 0;
        for (auto seed : table.seeds) {
          const double da = metric_value(std::string(split) == "test" ? table.run(a, seed).test : table.run(a, seed).val, "dsc");
          const double db = metric_value(std::string(split) == "test" ? table.run(b, seed).test : table.run(b, seed).val, "dsc");
          (da > db ? w : da < db ? l : t) += 1;
        }
        out << a << ',' << b << ',' << split << ',' << w << ',' << l << ',' << t << '\n';
      }
}

}  // namespace nf
