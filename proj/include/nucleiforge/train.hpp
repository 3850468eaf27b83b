#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nucleiforge/config.hpp"
#include "nucleiforge/metrics.hpp"
#include "nucleiforge/model.hpp"
#include "nucleiforge/synth_data.hpp"

namespace nf {

/// 0.5·BCE(sigmoid(logits), mask) + 0.5·soft-Dice(sigmoid(logits), mask).
Tensor fine_loss(const Tensor& logits, const Tensor& mask);
/// Same composite on probabilities, against the mask brought to the coarse
/// resolution (area average, then >= 0.5).
Tensor coarse_loss(const Tensor& coarse_prob, const Tensor& mask);
Tensor downsample_mask(const Tensor& mask, std::size_t size);

struct LossBundle {
  Tensor l_fine;
  Tensor l_cgrl;
  Tensor l_coarse;
  Tensor total;
};

LossBundle combine_losses(const Tensor& l_fine, const Tensor& l_cgrl, const Tensor& l_coarse, double alpha,
                          double beta);

/// lr = lr_ref · (lr_images / n_primary) · decay^epoch.
double learning_rate(std::size_t epoch, std::size_t n_primary, const TrainConfig& config);

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// One bias-corrected update of every parameter with a gradient in `grads`.
  /// Gradients are rescaled to global norm `clip_norm` when it is exceeded
  /// (0 disables). Returns the pre-clip global norm.
  double step(const std::vector<Parameter*>& params, const GradStore& grads, double lr, double clip_norm = 0.0);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepValues {
  double l_fine = 0.0, l_cgrl = 0.0, l_coarse = 0.0, total = 0.0, grad_norm = 0.0;
};

/// Losses of one batch on the active tape.
LossBundle batch_losses(const SegmentationModel& model, const std::vector<const DomainSample*>& batch,
                        const ExperimentConfig& config, const DomainWeights& weights, double lambda);

class Trainer {
 public:
  Trainer(SegmentationModel& model, const ExperimentConfig& config, DomainWeights weights);

  /// Forward, loss assembly, backward and an Adam update of the trainable set.
  StepValues step(const std::vector<const DomainSample*>& batch, double lr, double lambda);
  std::size_t steps() const { return adam_.steps(); }

 private:
  SegmentationModel& model_;
  const ExperimentConfig& config_;
  DomainWeights weights_;
  Adam adam_;
};

/// Per-image reports on a tape-free forward at native resolution.
std::vector<ImageReport> evaluate(const SegmentationModel& model, const std::vector<DomainSample>& samples,
                                  double threshold = 0.5);

struct ExperimentData {
  Datasets train;  // by domain id
  std::vector<DomainSample> val;   // primary domain
  std::vector<DomainSample> test;  // primary domain
};

/// Loads the manifest (train/val/test rows) or generates the synthetic presets.
ExperimentData load_experiment_data(const ExperimentConfig& config);

/// Base weights fitted on the "pretrain" preset, standing in for a publicly
/// pretrained segmenter. Cached per model/pretraining settings.
NamedTensors pretrained_base(const ModelConfig& model, const TrainConfig& train);
/// Fresh model seeded by train.seed whose base parameters come from
/// pretrained_base().
std::unique_ptr<SegmentationModel> build_model(const ExperimentConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double lambda = 0.0;
  StepValues mean_loss;
  ReportSummary val;
};

struct TrainOptions {
  std::optional<std::filesystem::path> run_dir;
  bool save_checkpoints = true;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  NamedTensors best_params;
  std::vector<ImageReport> best_val;
  std::vector<ImageReport> test;
  std::string best_hash;
};

TrainResult run_training(const ExperimentConfig& config, const ExperimentData& data, const TrainOptions& options = {});

void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history);

enum class Protocol { Alignment, Decoder, AuxCount };
Protocol parse_protocol(const std::string& s);
std::string to_string(Protocol p);

struct AblationArm {
  std::string name;
  ExperimentConfig config;
};

/// Arms of a protocol derived from `base`; every arm shares data and seeds.
std::vector<AblationArm> ablation_arms(Protocol protocol, const ExperimentConfig& base);

struct ArmRun {
  std::string arm;
  std::uint64_t seed = 0;
  ReportSummary val;
  ReportSummary test;
  std::string hash;
};

struct AblationTable {
  Protocol protocol = Protocol::Alignment;
  std::vector<std::string> arms;
  std::vector<std::uint64_t> seeds;
  std::vector<ArmRun> runs;  // arm-major

  const ArmRun& run(const std::string& arm, std::uint64_t seed) const;
  /// Mean over seeds of one metric of the selected split ("val" or "test").
  double mean(const std::string& arm, const std::string& metric, const std::string& split = "val") const;
};

/// Seed s runs with train.seed = s and data.seed = base data seed + s.
AblationTable run_ablation(Protocol protocol, const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                           std::size_t jobs = 1, std::ostream* log = nullptr);

/// runs.csv, summary.csv (mean±std per metric) and wins.csv (pairwise DSC
/// wins/losses across seeds).
void write_ablation(const std::filesystem::path& dir, const AblationTable& table);
void write_ablation_summary(std::ostream& os, const AblationTable& table, const std::string& split);

double metric_value(const ReportSummary& s, const std::string& metric);

}  // namespace nf
