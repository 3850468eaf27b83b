#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "nucleiforge/config.hpp"
#include "nucleiforge/gradcheck_suites.hpp"
#include "nucleiforge/synth_data.hpp"
#include "nucleiforge/train.hpp"

namespace fs = std::filesystem;
using namespace nf;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

/// Raised for bad flag values detected after CLI parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Every config key exposed as `--section.key` on a subcommand.
struct Overrides {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    for (const auto& f : config_fields()) {
      options[f.name] = app->add_option("--" + f.name, values[f.name], f.help)->group("Config overrides");
    }
  }
  std::map<std::string, std::string> given() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, opt] : options)
      if (opt->count()) out[name] = values.at(name);
    return out;
  }
};

std::optional<std::uint64_t> seed_from(const CLI::Option* flag, std::uint64_t flag_value) {
  if (flag->count()) return flag_value;
  if (const char* env = std::getenv("NUCLEIFORGE_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::logic_error&) {
    }
    throw UsageError(std::string("NUCLEIFORGE_SEED is not an unsigned integer: '") + env + "'");
  }
  return std::nullopt;
}

ExperimentConfig resolve_config(const std::string& path, const Overrides& overrides) {
  ExperimentConfig config;
  try {
    if (!path.empty()) config = load_config(path);
    for (const auto& [key, value] : overrides.given()) set_config_value(config, key, value);
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  for (const auto& w : config_warnings(config, overrides.given())) std::cerr << "warning: " << w << '\n';
  return config;
}

void print_summary(std::ostream& os, const std::string& title, const std::vector<ImageReport>& reports) {
  const auto s = summarize(reports);
  os << title << " (" << reports.size() << " images)\n" << std::fixed << std::setprecision(4);
  const std::pair<const char*, const MetricStats*> rows[] = {{"DSC", &s.dsc}, {"mIoU", &s.miou}, {"F1", &s.f1},
                                                             {"HD", &s.hd},   {"AJI", &s.aji},   {"DQ", &s.dq},
                                                             {"SQ", &s.sq},   {"PQ", &s.pq}};
  for (const auto& [name, m] : rows) os << "  " << std::left << std::setw(5) << name << ' ' << m->mean << " ± " << m->std << '\n';
  os << std::defaultfloat;
}

std::unique_ptr<SegmentationModel> load_model(const fs::path& checkpoint, const std::string& config_path,
                                              ExperimentConfig& config, const Overrides* overrides) {
  if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  const fs::path cfg = config_path.empty() ? checkpoint.parent_path() / "config.ini" : fs::path(config_path);
  if (!fs::exists(cfg)) throw std::runtime_error("config not found: " + cfg.string() + " (pass --config)");
  config = resolve_config(cfg.string(), overrides ? *overrides : Overrides{});
  const auto tensors = load_checkpoint(checkpoint);
  auto model = std::make_unique<SegmentationModel>(config.model, config.train.seed);
  model->params().load(tensors);
  return model;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::vector<std::string> presets{"primary", "aux1", "aux2", "aux3"};
  std::string out;
  std::uint64_t seed = 0;
  std::size_t count = 20;
  std::size_t image_size = 64;
  CLI::Option* seed_opt = nullptr;
};

int run_gen_data(const GenDataArgs& a) {
  const auto seed = seed_from(a.seed_opt, a.seed).value_or(0);
  std::vector<DomainSpec> specs;
  try {
    for (const auto& p : a.presets) {
      specs.push_back(preset(p, a.image_size));
      if (a.image_size % 4 != 0) throw std::invalid_argument("--image-size must be divisible by 4");
    }
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path out = a.out;
  fs::create_directories(out);
  std::vector<ManifestEntry> rows;
  std::cout << "domain  preset    train  val  test\n";
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto samples = generate(specs[i], seed, a.count, a.image_size, i == 0);
    const auto written = write_samples(out, a.presets[i], samples);
    std::map<std::string, std::size_t> per_split;
    for (const auto& r : written) ++per_split[r.split];
    rows.insert(rows.end(), written.begin(), written.end());
    std::cout << std::left << std::setw(8) << specs[i].domain_id << std::setw(10) << a.presets[i] << std::setw(7)
              << per_split["train"] << std::setw(5) << per_split["val"] << per_split["test"] << '\n';
  }
  write_manifest(out / "manifest.tsv", rows);
  std::cout << "wrote " << rows.size() << " samples and " << (out / "manifest.tsv").string() << '\n';
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string out = "run";
  std::uint64_t seed = 0;
  bool quiet = false;
  CLI::Option* seed_opt = nullptr;
  Overrides overrides;
};

int run_train(const TrainArgs& a) {
  auto config = resolve_config(a.config, a.overrides);
  if (auto seed = seed_from(a.seed_opt, a.seed)) {
    config.train.seed = *seed;
    config.data.seed = *seed;
  }
  const auto data = load_experiment_data(config);
  TrainOptions options;
  options.run_dir = fs::path(a.out);
  options.log = a.quiet ? nullptr : &std::cout;
  const auto result = run_training(config, data, options);
  std::cout << "best epoch " << result.best_epoch << ", checkpoint " << (fs::path(a.out) / "best.ckpt").string()
            << " (hash " << result.best_hash << ")\n";
  print_summary(std::cout, "validation", result.best_val);
  print_summary(std::cout, "test", result.test);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, config, data, split = "test", out;
  bool jsonl = false;
};

int run_eval(const EvalArgs& a) {
  ExperimentConfig config;
  auto model = load_model(a.checkpoint, a.config, config, nullptr);
  if (!a.data.empty()) config.data.manifest = a.data;
  const auto data = load_experiment_data(config);
  const std::vector<DomainSample>* samples = nullptr;
  if (a.split == "val") samples = &data.val;
  if (a.split == "test") samples = &data.test;
  if (a.split == "train") samples = &data.train.at(config.data.primary_id);
  const auto reports = evaluate(*model, *samples, config.train.threshold);
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / ("eval_" + a.split) : fs::path(a.out);
  fs::create_directories(out);
  {
    std::ofstream csv(out / "report.csv");
    if (!csv) throw std::runtime_error("cannot write " + (out / "report.csv").string());
    write_report_csv(csv, reports);
  }
  if (a.jsonl) {
    std::ofstream js(out / "report.jsonl");
    if (!js) throw std::runtime_error("cannot write " + (out / "report.jsonl").string());
    write_report_jsonl(js, reports);
  }
  print_summary(std::cout, a.split + " split", reports);
  std::cout << "report: " << (out / "report.csv").string() << '\n';
  return 0;
}

struct AblateArgs {
  std::string protocol, config, out;
  std::size_t seeds = 5;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  Overrides overrides;
};

int run_ablate(const AblateArgs& a) {
  Protocol protocol;
  try {
    protocol = parse_protocol(a.protocol);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.seeds == 0) throw UsageError("--seeds must be at least 1");
  const auto config = resolve_config(a.config, a.overrides);
  const auto first = seed_from(a.seed_opt, a.seed).value_or(0);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(first + i);
  const auto table = run_ablation(protocol, config, seeds, a.jobs, &std::cerr);
  const fs::path out = a.out.empty() ? fs::path("ablation_" + a.protocol) : fs::path(a.out);
  write_ablation(out, table);
  save_config(out / "config.ini", config);
  std::cout << to_string(protocol) << ": " << table.arms.size() << " arms x " << seeds.size() << " seeds\n";
  for (const char* split : {"val", "test"}) {
    std::cout << "\n[" << split << "] mean±std over seeds\n";
    write_ablation_summary(std::cout, table, split);
  }
  std::cout << "\nresults in " << out.string() << '\n';
  return 0;
}

struct GradcheckArgs {
  std::string scope = "primitives";
  std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckArgs& a) {
  std::vector<SuiteEntry> entries;
  try {
    entries = run_gradcheck_suite(a.scope, a.seed);
  } catch (const std::invalid_argument& e) {
    if (std::string(e.what()).find("unknown gradcheck scope") != std::string::npos) throw UsageError(e.what());
    throw;
  }
  bool ok = true;
  std::cout << std::left << std::setw(48) << "op" << std::setw(14) << "worst_rel_err" << std::setw(10) << "tol"
            << "result\n";
  for (const auto& e : entries) {
    ok = ok && e.passed();
    std::cout << std::left << std::setw(48) << e.op << std::setw(14) << std::scientific << std::setprecision(3)
              << e.worst << std::setw(10) << e.tolerance << std::defaultfloat << (e.passed() ? "PASS" : "FAIL") << '\n';
  }
  std::cout << entries.size() << " checks, " << (ok ? "all passed" : "FAILURES") << '\n';
  return ok ? 0 : kRuntimeError;
}

struct InferArgs {
  std::string checkpoint, config, image, out = ".";
  bool resize = false;
};

int run_infer(const InferArgs& a) {
  ExperimentConfig config;
  auto model = load_model(a.checkpoint, a.config, config, nullptr);
  const Tensor image = read_ppm(a.image);
  const std::size_t h = image.dim(1), w = image.dim(2), s = config.model.encoder.image_size;
  Tensor input = image;
  if (h != s || w != s) {
    const bool divisible = h % 4 == 0 && w % 4 == 0;
    if (!a.resize) {
      throw std::runtime_error(a.image + ": size " + std::to_string(h) + "x" + std::to_string(w) +
                               (divisible ? "" : " is not divisible by 4 and") + " differs from the model input " +
                               std::to_string(s) + "x" + std::to_string(s) + "; pass --resize to resample");
    }
    std::cerr << "warning: resampling " << h << "x" << w << " to " << s << "x" << s << " and back\n";
    NoGradScope no_grad;
    input = resize_bilinear(image, s, s);
  }
  Tensor prob = model->predict(input);
  if (h != s || w != s) {
    NoGradScope no_grad;
    prob = resize_bilinear(prob, h, w);
  }
  Tensor mask(prob.shape());
  auto p = prob.data();
  auto m = mask.mutable_data();
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = p[i] > config.train.threshold ? 255.0 : 0.0;
  const fs::path out = a.out;
  fs::create_directories(out);
  const std::string stem = fs::path(a.image).stem().string();
  write_probability_pgm(out / (stem + "_prob.pgm"), prob);
  write_pgm(out / (stem + "_mask.pgm"), mask, 255);
  std::cout << "wrote " << (out / (stem + "_prob.pgm")).string() << " and " << (out / (stem + "_mask.pgm")).string()
            << " (" << h << "x" << w << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nucleiforge: multi-domain nuclei segmentation with conditional gradient reversal"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic nuclei domains with a manifest");
  gen_cmd->add_option("--preset", gen.presets, "Presets to generate (primary, aux1, aux2, aux3, pretrain)")
      ->delimiter(',')
      ->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen.seed_opt = gen_cmd->add_option("--seed", gen.seed, "Generation seed (falls back to NUCLEIFORGE_SEED)");
  gen_cmd->add_option("--count", gen.count, "Samples per preset")->capture_default_str();
  gen_cmd->add_option("--image-size", gen.image_size, "Image side in pixels")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a run directory");
  train_cmd->add_option("--config", train.config, "Experiment config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train.out, "Run directory")->capture_default_str();
  train.seed_opt = train_cmd->add_option("--seed", train.seed, "Sets train.seed and data.seed (falls back to NUCLEIFORGE_SEED)");
  train_cmd->add_flag("--quiet", train.quiet, "Suppress per-epoch progress");
  train.overrides.attach(train_cmd);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a data split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--config", ev.config, "Config file (default: config.ini next to the checkpoint)");
  eval_cmd->add_option("--data", ev.data, "Dataset manifest (default: the config's data section)");
  eval_cmd->add_option("--split", ev.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Report directory (default: next to the checkpoint)");
  eval_cmd->add_flag("--jsonl", ev.jsonl, "Also write report.jsonl");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation protocol across seeds");
  ablate_cmd->add_option("--protocol", ab.protocol, "alignment, decoder or aux-count")->required();
  ablate_cmd->add_option("--seeds", ab.seeds, "Number of seeds")->capture_default_str();
  ab.seed_opt = ablate_cmd->add_option("--seed", ab.seed, "First seed (falls back to NUCLEIFORGE_SEED)");
  ablate_cmd->add_option("--jobs", ab.jobs, "Parallel training contexts")->check(CLI::PositiveNumber)->capture_default_str();
  ablate_cmd->add_option("--config", ab.config, "Experiment config file")->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", ab.out, "Output directory (default: ablation_<protocol>)");
  ab.overrides.attach(ablate_cmd);

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gc_cmd->add_option("--scope", gc.scope, "primitives, cgrl, decoder or full")->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed, "Seed for random probe points")->capture_default_str();

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "Segment one PPM image");
  infer_cmd->add_option("--checkpoint", inf.checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--config", inf.config, "Config file (default: config.ini next to the checkpoint)");
  infer_cmd->add_option("--image", inf.image, "Input PPM image")->required();
  infer_cmd->add_option("--out", inf.out, "Output directory")->capture_default_str();
  infer_cmd->add_flag("--resize", inf.resize, "Resample images whose size differs from the model input");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(ev);
    if (*ablate_cmd) return run_ablate(ab);
    if (*gc_cmd) return run_gradcheck(gc);
    if (*infer_cmd) return run_infer(inf);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
