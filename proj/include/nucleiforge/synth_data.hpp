#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "nucleiforge/domain_align.hpp"
#include "nucleiforge/tensor.hpp"

namespace nf {

using Rgb = std::array<double, 3>;

/// Appearance and geometry of one synthetic nuclei domain. Radii are ellipse
/// semi-major axes in pixels; the semi-minor axis is a·sqrt(1 - e²).
struct DomainSpec {
  int domain_id = 0;
  std::string name = "primary";
  std::size_t count_min = 4;
  std::size_t count_max = 8;
  double radius_min = 3.0;
  double radius_max = 5.0;
  double ecc_min = 0.0;
  double ecc_max = 0.6;
  Rgb foreground{0.35, 0.20, 0.55};
  double foreground_jitter = 0.03;  // per nucleus, per channel
  Rgb background{0.92, 0.78, 0.86};
  double background_jitter = 0.03;  // per image, per channel
  double stain_jitter = 0.0;        // per image shift shared by both colours
  double texture = 0.04;            // amplitude of smooth background texture
  double noise_sigma = 0.02;
  double blur_sigma = 0.6;
  double max_overlap_iou = 0.1;

  void validate() const;
};

class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DomainSample {
  std::string id;
  Tensor image;      // 3×H×W in [0,1]
  Tensor mask;       // 1×H×W, 0/1
  Tensor instances;  // 1×H×W, labels 1..K, 0 background
  DomainLabel label;
};

using Datasets = std::map<int, std::vector<DomainSample>>;

/// Built-in presets for a square canvas of `image_size` pixels:
/// "primary", "aux1", "aux2", "aux3" (domain ids 0..3) and "pretrain".
DomainSpec preset(const std::string& name, std::size_t image_size);
std::vector<std::string> preset_names();

/// Deterministic in (spec, seed, image_size). Sample i only depends on
/// (seed, domain_id, i).
std::vector<DomainSample> generate(const DomainSpec& spec, std::uint64_t seed, std::size_t count,
                                   std::size_t image_size, bool is_primary = true);

// Netpbm IO. Images are P6 8-bit, masks P5 8-bit, instance maps P5 16-bit.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& plane, int maxval);
/// Raw sample values (not normalized) as 1×H×W, plus the file's maxval.
Tensor read_pgm(const std::filesystem::path& path, int* maxval = nullptr);

/// Probability map in [0,1] -> 8-bit PGM values round(255·p).
void write_probability_pgm(const std::filesystem::path& path, const Tensor& prob);

/// Mask binarized at 0.5 of maxval; instances from a sibling `<stem>_inst.pgm`
/// when present, else 8-connected components of the mask.
DomainSample load_sample(const std::filesystem::path& image, const std::filesystem::path& mask,
                         DomainLabel label);

/// Loads every `<stem>.ppm` with its `<stem>_mask.pgm` partner, sorted by stem.
std::vector<DomainSample> load_pairs(const std::filesystem::path& dir, DomainLabel label = {});

struct ManifestEntry {
  int domain_id = 0;
  std::filesystem::path image;
  std::filesystem::path mask;
  std::string split = "train";
};

/// Lines `domain_id<TAB>image<TAB>mask[<TAB>split]`; relative paths resolve
/// against the manifest's directory. '#' starts a comment line.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Samples of one split grouped by domain.
Datasets load_manifest_split(const std::filesystem::path& manifest, const std::string& split,
                             int primary_id);

/// Fixed 70/10/20 split by position: "train", "val" or "test".
std::string split_for(std::size_t index, std::size_t count);

/// Writes samples as `<name>_<i>.ppm`, `_mask.pgm`, `_inst.pgm` under `dir`
/// and returns manifest rows with paths relative to `dir`.
std::vector<ManifestEntry> write_samples(const std::filesystem::path& dir, const std::string& name,
                                         const std::vector<DomainSample>& samples);

/// Mixed-domain batches. Every batch holds at least one primary sample and,
/// when auxiliary data exists, at least one auxiliary sample. Primary samples
/// are drawn without replacement within an epoch; each auxiliary slot picks an
/// auxiliary domain uniformly and takes the next item of its shuffled queue.
class BatchSampler {
 public:
  BatchSampler(const Datasets& datasets, int primary_id, std::size_t batch_size, std::uint64_t seed,
               double primary_fraction = 0.5);

  std::size_t primary_per_batch() const { return primary_per_batch_; }
  std::size_t batches_per_epoch() const;
  std::vector<std::vector<const DomainSample*>> next_epoch();

 private:
  const DomainSample* next_aux();

  const Datasets& datasets_;
  int primary_id_;
  std::size_t batch_size_;
  std::size_t primary_per_batch_;
  std::vector<int> aux_ids_;
  std::map<int, std::vector<std::size_t>> aux_queues_;
  std::mt19937_64 rng_;
};

}  // namespace nf
