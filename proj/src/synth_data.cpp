#include "nucleiforge/synth_data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "nucleiforge/metrics.hpp"

namespace nf {

namespace fs = std::filesystem;

void DomainSpec::validate() const {
  auto fail = [&](const std::string& what) { throw std::invalid_argument("domain '" + name + "': " + what); };
  if (count_min < 1 || count_max < count_min) fail("need 1 <= count_min <= count_max");
  if (radius_min <= 0.0 || radius_max < radius_min) fail("need 0 < radius_min <= radius_max");
  if (ecc_min < 0.0 || ecc_max >= 1.0 || ecc_max < ecc_min) fail("need 0 <= ecc_min <= ecc_max < 1");
  for (const Rgb* c : {&foreground, &background})
    for (double v : *c)
      if (v < 0.0 || v > 1.0) fail("colour channels must lie in [0,1]");
  if (foreground_jitter < 0.0 || background_jitter < 0.0 || stain_jitter < 0.0 || texture < 0.0)
    fail("jitter and texture must be non-negative");
  if (noise_sigma < 0.0 || blur_sigma < 0.0) fail("noise and blur must be non-negative");
  if (max_overlap_iou < 0.0 || max_overlap_iou > 1.0) fail("max_overlap_iou must lie in [0,1]");
}

DomainSpec preset(const std::string& name, std::size_t image_size) {
  if (image_size == 0) throw std::invalid_argument("preset: image_size must be positive");
  const double s = static_cast<double>(image_size) / 64.0;
  auto count = [&](double c) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(c * s * s))); };
  DomainSpec d;
  d.name = name;
  if (name == "primary") {
    d.domain_id = 0;
    d.count_min = count(6);
    d.count_max = count(11);
    d.radius_min = 4.0 * s;
    d.radius_max = 6.5 * s;
    d.ecc_max = 0.6;
    d.foreground = {0.40, 0.22, 0.58};
    d.background = {0.90, 0.76, 0.84};
    d.noise_sigma = 0.03;
    d.blur_sigma = 0.7 * s;
  } else if (name == "aux1") {
    // Dense, small, dark nuclei under a bluer haematoxylin.
    d.domain_id = 1;
    d.count_min = count(9);
    d.count_max = count(15);
    d.radius_min = 3.5 * s;
    d.radius_max = 5.5 * s;
    d.ecc_max = 0.5;
    d.foreground = {0.22, 0.16, 0.50};
    d.background = {0.84, 0.78, 0.90};
    d.noise_sigma = 0.04;
    d.blur_sigma = 0.6 * s;
  } else if (name == "aux2") {
    // Frozen-section look: pale, washed-out stain, blurrier and noisier.
    d.domain_id = 2;
    d.count_min = count(4);
    d.count_max = count(8);
    d.radius_min = 5.0 * s;
    d.radius_max = 8.0 * s;
    d.ecc_min = 0.3;
    d.ecc_max = 0.75;
    d.foreground = {0.58, 0.40, 0.66};
    d.background = {0.95, 0.88, 0.90};
    d.texture = 0.06;
    d.noise_sigma = 0.06;
    d.blur_sigma = 1.0 * s;
  } else if (name == "aux3") {
    // Strong eosin: magenta-shifted nuclei on a saturated pink field.
    d.domain_id = 3;
    d.count_min = count(7);
    d.count_max = count(12);
    d.radius_min = 3.5 * s;
    d.radius_max = 6.0 * s;
    d.foreground = {0.52, 0.16, 0.48};
    d.background = {0.94, 0.64, 0.76};
    d.noise_sigma = 0.05;
    d.blur_sigma = 0.5 * s;
  } else if (name == "pretrain") {
    // Held-out generic task for the frozen base: unstained grey blobs with a
    // wide brightness and contrast range.
    d.domain_id = 4;
    d.count_min = count(4);
    d.count_max = count(14);
    d.radius_min = 3.0 * s;
    d.radius_max = 8.0 * s;
    d.ecc_max = 0.75;
    d.foreground = {0.30, 0.30, 0.30};
    d.foreground_jitter = 0.02;
    d.background = {0.70, 0.70, 0.70};
    d.background_jitter = 0.02;
    d.stain_jitter = 0.15;
    d.texture = 0.05;
    d.noise_sigma = 0.04;
    d.blur_sigma = 0.7 * s;
  } else {
    throw std::invalid_argument("unknown preset '" + name + "' (expected primary, aux1, aux2, aux3 or pretrain)");
  }
  return d;
}

std::vector<std::string> preset_names() { return {"primary", "aux1", "aux2", "aux3", "pretrain"}; }

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Ellipse {
  double cy, cx, a, b, cos_t, sin_t;

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = dx * cos_t + dy * sin_t;
    const double v = -dx * sin_t + dy * cos_t;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

/// Pixel indices whose centres fall inside the ellipse.
std::vector<std::size_t> rasterize(const Ellipse& e, std::size_t size) {
  std::vector<std::size_t> out;
  const auto lo = [&](double c) { return static_cast<std::size_t>(std::max(0.0, std::floor(c - e.a))); };
  const auto hi = [&](double c) {
    return static_cast<std::size_t>(std::min(static_cast<double>(size), std::ceil(c + e.a + 1.0)));
  };
  for (std::size_t y = lo(e.cy); y < hi(e.cy); ++y)
    for (std::size_t x = lo(e.cx); x < hi(e.cx); ++x)
      if (e.contains(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) out.push_back(y * size + x);
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k;
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    k.push_back(std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma)));
    total += k.back();
  }
  for (auto& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur of one H×W plane with mirrored borders.
void blur_plane(std::span<double> plane, std::size_t size, const std::vector<double>& kernel) {
  const auto r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto n = static_cast<std::ptrdiff_t>(size);
  auto reflect = [&](std::ptrdiff_t i) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return static_cast<std::size_t>(i);
  };
  std::vector<double> tmp(plane.size());
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -r; k <= r; ++k)
        acc += kernel[static_cast<std::size_t>(k + r)] * plane[y * size + reflect(static_cast<std::ptrdiff_t>(x) + k)];
      tmp[y * size + x] = acc;
    }
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -r; k <= r; ++k)
        acc += kernel[static_cast<std::size_t>(k + r)] * tmp[reflect(static_cast<std::ptrdiff_t>(y) + k) * size + x];
      plane[y * size + x] = acc;
    }
}

DomainSample generate_one(const DomainSpec& spec, std::uint64_t seed, std::size_t index, std::size_t size,
                          bool is_primary) {
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(spec.domain_id) * 0x632be59bd9b4e019ULL +
                                                   static_cast<std::uint64_t>(index))));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const std::size_t n = size * size;
  const double sz = static_cast<double>(size);

  // Per-image colours.
  Rgb bg, fg;
  for (int c = 0; c < 3; ++c) {
    const double shift = uniform(-spec.stain_jitter, spec.stain_jitter);
    bg[c] = spec.background[c] + shift + uniform(-spec.background_jitter, spec.background_jitter);
    fg[c] = spec.foreground[c] + shift;
  }

  // Geometry.
  const auto count = static_cast<std::size_t>(
      std::uniform_int_distribution<std::size_t>(spec.count_min, spec.count_max)(rng));
  std::vector<Ellipse> ellipses;
  std::vector<std::vector<std::size_t>> pixels;
  constexpr int kMaxTries = 100;
  for (std::size_t k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
      const double a = uniform(spec.radius_min, spec.radius_max);
      const double e = uniform(spec.ecc_min, spec.ecc_max);
      const double b = a * std::sqrt(1.0 - e * e);
      const double theta = uniform(0.0, std::numbers::pi);
      if (2.0 * a > sz) continue;
      Ellipse el{uniform(a, sz - a), uniform(a, sz - a), a, b, std::cos(theta), std::sin(theta)};
      auto px = rasterize(el, size);
      if (px.empty()) continue;
      bool ok = true;
      for (std::size_t j = 0; j < ellipses.size() && ok; ++j) {
        std::size_t inter = 0;
        for (auto p : px)
          inter += ellipses[j].contains(static_cast<double>(p / size) + 0.5, static_cast<double>(p % size) + 0.5);
        const double iou = static_cast<double>(inter) / static_cast<double>(px.size() + pixels[j].size() - inter);
        ok = iou <= spec.max_overlap_iou;
      }
      if (!ok) continue;
      ellipses.push_back(el);
      pixels.push_back(std::move(px));
      placed = true;
    }
    if (!placed) {
      throw PlacementError("domain '" + spec.name + "': could not place nucleus " + std::to_string(k + 1) + " of " +
                           std::to_string(count) + " after " + std::to_string(kMaxTries) + " attempts");
    }
  }

  // Later nuclei own overlapping pixels.
  std::vector<std::size_t> owner(n, 0);
  for (std::size_t k = 0; k < pixels.size(); ++k)
    for (auto p : pixels[k]) owner[p] = k + 1;

  // Smooth background texture.
  std::vector<double> texture(n, 0.0);
  if (spec.texture > 0.0) {
    for (int wave = 0; wave < 3; ++wave) {
      const double fy = uniform(0.5, 3.0) * 2.0 * std::numbers::pi / sz;
      const double fx = uniform(0.5, 3.0) * 2.0 * std::numbers::pi / sz;
      const double phase = uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < n; ++i)
        texture[i] += std::sin(fy * static_cast<double>(i / size) + fx * static_cast<double>(i % size) + phase) / 3.0;
    }
  }
  std::vector<Rgb> nucleus_colour(pixels.size());
  for (auto& c : nucleus_colour)
    for (int ch = 0; ch < 3; ++ch) c[ch] = fg[ch] + uniform(-spec.foreground_jitter, spec.foreground_jitter);

  Tensor image({3, size, size});
  auto img = image.mutable_data();
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i)
      img[c * n + i] = owner[i] ? nucleus_colour[owner[i] - 1][c] : bg[c] + spec.texture * texture[i];
  if (spec.blur_sigma > 0.0) {
    const auto kernel = gaussian_kernel(spec.blur_sigma);
    for (std::size_t c = 0; c < 3; ++c) blur_plane(img.subspan(c * n, n), size, kernel);
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& v : img) v = std::clamp(v + spec.noise_sigma * noise(rng), 0.0, 1.0);

  // Compact labels so that surviving instances are numbered 1..K.
  std::vector<std::size_t> remap(pixels.size() + 1, 0);
  std::size_t next = 1;
  for (std::size_t i = 0; i < n; ++i)
    if (owner[i] && !remap[owner[i]]) remap[owner[i]] = next++;

  DomainSample s;
  s.id = spec.name + "_" + std::to_string(index);
  s.image = std::move(image);
  s.mask = Tensor({1, size, size});
  s.instances = Tensor({1, size, size});
  auto m = s.mask.mutable_data();
  auto inst = s.instances.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    inst[i] = static_cast<double>(remap[owner[i]]);
    m[i] = owner[i] ? 1.0 : 0.0;
  }
  s.label = {spec.domain_id, is_primary};
  return s;
}

}  // namespace

std::vector<DomainSample> generate(const DomainSpec& spec, std::uint64_t seed, std::size_t count,
                                   std::size_t image_size, bool is_primary) {
  spec.validate();
  if (image_size == 0 || image_size % 4 != 0) {
    throw std::invalid_argument("generate: image size must be a positive multiple of 4");
  }
  std::vector<DomainSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_one(spec, seed, i, image_size, is_primary));
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0;
  int maxval = 0;
};

PnmHeader read_header(std::istream& in, const fs::path& path) {
  PnmHeader h;
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    if (t.empty()) throw std::runtime_error(path.string() + ": truncated netpbm header");
    return t;
  };
  h.magic = token();
  try {
    h.width = std::stoul(token());
    h.height = std::stoul(token());
    h.maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw std::runtime_error(path.string() + ": malformed netpbm header");
  }
  if (h.maxval <= 0 || h.maxval > 65535) throw std::runtime_error(path.string() + ": bad maxval");
  return h;
}

std::vector<int> read_samples(std::istream& in, std::size_t count, int maxval, const fs::path& path) {
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw std::runtime_error(path.string() + ": truncated pixel data");
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = bytes == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
  return out;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

void write_bytes(std::ofstream& out, const std::vector<unsigned char>& bytes, const fs::path& path) {
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected 3×H×W, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2), n = h * w;
  auto out = open_out(path);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> bytes(3 * n);
  auto v = image.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      bytes[3 * i + c] = static_cast<unsigned char>(std::lround(std::clamp(v[c * n + i], 0.0, 1.0) * 255.0));
  write_bytes(out, bytes, path);
}

Tensor read_ppm(const fs::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P6") throw std::runtime_error(path.string() + ": not a binary PPM (P6)");
  const std::size_t n = h.width * h.height;
  const auto samples = read_samples(in, 3 * n, h.maxval, path);
  Tensor image({3, h.height, h.width});
  auto v = image.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * n + i] = static_cast<double>(samples[3 * i + c]) / h.maxval;
  return image;
}

void write_pgm(const fs::path& path, const Tensor& plane, int maxval) {
  if (maxval <= 0 || maxval > 65535) throw std::invalid_argument("write_pgm: maxval must be in 1..65535");
  const std::size_t h = plane.dim(plane.rank() - 2), w = plane.dim(plane.rank() - 1);
  if (plane.size() != h * w) throw ShapeError("write_pgm: expected H×W or 1×H×W, got " + shape_str(plane.shape()));
  auto out = open_out(path);
  out << "P5\n" << w << ' ' << h << '\n' << maxval << '\n';
  const bool wide = maxval > 255;
  std::vector<unsigned char> bytes(plane.size() * (wide ? 2 : 1));
  auto v = plane.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto s = static_cast<unsigned>(std::clamp<long>(std::lround(v[i]), 0, maxval));
    if (wide) {
      bytes[2 * i] = static_cast<unsigned char>(s >> 8);
      bytes[2 * i + 1] = static_cast<unsigned char>(s & 0xff);
    } else {
      bytes[i] = static_cast<unsigned char>(s);
    }
  }
  write_bytes(out, bytes, path);
}

Tensor read_pgm(const fs::path& path, int* maxval) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P5") throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
  const auto samples = read_samples(in, h.width * h.height, h.maxval, path);
  Tensor plane({1, h.height, h.width});
  auto v = plane.mutable_data();
  for (std::size_t i = 0; i < samples.size(); ++i) v[i] = samples[i];
  if (maxval) *maxval = h.maxval;
  return plane;
}

void write_probability_pgm(const fs::path& path, const Tensor& prob) {
  Tensor scaled(prob.shape());
  auto src = prob.data();
  auto dst = scaled.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::clamp(src[i], 0.0, 1.0) * 255.0;
  write_pgm(path, scaled, 255);
}

DomainSample load_sample(const fs::path& image_path, const fs::path& mask_path, DomainLabel label) {
  DomainSample s;
  s.id = image_path.stem().string();
  s.image = read_ppm(image_path);
  int maxval = 0;
  const Tensor raw = read_pgm(mask_path, &maxval);
  const std::size_t h = s.image.dim(1), w = s.image.dim(2);
  if (h != w || h % 4 != 0) {
    throw std::runtime_error(image_path.string() + ": unsupported size " + std::to_string(h) + "x" + std::to_string(w) +
                             " (need square, divisible by 4)");
  }
  if (raw.dim(1) != h || raw.dim(2) != w) throw std::runtime_error(mask_path.string() + ": size differs from its image");
  s.mask = Tensor({1, h, w});
  auto m = s.mask.mutable_data();
  auto r = raw.data();
  for (std::size_t i = 0; i < r.size(); ++i) m[i] = r[i] >= 0.5 * maxval ? 1.0 : 0.0;

  auto inst_path = mask_path;
  std::string stem = mask_path.stem().string();
  if (stem.size() > 5 && stem.ends_with("_mask")) stem.resize(stem.size() - 5);
  inst_path.replace_filename(stem + "_inst.pgm");
  if (fs::exists(inst_path)) {
    s.instances = read_pgm(inst_path);
    if (s.instances.shape() != s.mask.shape()) throw std::runtime_error(inst_path.string() + ": size differs from its mask");
    auto inst = s.instances.data();
    for (std::size_t i = 0; i < inst.size(); ++i)
      if ((inst[i] > 0.0) != (m[i] > 0.0)) throw std::runtime_error(inst_path.string() + ": disagrees with its mask");
  } else {
    s.instances = label_components(s.mask);
  }
  s.label = label;
  return s;
}

std::vector<DomainSample> load_pairs(const fs::path& dir, DomainLabel label) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") images.push_back(entry.path());
  std::sort(images.begin(), images.end());
  std::vector<DomainSample> out;
  for (const auto& image : images) {
    auto mask = image;
    mask.replace_filename(image.stem().string() + "_mask.pgm");
    if (!fs::exists(mask)) throw std::runtime_error("missing mask partner for " + image.string() + ": " + mask.string());
    out.push_back(load_sample(image, mask, label));
  }
  return out;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() < 3 || cols.size() > 4) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 3 or 4 tab-separated columns");
    }
    ManifestEntry e;
    try {
      e.domain_id = std::stoi(cols[0]);
    } catch (const std::logic_error&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad domain id '" + cols[0] + "'");
    }
    e.image = resolve(cols[1]);
    e.mask = resolve(cols[2]);
    if (cols.size() == 4) e.split = cols[3];
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& e : entries)
    out << e.domain_id << '\t' << e.image.generic_string() << '\t' << e.mask.generic_string() << '\t' << e.split << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Datasets load_manifest_split(const fs::path& manifest, const std::string& split, int primary_id) {
  Datasets out;
  for (const auto& e : read_manifest(manifest)) {
    if (e.split != split) continue;
    out[e.domain_id].push_back(load_sample(e.image, e.mask, {e.domain_id, e.domain_id == primary_id}));
  }
  return out;
}

std::string split_for(std::size_t index, std::size_t count) {
  const auto n_train = static_cast<std::size_t>(std::lround(0.7 * static_cast<double>(count)));
  const auto n_val = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(count)));
  if (index < n_train) return "train";
  if (index < n_train + n_val) return "val";
  return "test";
}

std::vector<ManifestEntry> write_samples(const fs::path& dir, const std::string& name,
                                         const std::vector<DomainSample>& samples) {
  fs::create_directories(dir);
  std::vector<ManifestEntry> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string stem = name + "_" + std::to_string(i);
    write_ppm(dir / (stem + ".ppm"), s.image);
    Tensor mask255(s.mask.shape());
    auto src = s.mask.data();
    auto dst = mask255.mutable_data();
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = src[k] * 255.0;
    write_pgm(dir / (stem + "_mask.pgm"), mask255, 255);
    write_pgm(dir / (stem + "_inst.pgm"), s.instances, 65535);
    rows.push_back({s.label.domain_id, stem + ".ppm", stem + "_mask.pgm", split_for(i, samples.size())});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sampling

BatchSampler::BatchSampler(const Datasets& datasets, int primary_id, std::size_t batch_size, std::uint64_t seed,
                           double primary_fraction)
    : datasets_(datasets), primary_id_(primary_id), batch_size_(batch_size), rng_(seed) {
  auto it = datasets_.find(primary_id_);
  if (it == datasets_.end() || it->second.empty()) throw std::invalid_argument("sampler: empty primary dataset");
  for (const auto& [id, samples] : datasets_) {
    if (id == primary_id_ || samples.empty()) continue;
    aux_ids_.push_back(id);
  }
  if (batch_size_ == 0) throw std::invalid_argument("sampler: batch size must be positive");
  if (aux_ids_.empty()) {
    primary_per_batch_ = batch_size_;
  } else {
    if (batch_size_ < 2) throw std::invalid_argument("sampler: batch size must be >= 2 with auxiliary domains");
    if (primary_fraction <= 0.0 || primary_fraction >= 1.0) {
      throw std::invalid_argument("sampler: primary fraction must lie in (0,1) with auxiliary domains");
    }
    const auto p = static_cast<std::size_t>(std::lround(primary_fraction * static_cast<double>(batch_size_)));
    primary_per_batch_ = std::clamp<std::size_t>(p, 1, batch_size_ - 1);
  }
}

std::size_t BatchSampler::batches_per_epoch() const {
  const std::size_t n = datasets_.at(primary_id_).size();
  return (n + primary_per_batch_ - 1) / primary_per_batch_;
}

const DomainSample* BatchSampler::next_aux() {
  const int id = aux_ids_[std::uniform_int_distribution<std::size_t>(0, aux_ids_.size() - 1)(rng_)];
  auto& queue = aux_queues_[id];
  const auto& samples = datasets_.at(id);
  if (queue.empty()) {
    queue.resize(samples.size());
    for (std::size_t i = 0; i < queue.size(); ++i) queue[i] = queue.size() - 1 - i;
    std::shuffle(queue.begin(), queue.end(), rng_);
  }
  const std::size_t index = queue.back();
  queue.pop_back();
  return &samples[index];
}

std::vector<std::vector<const DomainSample*>> BatchSampler::next_epoch() {
  const auto& primary = datasets_.at(primary_id_);
  std::vector<std::size_t> order(primary.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng_);
  std::vector<std::vector<const DomainSample*>> batches;
  for (std::size_t start = 0; start < order.size(); start += primary_per_batch_) {
    std::vector<const DomainSample*> batch;
    for (std::size_t i = start; i < std::min(order.size(), start + primary_per_batch_); ++i)
      batch.push_back(&primary[order[i]]);
    if (!aux_ids_.empty())
      for (std::size_t k = primary_per_batch_; k < batch_size_; ++k) batch.push_back(next_aux());
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace nf
