#include "nucleiforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>

#include "json.hpp"

namespace nf {

namespace {

struct Plane {
  std::size_t h = 0, w = 0;
  std::span<const double> v;
};

Plane plane_of(const char* kind, const Tensor& t) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1), t.data()};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t.data()};
  throw ShapeError(std::string(kind) + ": expected H×W or 1×H×W, got " + shape_str(t.shape()));
}

std::pair<Plane, Plane> planes(const char* kind, const Tensor& a, const Tensor& b) {
  auto pa = plane_of(kind, a);
  auto pb = plane_of(kind, b);
  if (pa.h != pb.h || pa.w != pb.w) {
    throw ShapeError(std::string(kind) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return {pa, pb};
}

/// Pairwise overlap statistics between two instance maps.
struct Overlaps {
  std::vector<std::size_t> pred_area, gt_area;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> inter;  // (gt, pred) -> count

  double iou(std::size_t g, std::size_t p) const {
    auto it = inter.find({g, p});
    if (it == inter.end()) return 0.0;
    const double i = static_cast<double>(it->second);
    return i / (static_cast<double>(gt_area[g] + pred_area[p]) - i);
  }
  std::vector<std::size_t> labels(const std::vector<std::size_t>& area) const {
    std::vector<std::size_t> out;
    for (std::size_t l = 1; l < area.size(); ++l)
      if (area[l]) out.push_back(l);
    return out;
  }
};

Overlaps overlaps(const char* kind, const Tensor& pred, const Tensor& gt) {
  auto [pp, pg] = planes(kind, pred, gt);
  Overlaps o;
  auto label = [](double v) { return v > 0.0 ? static_cast<std::size_t>(std::llround(v)) : std::size_t{0}; };
  std::size_t max_p = 0, max_g = 0;
  for (std::size_t i = 0; i < pp.v.size(); ++i) {
    max_p = std::max(max_p, label(pp.v[i]));
    max_g = std::max(max_g, label(pg.v[i]));
  }
  o.pred_area.assign(max_p + 1, 0);
  o.gt_area.assign(max_g + 1, 0);
  for (std::size_t i = 0; i < pp.v.size(); ++i) {
    const auto p = label(pp.v[i]);
    const auto g = label(pg.v[i]);
    ++o.pred_area[p];
    ++o.gt_area[g];
    if (p && g) ++o.inter[{g, p}];
  }
  return o;
}

/// Squared Euclidean distance transform to the nearest site (Felzenszwalb &
/// Huttenlocher lower envelope of parabolas), exact on integer grids.
std::vector<double> squared_distance_to(const std::vector<bool>& sites, std::size_t h, std::size_t w) {
  constexpr double kInf = 1e20;
  std::vector<double> f(h * w);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = sites[i] ? 0.0 : kInf;
  const std::size_t n_max = std::max(h, w);
  std::vector<double> d(n_max), z(n_max + 1), line(n_max);
  std::vector<std::size_t> v(n_max);
  auto transform_1d = [&](std::size_t n) {
    std::size_t k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (std::size_t q = 1; q < n; ++q) {
      double s;
      while (true) {
        const double qd = static_cast<double>(q), vd = static_cast<double>(v[k]);
        s = ((line[q] + qd * qd) - (line[v[k]] + vd * vd)) / (2.0 * qd - 2.0 * vd);
        if (s <= z[k] && k > 0) {
          --k;
          continue;
        }
        if (s <= z[k]) {
          // k == 0: the new parabola dominates everywhere to the left.
          v[0] = q;
          z[0] = -kInf;
          z[1] = kInf;
          break;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
        break;
      }
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
      while (z[k + 1] < static_cast<double>(q)) ++k;
      const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
      d[q] = diff * diff + line[v[k]];
    }
  };
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) line[y] = f[y * w + x];
    transform_1d(h);
    for (std::size_t y = 0; y < h; ++y) f[y * w + x] = d[y];
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) line[x] = f[y * w + x];
    transform_1d(w);
    for (std::size_t x = 0; x < w; ++x) f[y * w + x] = d[x];
  }
  return f;
}

}  // namespace

double dice(const Tensor& pred, const Tensor& gt) {
  auto [p, g] = planes("dice", pred, gt);
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < p.v.size(); ++i) {
    const bool a = p.v[i] > 0.0, b = g.v[i] > 0.0;
    inter += a && b;
    np += a;
    ng += b;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

double miou(const Tensor& pred, const Tensor& gt) {
  auto [p, g] = planes("miou", pred, gt);
  std::size_t inter[2] = {0, 0}, uni[2] = {0, 0};
  for (std::size_t i = 0; i < p.v.size(); ++i) {
    const bool a = p.v[i] > 0.0, b = g.v[i] > 0.0;
    inter[1] += a && b;
    uni[1] += a || b;
    inter[0] += !a && !b;
    uni[0] += !a || !b;
  }
  double total = 0.0;
  for (int c = 0; c < 2; ++c)
    total += uni[c] == 0 ? 1.0 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
  return total / 2.0;
}

double object_f1(const Tensor& pred_instances, const Tensor& gt_instances, double iou_thresh) {
  auto o = overlaps("object_f1", pred_instances, gt_instances);
  const auto gts = o.labels(o.gt_area);
  const auto preds = o.labels(o.pred_area);
  if (gts.empty() && preds.empty()) return 1.0;
  struct Pair {
    double iou;
    std::size_t g, p;
  };
  std::vector<Pair> pairs;
  for (const auto& [key, count] : o.inter) {
    const double v = o.iou(key.first, key.second);
    if (v > iou_thresh) pairs.push_back({v, key.first, key.second});
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::set<std::size_t> used_g, used_p;
  std::size_t tp = 0;
  for (const auto& pr : pairs) {
    if (used_g.count(pr.g) || used_p.count(pr.p)) continue;
    used_g.insert(pr.g);
    used_p.insert(pr.p);
    ++tp;
  }
  const double fp = static_cast<double>(preds.size() - tp);
  const double fn = static_cast<double>(gts.size() - tp);
  const double t = static_cast<double>(tp);
  return 2.0 * t / (2.0 * t + fp + fn);
}

std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const Tensor& mask) {
  auto m = plane_of("boundary", mask);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  auto fg = [&](std::size_t y, std::size_t x) { return m.v[y * m.w + x] > 0.0; };
  for (std::size_t y = 0; y < m.h; ++y) {
    for (std::size_t x = 0; x < m.w; ++x) {
      if (!fg(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.h || x + 1 == m.w;
      if (edge || !fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)) out.emplace_back(y, x);
    }
  }
  return out;
}

std::optional<double> hausdorff(const Tensor& pred, const Tensor& gt) {
  auto [p, g] = planes("hausdorff", pred, gt);
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  if (bp.empty() || bg.empty()) return std::nullopt;
  auto directed = [&](const std::vector<std::pair<std::size_t, std::size_t>>& from,
                      const std::vector<std::pair<std::size_t, std::size_t>>& to) {
    std::vector<bool> sites(p.h * p.w, false);
    for (auto [y, x] : to) sites[y * p.w + x] = true;
    auto dt = squared_distance_to(sites, p.h, p.w);
    double worst = 0.0;
    for (auto [y, x] : from) worst = std::max(worst, dt[y * p.w + x]);
    return worst;
  };
  return std::sqrt(std::max(directed(bp, bg), directed(bg, bp)));
}

double aji(const Tensor& pred_instances, const Tensor& gt_instances) {
  auto o = overlaps("aji", pred_instances, gt_instances);
  const auto gts = o.labels(o.gt_area);
  const auto preds = o.labels(o.pred_area);
  if (gts.empty() && preds.empty()) return 1.0;
  double inter_sum = 0.0, union_sum = 0.0;
  std::set<std::size_t> used;
  for (auto g : gts) {
    std::size_t best = 0;
    double best_iou = 0.0;
    for (auto it = o.inter.lower_bound({g, 0}); it != o.inter.end() && it->first.first == g; ++it) {
      const double v = o.iou(g, it->first.second);
      if (v > best_iou) {
        best_iou = v;
        best = it->first.second;
      }
    }
    if (!best) {
      union_sum += static_cast<double>(o.gt_area[g]);
      continue;
    }
    const double i = static_cast<double>(o.inter.at({g, best}));
    inter_sum += i;
    union_sum += static_cast<double>(o.gt_area[g] + o.pred_area[best]) - i;
    used.insert(best);
  }
  for (auto p : preds)
    if (!used.count(p)) union_sum += static_cast<double>(o.pred_area[p]);
  return union_sum == 0.0 ? 0.0 : inter_sum / union_sum;
}

PanopticResult panoptic(const Tensor& pred_instances, const Tensor& gt_instances) {
  auto o = overlaps("panoptic", pred_instances, gt_instances);
  const auto gts = o.labels(o.gt_area);
  const auto preds = o.labels(o.pred_area);
  if (gts.empty() && preds.empty()) return {1.0, 1.0, 1.0};
  std::size_t tp = 0;
  double iou_sum = 0.0;
  for (const auto& [key, count] : o.inter) {
    const double v = o.iou(key.first, key.second);
    if (v > 0.5) {
      ++tp;
      iou_sum += v;
    }
  }
  const double t = static_cast<double>(tp);
  const double fp = static_cast<double>(preds.size() - tp);
  const double fn = static_cast<double>(gts.size() - tp);
  PanopticResult r;
  r.dq = t / (t + 0.5 * fp + 0.5 * fn);
  r.sq = tp ? iou_sum / t : 0.0;
  r.pq = r.dq * r.sq;
  return r;
}

Tensor label_components(const Tensor& binary, std::size_t min_size) {
  auto m = plane_of("label_components", binary);
  const std::size_t n = m.h * m.w;
  std::vector<std::size_t> label(n, 0);
  std::vector<std::size_t> stack;
  std::vector<std::vector<std::size_t>> components;
  for (std::size_t start = 0; start < n; ++start) {
    if (m.v[start] <= 0.0 || label[start]) continue;
    std::vector<std::size_t> pixels;
    const std::size_t id = components.size() + 1;
    label[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      pixels.push_back(i);
      const auto y = static_cast<std::ptrdiff_t>(i / m.w), x = static_cast<std::ptrdiff_t>(i % m.w);
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          const auto ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(m.h) || nx >= static_cast<std::ptrdiff_t>(m.w)) continue;
          const auto j = static_cast<std::size_t>(ny) * m.w + static_cast<std::size_t>(nx);
          if (m.v[j] > 0.0 && !label[j]) {
            label[j] = id;
            stack.push_back(j);
          }
        }
      }
    }
    components.push_back(std::move(pixels));
  }
  Tensor out(binary.shape());
  auto dst = out.mutable_data();
  std::size_t next = 1;
  for (const auto& comp : components) {
    if (comp.size() < min_size) continue;
    for (auto i : comp) dst[i] = static_cast<double>(next);
    ++next;
  }
  return out;
}

Tensor extract_instances(const Tensor& prob, double threshold, std::size_t min_size) {
  Tensor binary(prob.shape());
  auto src = prob.data();
  auto dst = binary.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > threshold ? 1.0 : 0.0;
  return label_components(binary, min_size);
}

ImageReport score_prediction(const std::string& id, const Tensor& prob, const Tensor& gt_mask,
                             const Tensor& gt_instances, double threshold) {
  Tensor pred(prob.shape());
  auto src = prob.data();
  auto dst = pred.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > threshold ? 1.0 : 0.0;
  const Tensor pred_instances = extract_instances(prob, threshold);
  ImageReport r;
  r.id = id;
  r.semantic.dsc = dice(pred, gt_mask);
  r.semantic.miou = miou(pred, gt_mask);
  r.semantic.f1 = object_f1(pred_instances, gt_instances);
  auto hd = hausdorff(pred, gt_mask);
  r.semantic.hd_defined = hd.has_value();
  r.semantic.hd = hd.value_or(0.0);
  r.instance.aji = aji(pred_instances, gt_instances);
  auto pan = panoptic(pred_instances, gt_instances);
  r.instance.dq = pan.dq;
  r.instance.sq = pan.sq;
  r.instance.pq = pan.pq;
  return r;
}

namespace {

MetricStats stats(const std::vector<double>& values) {
  MetricStats s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

}  // namespace

ReportSummary summarize(const std::vector<ImageReport>& reports) {
  std::vector<double> dsc, mi, f1, hd, aj, dq, sq, pq;
  for (const auto& r : reports) {
    dsc.push_back(r.semantic.dsc);
    mi.push_back(r.semantic.miou);
    f1.push_back(r.semantic.f1);
    if (r.semantic.hd_defined) hd.push_back(r.semantic.hd);
    aj.push_back(r.instance.aji);
    dq.push_back(r.instance.dq);
    sq.push_back(r.instance.sq);
    pq.push_back(r.instance.pq);
  }
  return {stats(dsc), stats(mi), stats(f1), stats(hd), stats(aj), stats(dq), stats(sq), stats(pq)};
}

void write_report_csv(std::ostream& os, const std::vector<ImageReport>& reports) {
  os << "image,dsc,miou,f1,hd,aji,dq,sq,pq\n";
  os << std::setprecision(17);
  for (const auto& r : reports) {
    os << r.id << ',' << r.semantic.dsc << ',' << r.semantic.miou << ',' << r.semantic.f1 << ',';
    if (r.semantic.hd_defined) {
      os << r.semantic.hd;
    } else {
      os << "undefined";
    }
    os << ',' << r.instance.aji << ',' << r.instance.dq << ',' << r.instance.sq << ',' << r.instance.pq << '\n';
  }
  const auto s = summarize(reports);
  os << std::fixed << std::setprecision(6) << "mean±std";
  for (const auto* m : {&s.dsc, &s.miou, &s.f1, &s.hd, &s.aji, &s.dq, &s.sq, &s.pq}) {
    os << ',' << m->mean << "±" << m->std;
  }
  os << '\n' << std::defaultfloat;
}

void write_report_jsonl(std::ostream& os, const std::vector<ImageReport>& reports) {
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["image"] = r.id;
    j["dsc"] = r.semantic.dsc;
    j["miou"] = r.semantic.miou;
    j["f1"] = r.semantic.f1;
    j["hd"] = r.semantic.hd_defined ? nlohmann::ordered_json(r.semantic.hd) : nlohmann::ordered_json(nullptr);
    j["aji"] = r.instance.aji;
    j["dq"] = r.instance.dq;
    j["sq"] = r.instance.sq;
    j["pq"] = r.instance.pq;
    os << j.dump() << '\n';
  }
  const auto s = summarize(reports);
  nlohmann::ordered_json j;
  j["image"] = "summary";
  const std::pair<const char*, const MetricStats*> fields[] = {
      {"dsc", &s.dsc}, {"miou", &s.miou}, {"f1", &s.f1}, {"hd", &s.hd},
      {"aji", &s.aji}, {"dq", &s.dq},     {"sq", &s.sq}, {"pq", &s.pq}};
  for (const auto& [name, m] : fields) j[name] = {{"mean", m->mean}, {"std", m->std}};
  os << j.dump() << '\n';
}

}  // namespace nf
