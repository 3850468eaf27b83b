#include "nucleiforge/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <string>

namespace nf {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

using Buffer = std::vector<double>;

[[noreturn]] void shape_fail(std::string_view kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

[[noreturn]] void shape_fail(std::string_view kind, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(kind) + ": shape " + shape_str(a) + " " + why);
}

/// Builds the output tensor and, when any input participates in the active
/// tape, records the node.
Tensor finish(std::string_view kind, Shape shape, Buffer values,
              std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  if (g_finite_checks.load(std::memory_order_relaxed)) {
    for (double v : values) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string(kind) + ": produced a non-finite value");
      }
    }
  }
  Tensor out(shape, std::move(values));
  Tape* tape = active_tape();
  if (!tape) return out;
  std::vector<std::optional<NodeId>> ids;
  bool any = false;
  for (const Tensor* in : inputs) {
    auto id = in->empty() && !in->requires_grad() ? std::nullopt : tape->resolve(*in);
    any = any || id.has_value();
    ids.push_back(id);
  }
  if (!any) return out;
  out.set_requires_grad(true);
  out.set_node(tape->record(std::string(kind), std::move(shape), std::move(ids),
                            std::move(backward)));
  return out;
}

// C[M×N] = A[M×K]·B[K×N]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M×K] = G[M×N]·B[K×N]ᵀ
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] = acc;
    }
  }
}

// C[K×N] = A[M×K]ᵀ·G[M×N]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::fill(c, c + k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

Shape broadcast_shape(std::string_view kind, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) shape_fail(kind, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

/// Maps each flat output index to the flat index of a broadcast input.
std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> in_strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t axis = i + rank - in.size();
    in_strides[axis] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  const std::size_t total = numel(out);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++idx[axis];
      offset += in_strides[axis];
      if (idx[axis] < out[axis]) break;
      offset -= in_strides[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
  return map;
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(BinaryKind op, const Tensor& a, const Tensor& b) {
  const char* kind = op == BinaryKind::Add ? "add" : op == BinaryKind::Sub ? "sub" : "mul";
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(kind, a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  const bool same_a = a.shape() == out_shape;
  const bool same_b = b.shape() == out_shape;
  std::vector<std::size_t> map_a, map_b;
  if (!same_a) map_a = broadcast_map(out_shape, a.shape());
  if (!same_b) map_b = broadcast_map(out_shape, b.shape());
  auto da = a.data();
  auto db = b.data();
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = da[same_a ? i : map_a[i]];
    const double y = db[same_b ? i : map_b[i]];
    out[i] = op == BinaryKind::Add ? x + y : op == BinaryKind::Sub ? x - y : x * y;
  }
  BackwardFn bw = [op, a = a.detach(), b = b.detach(), same_a, same_b, map_a = std::move(map_a),
                   map_b = std::move(map_b)](const Buffer& g) {
    Buffer ga(a.size(), 0.0), gb(b.size(), 0.0);
    auto va = a.data();
    auto vb = b.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ia = same_a ? i : map_a[i];
      const std::size_t ib = same_b ? i : map_b[i];
      switch (op) {
        case BinaryKind::Add:
          ga[ia] += g[i];
          gb[ib] += g[i];
          break;
        case BinaryKind::Sub:
          ga[ia] += g[i];
          gb[ib] -= g[i];
          break;
        case BinaryKind::Mul:
          ga[ia] += g[i] * vb[ib];
          gb[ib] += g[i] * va[ia];
          break;
      }
    }
    return std::vector<Buffer>{std::move(ga), std::move(gb)};
  };
  return finish(kind, out_shape, std::move(out), {&a, &b}, std::move(bw));
}

/// Pure index permutation/gather: out[i] = x[index[i]].
Tensor gather(std::string_view kind, const Tensor& x, Shape out_shape,
              std::vector<std::size_t> index) {
  auto src = x.data();
  Buffer out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = src[index[i]];
  const std::size_t in_size = x.size();
  BackwardFn bw = [index = std::move(index), in_size](const Buffer& g) {
    Buffer gx(in_size, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[index[i]] += g[i];
    return std::vector<Buffer>{std::move(gx)};
  };
  return finish(kind, std::move(out_shape), std::move(out), {&x}, std::move(bw));
}

void require_chw(std::string_view kind, const Tensor& x) {
  if (x.rank() != 3) shape_fail(kind, x.shape(), "is not C×H×W");
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct Lerp {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w;
};

Lerp lerp_table(std::size_t in, std::size_t out) {
  Lerp t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.w[o] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

void set_finite_checks(bool on) { g_finite_checks.store(on); }
bool finite_checks() { return g_finite_checks.load(); }

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::Mul, a, b); }

Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.size());
  auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] * factor;
  BackwardFn bw = [factor](const Buffer& g) {
    Buffer gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
    return std::vector<Buffer>{std::move(gx)};
  };
  return finish("scale", x.shape(), std::move(out), {&x}, std::move(bw));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  gemm_nn(a.raw(), b.raw(), out.data(), m, k, n);
  BackwardFn bw = [a = a.detach(), b = b.detach(), m, k, n](const Buffer& g) {
    Buffer ga(m * k), gb(k * n);
    gemm_nt(g.data(), b.raw(), ga.data(), m, n, k);
    gemm_tn(a.raw(), g.data(), gb.data(), m, k, n);
    return std::vector<Buffer>{std::move(ga), std::move(gb)};
  };
  return finish("matmul", {m, n}, std::move(out), {&a, &b}, std::move(bw));
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Padding padding) {
  require_chw("conv2d", x);
  if (weight.rank() != 4 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3)) {
    shape_fail("conv2d", x.shape(), weight.shape());
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t o = weight.dim(0), k = weight.dim(2);
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != o)) shape_fail("conv2d", weight.shape(), bias.shape());
  if (padding == Padding::Same && k % 2 == 0) {
    throw AttrError("conv2d: same padding needs an odd kernel, got " + std::to_string(k));
  }
  const std::size_t pad = padding == Padding::Same ? (k - 1) / 2 : 0;
  if (h + 2 * pad < k || w + 2 * pad < k) shape_fail("conv2d", x.shape(), weight.shape());
  const std::size_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1;
  const std::size_t rows = c * k * k, cols = ho * wo;

  // im2col: -1 marks a padded (zero) tap.
  std::vector<std::ptrdiff_t> taps(rows * cols);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t r = (ci * k + ky) * k + kx;
        for (std::size_t y = 0; y < ho; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t xx = 0; xx < wo; ++xx) {
            const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                                sx < static_cast<std::ptrdiff_t>(w);
            taps[r * cols + y * wo + xx] =
                inside ? static_cast<std::ptrdiff_t>((ci * h + static_cast<std::size_t>(sy)) * w +
                                                     static_cast<std::size_t>(sx))
                       : -1;
          }
        }
      }
    }
  }
  auto src = x.data();
  auto col = std::make_shared<Buffer>(rows * cols);
  for (std::size_t i = 0; i < taps.size(); ++i) (*col)[i] = taps[i] < 0 ? 0.0 : src[static_cast<std::size_t>(taps[i])];

  Buffer out(o * cols);
  gemm_nn(weight.raw(), col->data(), out.data(), o, rows, cols);
  if (!bias.empty()) {
    auto bv = bias.data();
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t j = 0; j < cols; ++j) out[oc * cols + j] += bv[oc];
  }
  const bool has_bias = !bias.empty();
  const std::size_t in_size = x.size();
  BackwardFn bw = [weight = weight.detach(), col, taps = std::move(taps), o, rows, cols, in_size,
                   has_bias](const Buffer& g) {
    Buffer gw(o * rows), gcol(rows * cols), gx(in_size, 0.0), gb;
    gemm_nt(g.data(), col->data(), gw.data(), o, cols, rows);
    gemm_tn(weight.raw(), g.data(), gcol.data(), o, rows, cols);
    for (std::size_t i = 0; i < taps.size(); ++i)
      if (taps[i] >= 0) gx[static_cast<std::size_t>(taps[i])] += gcol[i];
    if (has_bias) {
      gb.assign(o, 0.0);
      for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t j = 0; j < cols; ++j) gb[oc] += g[oc * cols + j];
    }
    return std::vector<Buffer>{std::move(gx), std::move(gw), std::move(gb)};
  };
  return finish("conv2d", {o, ho, wo}, std::move(out), {&x, &weight, &bias}, std::move(bw));
}

Tensor relu(const Tensor& x) {
  auto src = x.data();
  Buffer out(src.size());
  // NaN passes through so divergence stays visible downstream.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] > 0.0 || std::isnan(src[i]) ? src[i] : 0.0;
  BackwardFn bw = [x = x.detach()](const Buffer& g) {
    auto v = x.data();
    Buffer gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = v[i] > 0.0 ? g[i] : 0.0;
    return std::vector<Buffer>{std::move(gx)};
  };
  return finish("relu", x.shape(), std::move(out), {&x}, std::move(bw));
}

Tensor sigmoid(const Tensor& x) {
  auto src = x.data();
  auto out = std::make_shared<Buffer>(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = src[i];
    (*out)[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  BackwardFn bw = [out](const Buffer& g) {
    Buffer gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * (*out)[i] * (1.0 - (*out)[i]);
    return std::vector<Buffer>{std::move(gx)};
  };
  return finish("sigmoid", x.shape(), *out, {&x}, std::move(bw));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw AttrError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto s = split_axis(x.shape(), axis);
  auto src = x.data();
  auto out = std::make_shared<Buffer>(src.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, src[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(src[base + e * s.inner] - mx);
        (*out)[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) (*out)[base + e * s.inner] /= total;
    }
  }
  BackwardFn bw = [out, s](const Buffer& g) {
    Buffer gx(g.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * (*out)[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t i = base + e * s.inner;
          gx[i] = (*out)[i] * (g[i] - dot);
        }
      }
    }
    return std::vector<Buffer>{std::move(gx)};
  };
  return finish("softmax", x.shape(), *out, {&x}, std::move(bw));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) shape_fail("layer_norm", x.shape(), "has no axis to normalize");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) shape_fail("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.size() / d;
  auto src = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto xhat = std::make_shared<Buffer>(x.size());
  auto inv_std = std::make_shared<Buffer>(rows);
  Buffer out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = src.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * is;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  BackwardFn bw = [xhat, inv_std, gamma = gamma.detach(), rows, d](const Buffer& g) {
    Buffer gx(rows * d), gg(d, 0.0), gb(d, 0.0);
    auto gv = gamma.data();
    Buffer dxh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = r * d + j;
        dxh[j] = g[i] * gv[j];
        gg[j] += g[i] * (*xhat)[i];
        gb[j] += g[i];
        mean_d += dxh[j];
        mean_dx += dxh[j] * (*xhat)[i];
      }
      mean_d /= static_cast<double>(d);
      mean_dx /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = r * d + j;
        gx[i] = (*inv_std)[r] * (dxh[j] - mean_d - (*xhat)[i] * mean_dx);
      }
    }
    return std::vector<Buffer>{std::move(gx), std::move(gg), std::move(gb)};
  };
  return finish("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta}, std::move(bw));
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) shape_fail("transpose", x.shape(), "is not a matrix");
  const std::size_t order[] = {1, 0};
  return permute(x, order);
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) throw AttrError("permute: order has wrong length for " + shape_str(x.shape()));
  std::vector<bool> seen(rank, false);
  for (auto a : order) {
    if (a >= rank || seen[a]) throw AttrError("permute: order is not a permutation");
    seen[a] = true;
  }
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.dim(order[i]);
    strides[i] = in_strides[order[i]];
  }
  const std::size_t total = x.size();
  std::vector<std::size_t> index(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    index[flat] = offset;
    for (std::size_t a = rank; a-- > 0;) {
      ++idx[a];
      offset += strides[a];
      if (idx[a] < out_shape[a]) break;
      offset -= strides[a] * idx[a];
      idx[a] = 0;
    }
  }
  return gather("permute", x, std::move(out_shape), std::move(index));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  Buffer out(x.data().begin(), x.data().end());
  BackwardFn bw = [](const Buffer& g) { return std::vector<Buffer>{g}; };
  return finish("reshape", std::move(shape), std::move(out), {&x}, std::move(bw));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw AttrError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw AttrError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) shape_fail("concat", ref, p.shape());
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) shape_fail("concat", ref, p.shape());
    out_shape[axis] += p.dim(axis);
  }
  const auto s = split_axis(out_shape, axis);
  Buffer out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t at = 0;
  for (const auto& p : parts) {
    const std::size_t width = p.dim(axis) * s.inner;
    auto src = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(src.data() + o * width, width, out.data() + o * s.extent * s.inner + at);
    widths.push_back(width);
    at += width;
  }
  BackwardFn bw = [widths, s](const Buffer& g) {
    std::vector<Buffer> grads;
    std::size_t at = 0;
    for (auto width : widths) {
      Buffer gp(width * s.outer);
      for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(g.data() + o * s.extent * s.inner + at, width, gp.data() + o * width);
      grads.push_back(std::move(gp));
      at += width;
    }
    return grads;
  };
  // finish() takes an initializer list; record manually for a variadic input set.
  Tensor result(out_shape, std::move(out));
  Tape* tape = active_tape();
  if (!tape) return result;
  std::vector<std::optional<NodeId>> ids;
  bool any = false;
  for (const auto& p : parts) {
    auto id = tape->resolve(p);
    any = any || id.has_value();
    ids.push_back(id);
  }
  if (!any) return result;
  result.set_requires_grad(true);
  result.set_node(tape->record("concat", out_shape, std::move(ids), std::move(bw)));
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) throw AttrError("slice: axis out of range for " + shape_str(x.shape()));
  if (begin > end || end > x.dim(axis)) {
    throw AttrError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                    ") invalid for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const auto s = split_axis(x.shape(), axis);
  std::vector<std::size_t> index;
  index.reserve(numel(out_shape));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = begin; e < end; ++e)
      for (std::size_t in = 0; in < s.inner; ++in) index.push_back((o * s.extent + e) * s.inner + in);
  return gather("slice", x, std::move(out_shape), std::move(index));
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  const std::size_t n = x.size();
  BackwardFn bw = [n](const Buffer& g) { return std::vector<Buffer>{Buffer(n, g[0])}; };
  return finish("sum", {}, {total}, {&x}, std::move(bw));
}

Tensor mean(const Tensor& x) {
  if (x.empty()) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw AttrError("sum: axis out of range for " + shape_str(x.shape()));
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Buffer out(s.outer * s.inner, 0.0);
  auto src = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += src[(o * s.extent + e) * s.inner + in];
  BackwardFn bw = [s](const Buffer& g) {
    Buffer gx(s.outer * s.extent * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t in = 0; in < s.inner; ++in)
          gx[(o * s.extent + e) * s.inner + in] = g[o * s.inner + in];
    return std::vector<Buffer>{std::move(gx)};
  };
  return finish("sum_axis", std::move(out_shape), std::move(out), {&x}, std::move(bw));
}

Tensor mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank() || x.dim(axis) == 0) throw AttrError("mean: invalid axis for " + shape_str(x.shape()));
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_chw("upsample_nearest", x);
  if (factor < 1) throw AttrError("upsample_nearest: factor must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<std::size_t> index(c * oh * ow);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        index[(ci * oh + y) * ow + xx] = (ci * h + y / factor) * w + xx / factor;
  return gather("upsample_nearest", x, {c, oh, ow}, std::move(index));
}

Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  require_chw("upsample_bilinear", x);
  if (factor < 1) throw AttrError("upsample_bilinear: factor must be >= 1");
  return resize_bilinear(x, x.dim(1) * factor, x.dim(2) * factor);
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_chw("resize_bilinear", x);
  if (out_h == 0 || out_w == 0 || x.dim(1) == 0 || x.dim(2) == 0) {
    throw AttrError("resize_bilinear: empty size");
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto ty = std::make_shared<Lerp>(lerp_table(h, out_h));
  auto tx = std::make_shared<Lerp>(lerp_table(w, out_w));
  auto src = x.data();
  Buffer out(c * out_h * out_w);
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double* plane = src.data() + ci * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double wy = ty->w[y];
      const double* r0 = plane + ty->lo[y] * w;
      const double* r1 = plane + ty->hi[y] * w;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const double wx = tx->w[xx];
        const std::size_t x0 = tx->lo[xx], x1 = tx->hi[xx];
        const double top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
        const double bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
        out[(ci * out_h + y) * out_w + xx] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  BackwardFn bw = [ty, tx, c, h, w, out_h, out_w](const Buffer& g) {
    Buffer gx(c * h * w, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci) {
      double* plane = gx.data() + ci * h * w;
      for (std::size_t y = 0; y < out_h; ++y) {
        const double wy = ty->w[y];
        double* r0 = plane + ty->lo[y] * w;
        double* r1 = plane + ty->hi[y] * w;
        for (std::size_t xx = 0; xx < out_w; ++xx) {
          const double wx = tx->w[xx];
          const std::size_t x0 = tx->lo[xx], x1 = tx->hi[xx];
          const double gv = g[(ci * out_h + y) * out_w + xx];
          r0[x0] += gv * (1.0 - wy) * (1.0 - wx);
          r0[x1] += gv * (1.0 - wy) * wx;
          r1[x0] += gv * wy * (1.0 - wx);
          r1[x1] += gv * wy * wx;
        }
      }
    }
    return std::vector<Buffer>{std::move(gx)};
  };
  return finish("resize_bilinear", {c, out_h, out_w}, std::move(out), {&x}, std::move(bw));
}

Tensor space_to_depth(const Tensor& x, std::size_t factor) {
  require_chw("space_to_depth", x);
  if (factor < 1) throw AttrError("space_to_depth: factor must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), r = factor;
  if (h % r || w % r) {
    throw AttrError("space_to_depth: spatial dims of " + shape_str(x.shape()) +
                    " not divisible by " + std::to_string(r));
  }
  const std::size_t oh = h / r, ow = w / r;
  std::vector<std::size_t> index(x.size());
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx)
            index[((ci * r * r + i * r + j) * oh + y) * ow + xx] = (ci * h + r * y + i) * w + r * xx + j;
  return gather("space_to_depth", x, {c * r * r, oh, ow}, std::move(index));
}

Tensor depth_to_space(const Tensor& x, std::size_t factor) {
  require_chw("depth_to_space", x);
  if (factor < 1) throw AttrError("depth_to_space: factor must be >= 1");
  const std::size_t r = factor, rr = r * r;
  if (x.dim(0) % rr) {
    throw AttrError("depth_to_space: channels of " + shape_str(x.shape()) +
                    " not divisible by " + std::to_string(rr));
  }
  const std::size_t c = x.dim(0) / rr, h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * r, ow = w * r;
  std::vector<std::size_t> index(x.size());
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        index[(ci * oh + y) * ow + xx] = ((ci * rr + (y % r) * r + xx % r) * h + y / r) * w + xx / r;
  return gather("depth_to_space", x, {c, oh, ow}, std::move(index));
}

namespace {

struct HeadLayout {
  std::size_t heads, dh, nq, nk, d;
};

HeadLayout attention_layout(const Tensor& q, const Tensor& k, std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) shape_fail("attention", q.shape(), k.shape());
  if (heads == 0 || q.dim(1) % heads) {
    throw AttrError("attention: dim " + std::to_string(q.dim(1)) + " not divisible by " +
                    std::to_string(heads) + " heads");
  }
  return {heads, q.dim(1) / heads, q.dim(0), k.dim(0), q.dim(1)};
}

/// Copies head `h` columns of an N×D matrix into a contiguous N×dh block.
Buffer head_block(std::span<const double> m, std::size_t rows, const HeadLayout& L, std::size_t h) {
  Buffer out(rows * L.dh);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(m.data() + r * L.d + h * L.dh, L.dh, out.data() + r * L.dh);
  return out;
}

void scatter_head(Buffer& m, std::span<const double> block, std::size_t rows, const HeadLayout& L,
                  std::size_t h) {
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(block.data() + r * L.dh, L.dh, m.data() + r * L.d + h * L.dh);
}

/// Row-softmax of scaled Q·Kᵀ for one head.
Buffer head_probs(const Buffer& qh, const Buffer& kh, const HeadLayout& L) {
  Buffer p(L.nq * L.nk);
  gemm_nt(qh.data(), kh.data(), p.data(), L.nq, L.dh, L.nk);
  const double sc = 1.0 / std::sqrt(static_cast<double>(L.dh));
  for (std::size_t i = 0; i < L.nq; ++i) {
    double* row = p.data() + i * L.nk;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < L.nk; ++j) {
      row[j] *= sc;
      mx = std::max(mx, row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < L.nk; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < L.nk; ++j) row[j] /= total;
  }
  return p;
}

}  // namespace

Tensor attention_probs(const Tensor& q, const Tensor& k, std::size_t heads) {
  const auto L = attention_layout(q, k, heads);
  Buffer out;
  out.reserve(heads * L.nq * L.nk);
  for (std::size_t h = 0; h < heads; ++h) {
    auto p = head_probs(head_block(q.data(), L.nq, L, h), head_block(k.data(), L.nk, L, h), L);
    out.insert(out.end(), p.begin(), p.end());
  }
  return Tensor({heads * L.nq, L.nk}, std::move(out));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const auto L = attention_layout(q, k, heads);
  if (v.rank() != 2 || v.dim(0) != L.nk || v.dim(1) != L.d) shape_fail("attention", k.shape(), v.shape());
  auto probs = std::make_shared<std::vector<Buffer>>();
  Buffer out(L.nq * L.d);
  for (std::size_t h = 0; h < heads; ++h) {
    auto p = head_probs(head_block(q.data(), L.nq, L, h), head_block(k.data(), L.nk, L, h), L);
    auto vh = head_block(v.data(), L.nk, L, h);
    Buffer oh(L.nq * L.dh);
    gemm_nn(p.data(), vh.data(), oh.data(), L.nq, L.nk, L.dh);
    scatter_head(out, oh, L.nq, L, h);
    probs->push_back(std::move(p));
  }
  BackwardFn bw = [probs, L, q = q.detach(), k = k.detach(), v = v.detach()](const Buffer& g) {
    Buffer gq(L.nq * L.d), gk(L.nk * L.d), gv(L.nk * L.d);
    const double sc = 1.0 / std::sqrt(static_cast<double>(L.dh));
    for (std::size_t h = 0; h < L.heads; ++h) {
      const Buffer& p = (*probs)[h];
      auto qh = head_block(q.data(), L.nq, L, h);
      auto kh = head_block(k.data(), L.nk, L, h);
      auto vh = head_block(v.data(), L.nk, L, h);
      auto goh = head_block(g, L.nq, L, h);
      Buffer gvh(L.nk * L.dh), dp(L.nq * L.nk);
      gemm_tn(p.data(), goh.data(), gvh.data(), L.nq, L.nk, L.dh);
      gemm_nt(goh.data(), vh.data(), dp.data(), L.nq, L.dh, L.nk);
      for (std::size_t i = 0; i < L.nq; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < L.nk; ++j) dot += dp[i * L.nk + j] * p[i * L.nk + j];
        for (std::size_t j = 0; j < L.nk; ++j) {
          const std::size_t ij = i * L.nk + j;
          dp[ij] = p[ij] * (dp[ij] - dot) * sc;
        }
      }
      Buffer gqh(L.nq * L.dh), gkh(L.nk * L.dh);
      gemm_nn(dp.data(), kh.data(), gqh.data(), L.nq, L.nk, L.dh);
      gemm_tn(dp.data(), qh.data(), gkh.data(), L.nq, L.nk, L.dh);
      scatter_head(gq, gqh, L.nq, L, h);
      scatter_head(gk, gkh, L.nk, L, h);
      scatter_head(gv, gvh, L.nk, L, h);
    }
    return std::vector<Buffer>{std::move(gq), std::move(gk), std::move(gv)};
  };
  return finish("attention", {L.nq, L.d}, std::move(out), {&q, &k, &v}, std::move(bw));
}

Tensor bce(const Tensor& prob, const Tensor& target, const Tensor& weights) {
  if (prob.shape() != target.shape()) shape_fail("bce", prob.shape(), target.shape());
  const bool weighted = !weights.empty();
  if (weighted && weights.shape() != prob.shape()) shape_fail("bce", prob.shape(), weights.shape());
  if (prob.empty()) throw ShapeError("bce: empty input");
  const std::size_t n = prob.size();
  auto p = prob.data();
  auto t = target.data();
  auto w = weights.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    const double term = -(t[i] * std::log(c) + (1.0 - t[i]) * std::log(1.0 - c));
    total += (weighted ? w[i] : 1.0) * term;
  }
  BackwardFn bw = [prob = prob.detach(), target = target.detach(), weights = weights.detach(),
                   weighted, n](const Buffer& g) {
    auto p = prob.data();
    auto t = target.data();
    auto w = weights.data();
    const double scale = g[0] / static_cast<double>(n);
    Buffer gp(n), gt(n), gw;
    if (weighted) gw.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool inside = p[i] >= kProbClamp && p[i] <= 1.0 - kProbClamp;
      const double c = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
      const double wi = weighted ? w[i] : 1.0;
      gp[i] = inside ? -scale * wi * (t[i] / c - (1.0 - t[i]) / (1.0 - c)) : 0.0;
      gt[i] = -scale * wi * (std::log(c) - std::log(1.0 - c));
      if (weighted) gw[i] = -scale * (t[i] * std::log(c) + (1.0 - t[i]) * std::log(1.0 - c));
    }
    return std::vector<Buffer>{std::move(gp), std::move(gt), std::move(gw)};
  };
  return finish("bce", {}, {total / static_cast<double>(n)}, {&prob, &target, &weights}, std::move(bw));
}

Tensor soft_dice(const Tensor& prob, const Tensor& target, double smooth) {
  if (prob.shape() != target.shape()) shape_fail("soft_dice", prob.shape(), target.shape());
  if (smooth <= 0.0) throw AttrError("soft_dice: smooth must be positive");
  auto p = prob.data();
  auto t = target.data();
  double inter = 0.0, denom = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * t[i];
    denom += p[i] + t[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = denom + smooth;
  BackwardFn bw = [prob = prob.detach(), target = target.detach(), num, den](const Buffer& g) {
    auto p = prob.data();
    auto t = target.data();
    Buffer gp(p.size()), gt(p.size());
    const double inv = g[0] / (den * den);
    for (std::size_t i = 0; i < p.size(); ++i) {
      gp[i] = -(2.0 * t[i] * den - num) * inv;
      gt[i] = -(2.0 * p[i] * den - num) * inv;
    }
    return std::vector<Buffer>{std::move(gp), std::move(gt)};
  };
  return finish("soft_dice", {}, {1.0 - num / den}, {&prob, &target}, std::move(bw));
}

Tensor custom_op(std::string_view kind, std::span<const Tensor> inputs, Tensor forward_value,
                 BackwardFn backward) {
  Tensor out = forward_value.detach();
  Tape* tape = active_tape();
  if (!tape) return out;
  std::vector<std::optional<NodeId>> ids;
  bool any = false;
  for (const auto& in : inputs) {
    auto id = tape->resolve(in);
    any = any || id.has_value();
    ids.push_back(id);
  }
  if (!any) return out;
  out.set_requires_grad(true);
  out.set_node(tape->record(std::string(kind), out.shape(), std::move(ids), std::move(backward)));
  return out;
}

}  // namespace nf
