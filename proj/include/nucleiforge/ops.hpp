#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "nucleiforge/tape.hpp"
#include "nucleiforge/tensor.hpp"

// Differentiable primitives. Every function records a node on the active tape
// when at least one input requires grad; otherwise it is a plain evaluation.
namespace nf {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor matmul(const Tensor& a, const Tensor& b);

enum class Padding { Same, Valid };
/// x: C×H×W, weight: O×C×k×k, bias: O (or empty Tensor). Stride 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Padding padding);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis; gamma/beta have the size of that axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);

/// Spatial resampling of C×H×W tensors.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);
Tensor upsample_bilinear(const Tensor& x, std::size_t factor);
/// Half-pixel-centre bilinear resize to an arbitrary size.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// C×H×W -> (C·r²)×(H/r)×(W/r); channel c·r² + i·r + j holds x[c, r·y+i, r·x+j].
Tensor space_to_depth(const Tensor& x, std::size_t factor);
/// Exact inverse of space_to_depth.
Tensor depth_to_space(const Tensor& x, std::size_t factor);

/// Multi-head scaled-dot-product attention. q: Nq×D, k and v: Nk×D.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);
/// Attention probabilities (heads·Nq)×Nk, not recorded. Used for inspection.
Tensor attention_probs(const Tensor& q, const Tensor& k, std::size_t heads);

inline constexpr double kProbClamp = 1e-7;

/// Mean binary cross-entropy on probabilities clamped to [1e-7, 1-1e-7].
/// `weights` (same shape as prob, or empty) scales each element's term.
Tensor bce(const Tensor& prob, const Tensor& target, const Tensor& weights = {});

inline constexpr double kDiceSmooth = 1.0;
/// 1 - (2·Σpg + s) / (Σp + Σg + s).
Tensor soft_dice(const Tensor& prob, const Tensor& target, double smooth = kDiceSmooth);

/// Records a user-defined node: forward value is supplied, backward maps the
/// upstream gradient to one gradient per input.
Tensor custom_op(std::string_view kind, std::span<const Tensor> inputs, Tensor forward_value,
                 BackwardFn backward);

/// Finite-value check after each primitive. On by default in debug builds.
void set_finite_checks(bool on);
bool finite_checks();

}  // namespace nf
