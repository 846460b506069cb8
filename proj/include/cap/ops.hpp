#pragma once

#include <vector>

#include "cap/autograd.hpp"

namespace cap::ops {

// Elementwise arithmetic. Operands must share a shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a + c for a constant tensor c.
Var add_constant(const Var& a, const Tensor& c);

/// Sum of same-shaped values.
Var add_n(const std::vector<Var>& xs);
/// Elementwise mean of same-shaped values.
Var mean_of(const std::vector<Var>& xs);

/// x[c, ...] + v[c], broadcast over all trailing dimensions.
Var add_channel(const Var& x, const Var& v);

/// W[out, in] * x[in] + b[out].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Stride-1 convolution with zero padding `pad`. x: {Cin, H, W},
/// weight: {Cout, Cin, k, k}, bias: {Cout} or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad);

Var relu(const Var& x);
Var silu(const Var& x);

/// 2x2 pooling with stride 2 over {C, H, W}; H and W must be even.
Var max_pool2(const Var& x);
Var avg_pool2(const Var& x);
/// Nearest-neighbour 2x upsampling over {C, H, W}.
Var upsample2(const Var& x);

/// Concatenate {Ca, H, W} and {Cb, H, W} along channels.
Var concat_channels(const Var& a, const Var& b);

Var reshape(const Var& x, Shape shape);

/// f * f^T / divisor for f of shape {C, M}.
Var gram(const Var& features, double divisor);

/// Mean over all but the leading dimension: {C, ...} -> {C}.
Var channel_mean(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
Var sum_squares(const Var& x);
/// mean((a - b)^2) over all elements.
Var mse(const Var& a, const Var& b);

}  // namespace cap::ops
