#include "cap/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace cap::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(x.shape()));
  }
}

void require_same(const Var& a, const Var& b, const char* op) {
  require_same_shape(a.value(), b.value(), op);
}

void accumulate(Tensor* slot, const Tensor& g) {
  if (slot) *slot += g;
}

void accumulate_scaled(Tensor* slot, const Tensor& g, double s) {
  if (!slot) return;
  double* d = slot->data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * src[i];
}

struct ConvGeometry {
  int cin, h, w, cout, k, pad, hout, wout;
  int patch() const { return cin * k * k; }
  int pixels() const { return hout * wout; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  const int np = g.pixels();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * np;
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy + ky - g.pad;
          double* out = row + oy * g.wout;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wout, 0.0);
            continue;
          }
          const double* in = x + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox + kx - g.pad;
            out[ox] = (ix >= 0 && ix < g.w) ? in[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  const int np = g.pixels();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * np;
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          double* out = x + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          const double* in = row + oy * g.wout;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox + kx - g.pad;
            if (ix >= 0 && ix < g.w) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  return Var::from_op(a.value() + b.value(), {a, b}, [](const Tensor& g, std::span<Tensor* const> s) {
    accumulate(s[0], g);
    accumulate(s[1], g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  return Var::from_op(a.value() - b.value(), {a, b}, [](const Tensor& g, std::span<Tensor* const> s) {
    accumulate(s[0], g);
    accumulate_scaled(s[1], g, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Var::from_op(std::move(out), {a, b},
                      [an = a.node(), bn = b.node()](const Tensor& g, std::span<Tensor* const> s) {
                        for (int side = 0; side < 2; ++side) {
                          Tensor* slot = s[side];
                          if (!slot) continue;
                          const Tensor& other = side == 0 ? bn->value : an->value;
                          for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i] * other[i];
                        }
                      });
}

Var scale(const Var& a, double factor) {
  return Var::from_op(a.value() * factor, {a}, [factor](const Tensor& g, std::span<Tensor* const> s) {
    accumulate_scaled(s[0], g, factor);
  });
}

Var add_constant(const Var& a, const Tensor& c) {
  require_same_shape(a.value(), c, "add_constant");
  return Var::from_op(a.value() + c, {a}, [](const Tensor& g, std::span<Tensor* const> s) {
    accumulate(s[0], g);
  });
}

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: empty input");
  Tensor out = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same(xs.front(), xs[i], "add_n");
    out += xs[i].value();
  }
  return Var::from_op(std::move(out), xs, [](const Tensor& g, std::span<Tensor* const> s) {
    for (Tensor* slot : s) accumulate(slot, g);
  });
}

Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_of: empty input");
  return scale(add_n(xs), 1.0 / static_cast<double>(xs.size()));
}

Var add_channel(const Var& x, const Var& v) {
  if (x.value().rank() < 1 || v.value().rank() != 1 || v.shape()[0] != x.shape()[0]) {
    throw std::invalid_argument("add_channel: cannot broadcast " + shape_str(v.shape()) + " over " +
                                shape_str(x.shape()));
  }
  const std::size_t channels = x.shape()[0];
  const std::size_t inner = x.value().size() / channels;
  Tensor out = x.value();
  for (std::size_t c = 0; c < channels; ++c) {
    const double b = v.value()[c];
    double* p = out.data() + c * inner;
    for (std::size_t i = 0; i < inner; ++i) p[i] += b;
  }
  return Var::from_op(std::move(out), {x, v},
                      [channels, inner](const Tensor& g, std::span<Tensor* const> s) {
                        accumulate(s[0], g);
                        if (!s[1]) return;
                        for (std::size_t c = 0; c < channels; ++c) {
                          const double* p = g.data() + c * inner;
                          double acc = 0.0;
                          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                          (*s[1])[c] += acc;
                        }
                      });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 1, "linear");
  require_rank(weight, 2, "linear");
  const int out_dim = weight.shape()[0];
  const int in_dim = weight.shape()[1];
  if (x.shape()[0] != in_dim) throw std::invalid_argument("linear: input width mismatch");
  if (bias.defined() && (bias.value().rank() != 1 || bias.shape()[0] != out_dim)) {
    throw std::invalid_argument("linear: bias shape mismatch");
  }
  Tensor out(Shape{out_dim});
  ConstMatMap w(weight.value().data(), out_dim, in_dim);
  VecMap(out.data(), out_dim).noalias() = w * ConstVecMap(x.value().data(), in_dim);
  if (bias.defined()) out += bias.value();
  std::vector<Var> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Var::from_op(
      std::move(out), std::move(parents),
      [xn = x.node(), wn = weight.node(), out_dim, in_dim](const Tensor& g, std::span<Tensor* const> s) {
        ConstVecMap gv(g.data(), out_dim);
        if (s[0]) {
          VecMap(s[0]->data(), in_dim).noalias() +=
              ConstMatMap(wn->value.data(), out_dim, in_dim).transpose() * gv;
        }
        if (s[1]) {
          MatMap(s[1]->data(), out_dim, in_dim).noalias() +=
              gv * ConstVecMap(xn->value.data(), in_dim).transpose();
        }
        if (s.size() > 2) accumulate(s[2], g);
      });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  ConvGeometry geo{};
  geo.cin = x.shape()[0];
  geo.h = x.shape()[1];
  geo.w = x.shape()[2];
  geo.cout = weight.shape()[0];
  geo.k = weight.shape()[2];
  geo.pad = pad;
  if (weight.shape()[1] != geo.cin || weight.shape()[3] != geo.k) {
    throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                                shape_str(x.shape()));
  }
  geo.hout = geo.h + 2 * pad - geo.k + 1;
  geo.wout = geo.w + 2 * pad - geo.k + 1;
  if (geo.hout <= 0 || geo.wout <= 0) throw std::invalid_argument("conv2d: empty output");
  if (bias.defined() && (bias.value().rank() != 1 || bias.shape()[0] != geo.cout)) {
    throw std::invalid_argument("conv2d: bias shape mismatch");
  }

  auto col = std::make_shared<Storage>(static_cast<std::size_t>(geo.patch()) * geo.pixels());
  im2col(x.value().data(), geo, col->data());

  Tensor out(Shape{geo.cout, geo.hout, geo.wout});
  MatMap y(out.data(), geo.cout, geo.pixels());
  y.noalias() = ConstMatMap(weight.value().data(), geo.cout, geo.patch()) *
                ConstMatMap(col->data(), geo.patch(), geo.pixels());
  if (bias.defined()) {
    for (int c = 0; c < geo.cout; ++c) y.row(c).array() += bias.value()[c];
  }

  std::vector<Var> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Var::from_op(
      std::move(out), std::move(parents),
      [wn = weight.node(), col, geo](const Tensor& g, std::span<Tensor* const> s) {
        ConstMatMap gy(g.data(), geo.cout, geo.pixels());
        if (s[0]) {
          Storage dcol(static_cast<std::size_t>(geo.patch()) * geo.pixels());
          MatMap(dcol.data(), geo.patch(), geo.pixels()).noalias() =
              ConstMatMap(wn->value.data(), geo.cout, geo.patch()).transpose() * gy;
          col2im_add(dcol.data(), geo, s[0]->data());
        }
        if (s[1]) {
          MatMap(s[1]->data(), geo.cout, geo.patch()).noalias() +=
              gy * ConstMatMap(col->data(), geo.patch(), geo.pixels()).transpose();
        }
        if (s.size() > 2 && s[2]) {
          for (int c = 0; c < geo.cout; ++c) (*s[2])[c] += gy.row(c).sum();
        }
      });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return Var::from_op(std::move(out), {x}, [xn = x.node()](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xn->value[i] > 0.0) (*s[0])[i] += g[i];
    }
  });
}

Var silu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v * sigmoid(v);
  return Var::from_op(std::move(out), {x}, [xn = x.node()](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->value[i];
      const double sg = sigmoid(v);
      (*s[0])[i] += g[i] * sg * (1.0 + v * (1.0 - sg));
    }
  });
}

Var max_pool2(const Var& x) {
  require_rank(x, 3, "max_pool2");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h % 2 || w % 2) throw std::invalid_argument("max_pool2: odd spatial size " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor out(Shape{c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const Tensor& in = x.value();
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx, ++o) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + 2 * y + dy) * w + 2 * xx + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        out[o] = in[best];
        (*argmax)[o] = best;
      }
    }
  }
  return Var::from_op(std::move(out), {x}, [argmax](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[(*argmax)[i]] += g[i];
  });
}

Var avg_pool2(const Var& x) {
  require_rank(x, 3, "avg_pool2");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: odd spatial size " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor out(Shape{c, ho, wo});
  const Tensor& in = x.value();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        out.at(ch, y, xx) = 0.25 * (in.at(ch, 2 * y, 2 * xx) + in.at(ch, 2 * y, 2 * xx + 1) +
                                    in.at(ch, 2 * y + 1, 2 * xx) + in.at(ch, 2 * y + 1, 2 * xx + 1));
      }
    }
  }
  return Var::from_op(std::move(out), {x}, [c, ho, wo](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    Tensor& d = *s[0];
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx) {
          const double v = 0.25 * g.at(ch, y, xx);
          d.at(ch, 2 * y, 2 * xx) += v;
          d.at(ch, 2 * y, 2 * xx + 1) += v;
          d.at(ch, 2 * y + 1, 2 * xx) += v;
          d.at(ch, 2 * y + 1, 2 * xx + 1) += v;
        }
      }
    }
  });
}

Var upsample2(const Var& x) {
  require_rank(x, 3, "upsample2");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor out(Shape{c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = x.value().at(ch, y / 2, xx / 2);
    }
  }
  return Var::from_op(std::move(out), {x}, [c, h, w](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < 2 * h; ++y) {
        for (int xx = 0; xx < 2 * w; ++xx) s[0]->at(ch, y / 2, xx / 2) += g.at(ch, y, xx);
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2]) {
    throw std::invalid_argument("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t na = a.value().size();
  const std::size_t nb = b.value().size();
  Tensor out(Shape{a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]});
  std::copy(a.value().data(), a.value().data() + na, out.data());
  std::copy(b.value().data(), b.value().data() + nb, out.data() + na);
  return Var::from_op(std::move(out), {a, b}, [na, nb](const Tensor& g, std::span<Tensor* const> s) {
    if (s[0]) {
      for (std::size_t i = 0; i < na; ++i) (*s[0])[i] += g[i];
    }
    if (s[1]) {
      for (std::size_t i = 0; i < nb; ++i) (*s[1])[i] += g[na + i];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Shape original = x.shape();
  return Var::from_op(x.value().reshaped(std::move(shape)), {x},
                      [original](const Tensor& g, std::span<Tensor* const> s) {
                        if (s[0]) *s[0] += g.reshaped(original);
                      });
}

Var gram(const Var& features, double divisor) {
  require_rank(features, 2, "gram");
  const int c = features.shape()[0];
  const int m = features.shape()[1];
  if (c == 0 || m == 0) throw std::invalid_argument("gram: empty feature matrix");
  if (!(divisor > 0.0)) throw std::invalid_argument("gram: normalization must be positive");
  Tensor out(Shape{c, c});
  ConstMatMap f(features.value().data(), c, m);
  MatMap gm(out.data(), c, c);
  gm.noalias() = f * f.transpose();
  gm /= divisor;
  return Var::from_op(std::move(out), {features},
                      [fn = features.node(), c, m, divisor](const Tensor& g, std::span<Tensor* const> s) {
                        if (!s[0]) return;
                        ConstMatMap gg(g.data(), c, c);
                        ConstMatMap f(fn->value.data(), c, m);
                        RowMat sym = (gg + gg.transpose()) / divisor;
                        MatMap(s[0]->data(), c, m).noalias() += sym * f;
                      });
}

Var channel_mean(const Var& x) {
  if (x.value().rank() < 2) throw std::invalid_argument("channel_mean: need rank >= 2");
  const int c = x.shape()[0];
  const std::size_t inner = x.value().size() / c;
  Tensor out(Shape{c});
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += x.value()[ch * inner + i];
    out[ch] = acc / static_cast<double>(inner);
  }
  return Var::from_op(std::move(out), {x}, [c, inner](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    for (int ch = 0; ch < c; ++ch) {
      const double v = g[ch] / static_cast<double>(inner);
      for (std::size_t i = 0; i < inner; ++i) (*s[0])[ch * inner + i] += v;
    }
  });
}

Var sum(const Var& x) {
  return Var::from_op(Tensor::scalar(x.value().sum()), {x}, [](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    const double v = g[0];
    for (double& d : s[0]->values()) d += v;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_squares(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v * v;
  return Var::from_op(Tensor::scalar(acc), {x}, [xn = x.node()](const Tensor& g, std::span<Tensor* const> s) {
    if (!s[0]) return;
    const double f = 2.0 * g[0];
    for (std::size_t i = 0; i < xn->value.size(); ++i) (*s[0])[i] += f * xn->value[i];
  });
}

Var mse(const Var& a, const Var& b) {
  require_same(a, b, "mse");
  return scale(sum_squares(sub(a, b)), 1.0 / static_cast<double>(a.value().size()));
}

}  // namespace cap::ops
