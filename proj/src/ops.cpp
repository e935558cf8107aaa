#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

#include "cbmlab/tensor.hpp"
#include "tensor_internal.hpp"

namespace cbm {

namespace {

using NodePtr = TensorAccess::NodePtr;
using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;

const NodePtr& node_of(const Tensor& t) {
  if (!t.defined()) throw ShapeError("operation on an undefined tensor");
  return TensorAccess::node(t);
}

// Allocates the output and decides whether the op is recorded.
struct OpOutput {
  Tensor tensor;
  NodePtr node;
  bool record;
};

OpOutput make_output(Tape& tape, Shape shape, std::initializer_list<const Tensor*> inputs) {
  bool needs = false;
  for (const Tensor* in : inputs) needs |= in->requires_grad();
  const bool record = needs && tape.recording();
  Tensor out = Tensor::zeros(std::move(shape), record);
  NodePtr node = TensorAccess::node(out);
  return {std::move(out), std::move(node), record};
}

void expect(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

// Rows and columns for the loss reduction convention.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  return {t.dim(0), t.numel() / t.dim(0)};
}

}  // namespace

Tensor dense(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const auto& x = node_of(input);
  const auto& w = node_of(weight);
  const auto& b = node_of(bias);
  expect(input.rank() == 2, "dense: input must be [B x I], got " + shape_str(input.shape()));
  expect(weight.rank() == 2, "dense: weight must be [I x O], got " + shape_str(weight.shape()));
  expect(bias.rank() == 1, "dense: bias must be [O], got " + shape_str(bias.shape()));
  const std::size_t batch = input.dim(0), in = input.dim(1), out = weight.dim(1);
  expect(weight.dim(0) == in, "dense: input " + shape_str(input.shape()) + " does not conform to weight " +
                                  shape_str(weight.shape()));
  expect(bias.dim(0) == out, "dense: bias " + shape_str(bias.shape()) + " does not match " +
                                 std::to_string(out) + " outputs");

  auto o = make_output(tape, {batch, out}, {&input, &weight, &bias});
  MMap y(o.node->data.data(), batch, out);
  y.noalias() = CMap(x->data.data(), batch, in) * CMap(w->data.data(), in, out);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->data.data(), out);

  if (o.record) {
    tape.record(o.tensor, [x, w, b, y = o.node, batch, in, out] {
      CMap dy(y->grad.data(), batch, out);
      if (x->requires_grad)
        MMap(x->grad_buffer(), batch, in).noalias() += dy * CMap(w->data.data(), in, out).transpose();
      if (w->requires_grad)
        MMap(w->grad_buffer(), in, out).noalias() += CMap(x->data.data(), batch, in).transpose() * dy;
      // Plain loops: Eigen reductions peel by address, which makes the sum order vary between runs.
      if (b->requires_grad) {
        double* db = b->grad_buffer();
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t c = 0; c < out; ++c) db[c] += dy(r, c);
      }
    });
  }
  return o.tensor;
}

namespace {

// cols[(c*9 + ky*3 + kx), y*W + x] = in[c, y+ky-1, x+kx-1] (zero outside)
void im2col3(const double* in, std::size_t channels, std::size_t h, std::size_t w, double* cols) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = in + c * hw;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols + (c * 9 + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          double* dst = row + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(dst, dst + w, 0.0);
            continue;
          }
          const double* src = plane + sy * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            dst[x] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im3_add(const double* cols, std::size_t channels, std::size_t h, std::size_t w, double* out) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = out + c * hw;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols + (c * 9 + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          double* dst = plane + sy * w;
          const double* src = row + y * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            if (sx >= 0 && sx < static_cast<long>(w)) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const auto& x = node_of(input);
  const auto& k = node_of(kernel);
  const auto& b = node_of(bias);
  expect(input.rank() == 4, "conv2d: input must be [B x C x H x W], got " + shape_str(input.shape()));
  expect(kernel.rank() == 4 && kernel.dim(2) == 3 && kernel.dim(3) == 3,
         "conv2d: kernel must be [F x C x 3 x 3], got " + shape_str(kernel.shape()));
  const std::size_t batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t filters = kernel.dim(0);
  expect(kernel.dim(1) == ch, "conv2d: kernel has " + std::to_string(kernel.dim(1)) +
                                  " input channels but input has " + std::to_string(ch));
  expect(bias.rank() == 1 && bias.dim(0) == filters,
         "conv2d: bias must be [" + std::to_string(filters) + "], got " + shape_str(bias.shape()));

  const std::size_t hw = h * w, c9 = ch * 9;
  auto o = make_output(tape, {batch, filters, h, w}, {&input, &kernel, &bias});
  const bool keep_cols = o.record && kernel.requires_grad();
  std::vector<double> cols_all(keep_cols ? batch * c9 * hw : 0);
  std::vector<double> cols_tmp(keep_cols ? 0 : c9 * hw);

  CMap kmat(k->data.data(), filters, c9);
  for (std::size_t n = 0; n < batch; ++n) {
    double* cols = keep_cols ? cols_all.data() + n * c9 * hw : cols_tmp.data();
    im2col3(x->data.data() + n * ch * hw, ch, h, w, cols);
    MMap y(o.node->data.data() + n * filters * hw, filters, hw);
    y.noalias() = kmat * CMap(cols, c9, hw);
    for (std::size_t f = 0; f < filters; ++f) y.row(f).array() += b->data[f];
  }

  if (o.record) {
    tape.record(o.tensor, [x, k, b, y = o.node, cols_all = std::move(cols_all), batch, ch, h, w, filters] {
      const std::size_t hw = h * w, c9 = ch * 9;
      std::vector<double> dcols(x->requires_grad ? c9 * hw : 0);
      for (std::size_t n = 0; n < batch; ++n) {
        CMap dy(y->grad.data() + n * filters * hw, filters, hw);
        if (k->requires_grad)
          MMap(k->grad_buffer(), filters, c9).noalias() +=
              dy * CMap(cols_all.data() + n * c9 * hw, c9, hw).transpose();
        if (b->requires_grad) {
          double* db = b->grad_buffer();
          for (std::size_t f = 0; f < filters; ++f) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += dy(f, i);
            db[f] += acc;
          }
        }
        if (x->requires_grad) {
          MMap(dcols.data(), c9, hw).noalias() = CMap(k->data.data(), filters, c9).transpose() * dy;
          col2im3_add(dcols.data(), ch, h, w, x->grad_buffer() + n * ch * hw);
        }
      }
    });
  }
  return o.tensor;
}

Tensor maxpool2(Tape& tape, const Tensor& input) {
  const auto& x = node_of(input);
  expect(input.rank() == 4, "maxpool2: input must be [B x C x H x W], got " + shape_str(input.shape()));
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  expect(h % 2 == 0 && w % 2 == 0, "maxpool2: spatial extents must be even, got " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto o = make_output(tape, {input.dim(0), input.dim(1), oh, ow}, {&input});
  std::vector<std::size_t> argmax(o.record ? planes * oh * ow : 0);

  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = x->data.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        // Scan in flat-index order; strict '>' keeps the lowest index on ties.
        const std::size_t cand[4] = {2 * oy * w + 2 * ox, 2 * oy * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox,
                                     (2 * oy + 1) * w + 2 * ox + 1};
        std::size_t best = cand[0];
        for (int i = 1; i < 4; ++i)
          if (in[cand[i]] > in[best]) best = cand[i];
        const std::size_t oi = p * oh * ow + oy * ow + ox;
        o.node->data[oi] = in[best];
        if (o.record) argmax[oi] = p * h * w + best;
      }
    }
  }

  if (o.record) {
    tape.record(o.tensor, [x, y = o.node, argmax = std::move(argmax)] {
      double* dx = x->grad_buffer();
      for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += y->grad[i];
    });
  }
  return o.tensor;
}

namespace {

template <typename Fwd, typename Deriv>
Tensor elementwise(Tape& tape, const Tensor& input, Fwd fwd, Deriv deriv) {
  const auto& x = node_of(input);
  auto o = make_output(tape, input.shape(), {&input});
  for (std::size_t i = 0; i < x->data.size(); ++i) o.node->data[i] = fwd(x->data[i]);
  if (o.record) {
    // deriv(input value, output value)
    tape.record(o.tensor, [x, y = o.node, deriv] {
      double* dx = x->grad_buffer();
      for (std::size_t i = 0; i < y->grad.size(); ++i) dx[i] += y->grad[i] * deriv(x->data[i], y->data[i]);
    });
  }
  return o.tensor;
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Tensor relu(Tape& tape, const Tensor& x) {
  return elementwise(
      tape, x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  return elementwise(tape, x, stable_sigmoid, [](double, double s) { return s * (1.0 - s); });
}

Tensor abs(Tape& tape, const Tensor& x) {
  return elementwise(
      tape, x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor softmax(Tape& tape, const Tensor& x) {
  const auto& z = node_of(x);
  expect(x.rank() == 2, "softmax: input must be [B x K], got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), k = x.dim(1);
  auto o = make_output(tape, x.shape(), {&x});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = z->data.data() + r * k;
    double* out = o.node->data.data() + r * k;
    const double m = *std::max_element(in, in + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += out[j] = std::exp(in[j] - m);
    for (std::size_t j = 0; j < k; ++j) out[j] /= s;
  }
  if (o.record) {
    tape.record(o.tensor, [z, y = o.node, rows, k] {
      double* dz = z->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = y->data.data() + r * k;
        const double* g = y->grad.data() + r * k;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += g[j] * p[j];
        for (std::size_t j = 0; j < k; ++j) dz[r * k + j] += p[j] * (g[j] - dot);
      }
    });
  }
  return o.tensor;
}

Tensor flatten(Tape& tape, const Tensor& input) {
  const auto& x = node_of(input);
  const std::size_t rows = input.dim(0);
  auto o = make_output(tape, {rows, input.numel() / rows}, {&input});
  o.node->data = x->data;
  if (o.record) {
    tape.record(o.tensor, [x, y = o.node] {
      double* dx = x->grad_buffer();
      for (std::size_t i = 0; i < y->grad.size(); ++i) dx[i] += y->grad[i];
    });
  }
  return o.tensor;
}

Tensor sum(Tape& tape, const Tensor& input) {
  const auto& x = node_of(input);
  auto o = make_output(tape, {1}, {&input});
  double acc = 0.0;
  for (double v : x->data) acc += v;
  o.node->data[0] = acc;
  if (o.record) {
    tape.record(o.tensor, [x, y = o.node] {
      double* dx = x->grad_buffer();
      for (std::size_t i = 0; i < x->data.size(); ++i) dx[i] += y->grad[0];
    });
  }
  return o.tensor;
}

Tensor weighted_sum(Tape& tape, const Tensor& input, std::span<const double> coeffs) {
  const auto& x = node_of(input);
  expect(coeffs.size() == input.numel(), "weighted_sum: " + std::to_string(coeffs.size()) +
                                             " coefficients for tensor " + shape_str(input.shape()));
  auto o = make_output(tape, {1}, {&input});
  double acc = 0.0;
  for (std::size_t i = 0; i < coeffs.size(); ++i) acc += coeffs[i] * x->data[i];
  o.node->data[0] = acc;
  if (o.record) {
    tape.record(o.tensor, [x, y = o.node, c = std::vector<double>(coeffs.begin(), coeffs.end())] {
      double* dx = x->grad_buffer();
      for (std::size_t i = 0; i < c.size(); ++i) dx[i] += c[i] * y->grad[0];
    });
  }
  return o.tensor;
}

Tensor add(Tape& tape, const Tensor& lhs, const Tensor& rhs) {
  const auto& a = node_of(lhs);
  const auto& b = node_of(rhs);
  expect(lhs.shape() == rhs.shape(),
         "add: shape mismatch " + shape_str(lhs.shape()) + " vs " + shape_str(rhs.shape()));
  auto o = make_output(tape, lhs.shape(), {&lhs, &rhs});
  for (std::size_t i = 0; i < a->data.size(); ++i) o.node->data[i] = a->data[i] + b->data[i];
  if (o.record) {
    tape.record(o.tensor, [a, b, y = o.node] {
      for (auto* in : {a.get(), b.get()}) {
        if (!in->requires_grad) continue;
        double* d = in->grad_buffer();
        for (std::size_t i = 0; i < y->grad.size(); ++i) d[i] += y->grad[i];
      }
    });
  }
  return o.tensor;
}

Tensor scale(Tape& tape, const Tensor& input, double factor) {
  return elementwise(
      tape, input, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Tensor add_const(Tape& tape, const Tensor& input, std::span<const double> constant) {
  const auto& x = node_of(input);
  expect(constant.size() == input.numel(), "add_const: size mismatch");
  auto o = make_output(tape, input.shape(), {&input});
  for (std::size_t i = 0; i < constant.size(); ++i) o.node->data[i] = x->data[i] + constant[i];
  if (o.record) {
    tape.record(o.tensor, [x, y = o.node] {
      double* dx = x->grad_buffer();
      for (std::size_t i = 0; i < y->grad.size(); ++i) dx[i] += y->grad[i];
    });
  }
  return o.tensor;
}

Tensor bce_loss(Tape& tape, const Tensor& logits, const Tensor& targets) {
  const auto& z = node_of(logits);
  const auto& t = node_of(targets);
  expect(logits.shape() == targets.shape(), "bce_loss: logits " + shape_str(logits.shape()) +
                                                " vs targets " + shape_str(targets.shape()));
  for (double v : t->data)
    if (v != 0.0 && v != 1.0) throw std::domain_error("bce_loss: target " + std::to_string(v) + " not in {0,1}");
  const auto [rows, cols] = rows_cols(logits);
  auto o = make_output(tape, {1}, {&logits});
  double acc = 0.0;
  for (std::size_t i = 0; i < z->data.size(); ++i) {
    const double v = z->data[i];
    // max(v,0) - v*t + log(1 + exp(-|v|))
    acc += std::max(v, 0.0) - v * t->data[i] + std::log1p(std::exp(-std::fabs(v)));
  }
  o.node->data[0] = acc / static_cast<double>(rows);
  if (o.record) {
    tape.record(o.tensor, [z, t, y = o.node, rows] {
      double* dz = z->grad_buffer();
      const double g = y->grad[0] / static_cast<double>(rows);
      for (std::size_t i = 0; i < z->data.size(); ++i) dz[i] += g * (stable_sigmoid(z->data[i]) - t->data[i]);
    });
  }
  (void)cols;
  return o.tensor;
}

Tensor mse_loss(Tape& tape, const Tensor& pred, const Tensor& targets) {
  const auto& p = node_of(pred);
  const auto& t = node_of(targets);
  expect(pred.shape() == targets.shape(),
         "mse_loss: pred " + shape_str(pred.shape()) + " vs targets " + shape_str(targets.shape()));
  const std::size_t rows = rows_cols(pred).first;
  auto o = make_output(tape, {1}, {&pred, &targets});
  double acc = 0.0;
  for (std::size_t i = 0; i < p->data.size(); ++i) {
    const double d = p->data[i] - t->data[i];
    acc += d * d;
  }
  o.node->data[0] = acc / static_cast<double>(rows);
  if (o.record) {
    tape.record(o.tensor, [p, t, y = o.node, rows] {
      const double g = 2.0 * y->grad[0] / static_cast<double>(rows);
      double* dp = p->requires_grad ? p->grad_buffer() : nullptr;
      double* dt = t->requires_grad ? t->grad_buffer() : nullptr;
      for (std::size_t i = 0; i < p->data.size(); ++i) {
        const double d = g * (p->data[i] - t->data[i]);
        if (dp) dp[i] += d;
        if (dt) dt[i] -= d;
      }
    });
  }
  return o.tensor;
}

Tensor softmax_ce_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels) {
  const auto& z = node_of(logits);
  expect(logits.rank() == 2, "softmax_ce_loss: logits must be [B x K], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  expect(labels.size() == rows, "softmax_ce_loss: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(rows) + " rows");
  for (auto l : labels)
    if (l >= k) throw std::domain_error("softmax_ce_loss: label " + std::to_string(l) + " >= class count");

  auto o = make_output(tape, {1}, {&logits});
  std::vector<double> probs(rows * k);
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = z->data.data() + r * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    acc += lse - row[labels[r]];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - lse);
  }
  o.node->data[0] = acc / static_cast<double>(rows);
  if (o.record) {
    tape.record(o.tensor, [z, y = o.node, probs = std::move(probs),
                           lab = std::vector<std::size_t>(labels.begin(), labels.end()), rows, k] {
      double* dz = z->grad_buffer();
      const double g = y->grad[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j)
          dz[r * k + j] += g * (probs[r * k + j] - (j == lab[r] ? 1.0 : 0.0));
    });
  }
  return o.tensor;
}

}  // namespace cbm
