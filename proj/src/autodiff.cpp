#include "qatforge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qatforge {

namespace {

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel())
    throw std::logic_error("reshape: element count mismatch");
  return Tensor(std::move(shape), t.values());
}

struct MatView {
  int64_t rows, cols;
};

// Slice-wise matmul over equal leading dims with optional logical
// transposes; ascending-k accumulation per output element.
Tensor bmm_impl(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
    throw std::invalid_argument("bmm: ranks must match and be >= 2");
  const int r = a.rank();
  int64_t batch = 1;
  for (int ax = 0; ax < r - 2; ++ax) {
    if (a.dim(ax) != b.dim(ax))
      throw std::invalid_argument("bmm: leading dims disagree: " +
                                  shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    batch *= a.dim(ax);
  }
  MatView av{a.dim(r - 2), a.dim(r - 1)};
  MatView bv{b.dim(r - 2), b.dim(r - 1)};
  const int64_t m = ta ? av.cols : av.rows;
  const int64_t ka = ta ? av.rows : av.cols;
  const int64_t kb = tb ? bv.cols : bv.rows;
  const int64_t n = tb ? bv.rows : bv.cols;
  if (ka != kb)
    throw std::invalid_argument("bmm: inner dimensions disagree: " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  const int64_t a_sz = av.rows * av.cols, b_sz = bv.rows * bv.cols;
  for (int64_t s = 0; s < batch; ++s) {
    const float* pa = a.data() + s * a_sz;
    const float* pb = b.data() + s * b_sz;
    float* po = out.data() + s * m * n;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (int64_t k = 0; k < ka; ++k) {
          float x = ta ? pa[k * av.cols + i] : pa[i * av.cols + k];
          float y = tb ? pb[j * bv.cols + k] : pb[k * bv.cols + j];
          acc += x * y;
        }
        po[i * n + j] = acc;
      }
  }
  return out;
}

void accumulate(Tensor& dst, const Tensor& src) {
  for (int64_t i = 0; i < dst.numel(); ++i) dst.at(i) += src.at(i);
}

}  // namespace

Tape::Node& Tape::node(NodeId id) {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw std::runtime_error("tape: invalid node id " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}

const Tape::Node& Tape::node(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw std::runtime_error("tape: invalid node id " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

Tensor& Tape::grad_buf(NodeId id) { return node(id).grad; }

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

const Tensor& Tape::grad(NodeId id) const {
  if (!ran_backward_)
    throw std::runtime_error("tape: gradient requested before backward");
  return node(id).grad;
}

double Tape::scalar_value(NodeId id) const {
  const Node& n = node(id);
  if (n.has_scalar_hi) return n.scalar_hi;
  if (n.value.numel() != 1)
    throw std::runtime_error("tape: scalar_value on a non-scalar node");
  return static_cast<double>(n.value.at(0));
}

NodeId Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.bound = &p;
  n.backward_fn = [](Tape&, Node& self) {
    accumulate(self.bound->grad, self.grad);
  };
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb))
    throw std::invalid_argument("add: shape mismatch " +
                                shape_str(va.shape()) + " vs " +
                                shape_str(vb.shape()));
  Node n;
  n.value = elementwise(EwKind::add, va, vb);
  n.inputs = {a, b};
  n.backward_fn = [](Tape& t, Node& self) {
    accumulate(t.grad_buf(self.inputs[0]), self.grad);
    accumulate(t.grad_buf(self.inputs[1]), self.grad);
  };
  return push(std::move(n));
}

NodeId Tape::add_bias(NodeId x, NodeId bias) {
  const Tensor& vx = value(x);
  const Tensor& vb = value(bias);
  if (vb.rank() != 1 || vb.dim(0) != vx.dim(vx.rank() - 1))
    throw std::invalid_argument("add_bias: bias shape " +
                                shape_str(vb.shape()) +
                                " does not match last axis of " +
                                shape_str(vx.shape()));
  const int64_t nfeat = vb.dim(0);
  Node n;
  n.value = Tensor(vx.shape());
  for (int64_t i = 0; i < vx.numel(); ++i)
    n.value.at(i) = vx.at(i) + vb.at(i % nfeat);
  n.inputs = {x, bias};
  n.backward_fn = [nfeat](Tape& t, Node& self) {
    accumulate(t.grad_buf(self.inputs[0]), self.grad);
    Tensor& gb = t.grad_buf(self.inputs[1]);
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      gb.at(i % nfeat) += self.grad.at(i);
  };
  return push(std::move(n));
}

NodeId Tape::scale(NodeId x, float c) {
  Node n;
  n.value = elementwise(EwKind::mul, value(x), c);
  n.inputs = {x};
  n.backward_fn = [c](Tape& t, Node& self) {
    Tensor& gx = t.grad_buf(self.inputs[0]);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.at(i) += self.grad.at(i) * c;
  };
  return push(std::move(n));
}

NodeId Tape::linear(NodeId x, NodeId w) {
  return quantized_linear(x, w, QuantSpec::make_float());
}

NodeId Tape::quantized_linear(NodeId x, NodeId w, const QuantSpec& spec,
                              const QuantizedTensor* frozen_w) {
  spec.validate();
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  if (vx.rank() < 2 || vw.rank() != 2)
    throw std::invalid_argument("quantized_linear: need [...,K] x [K,N]");
  const int64_t k = vw.dim(0), nout = vw.dim(1);
  if (vx.dim(vx.rank() - 1) != k)
    throw std::invalid_argument("quantized_linear: inner dims disagree: " +
                                shape_str(vx.shape()) + " x " +
                                shape_str(vw.shape()));
  const int64_t rows = vx.numel() / k;
  Tensor x2 = reshape(vx, {rows, k});

  Tensor w_hat;   // weight as seen by the forward pass (float)
  Tensor x_hat;   // activation as seen by the forward pass
  Tensor y;
  if (spec.path == ExecPath::float32) {
    w_hat = vw;
    x_hat = x2;
    y = matmul(x2, vw);
  } else if (spec.path == ExecPath::fake) {
    w_hat = spec.weight_bits
                ? fake_quant(vw, 1, *spec.weight_bits, spec.rounding)
                : vw;
    x_hat = spec.activation_bits
                ? fake_quant(x2, spec.activation_axis, *spec.activation_bits,
                             spec.rounding)
                : x2;
    y = matmul(x_hat, w_hat);
  } else {  // native
    std::optional<QuantizedTensor> qw;
    if (spec.weight_bits) {
      if (frozen_w) {
        if (frozen_w->bits() != *spec.weight_bits ||
            frozen_w->shape() != vw.shape())
          throw std::invalid_argument(
              "quantized_linear: frozen codes do not match the spec");
        qw = *frozen_w;
      } else {
        qw = quantize_dynamic(vw, 1, *spec.weight_bits, spec.rounding);
      }
      w_hat = dequantize(*qw);
    } else {
      w_hat = vw;
    }
    if (spec.activation_bits) {
      QuantizedTensor qx = quantize_dynamic(
          x2, spec.activation_axis, *spec.activation_bits, spec.rounding);
      x_hat = dequantize(qx);
      y = qw ? quantized_matmul_native(qx, *qw) : matmul(x_hat, w_hat);
    } else {
      x_hat = x2;
      y = matmul(x2, w_hat);
    }
  }

  Shape out_shape(vx.shape().begin(), vx.shape().end() - 1);
  out_shape.push_back(nout);

  Node n;
  n.value = reshape(y, out_shape);
  n.inputs = {x, w};
  // Straight-through: quantizers have identity Jacobians, so gradients are
  // those of a plain matmul evaluated at the dequantized operands.
  n.backward_fn = [x_hat = std::move(x_hat), w_hat = std::move(w_hat), rows,
                   nout](Tape& t, Node& self) {
    Tensor g2 = reshape(self.grad, {rows, nout});
    Tensor dx = matmul(g2, transpose2d(w_hat));
    Tensor& gx = t.grad_buf(self.inputs[0]);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.at(i) += dx.at(i);
    Tensor dw = matmul(transpose2d(x_hat), g2);
    accumulate(t.grad_buf(self.inputs[1]), dw);
  };
  return push(std::move(n));
}

NodeId Tape::fake_quant_ste(NodeId x, int axis, int bits, Rounding rounding) {
  Node n;
  n.value = fake_quant(value(x), axis, bits, rounding);
  n.inputs = {x};
  n.backward_fn = [](Tape& t, Node& self) {
    accumulate(t.grad_buf(self.inputs[0]), self.grad);
  };
  return push(std::move(n));
}

NodeId Tape::swish(NodeId x) {
  const Tensor& vx = value(x);
  Tensor sig(vx.shape());
  Node n;
  n.value = Tensor(vx.shape());
  for (int64_t i = 0; i < vx.numel(); ++i) {
    float s = 1.0f / (1.0f + std::exp(-vx.at(i)));
    sig.at(i) = s;
    n.value.at(i) = vx.at(i) * s;
  }
  n.inputs = {x};
  n.backward_fn = [sig = std::move(sig)](Tape& t, Node& self) {
    const Tensor& vx = t.value(self.inputs[0]);
    Tensor& gx = t.grad_buf(self.inputs[0]);
    for (int64_t i = 0; i < gx.numel(); ++i) {
      float s = sig.at(i);
      gx.at(i) += self.grad.at(i) * s * (1.0f + vx.at(i) * (1.0f - s));
    }
  };
  return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, float eps) {
  const Tensor& vx = value(x);
  const Tensor& vg = value(gamma);
  const Tensor& vb = value(beta);
  const int64_t d = vx.dim(vx.rank() - 1);
  if (vg.rank() != 1 || vg.dim(0) != d || !vg.same_shape(vb))
    throw std::invalid_argument("layer_norm: gamma/beta must be [D]");
  const int64_t rows = vx.numel() / d;
  Tensor xhat(vx.shape());
  Tensor rstd(Shape{rows});
  Node n;
  n.value = Tensor(vx.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* px = vx.data() + r * d;
    float mu = 0.0f;
    for (int64_t j = 0; j < d; ++j) mu += px[j];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (int64_t j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= static_cast<float>(d);
    float rs = 1.0f / std::sqrt(var + eps);
    rstd.at(r) = rs;
    for (int64_t j = 0; j < d; ++j) {
      float xn = (px[j] - mu) * rs;
      xhat.at(r * d + j) = xn;
      n.value.at(r * d + j) = xn * vg.at(j) + vb.at(j);
    }
  }
  n.inputs = {x, gamma, beta};
  n.backward_fn = [xhat = std::move(xhat), rstd = std::move(rstd), rows,
                   d](Tape& t, Node& self) {
    const Tensor& vg = t.value(self.inputs[1]);
    Tensor& gx = t.grad_buf(self.inputs[0]);
    Tensor& gg = t.grad_buf(self.inputs[1]);
    Tensor& gb = t.grad_buf(self.inputs[2]);
    for (int64_t r = 0; r < rows; ++r) {
      float sum_dxn = 0.0f, sum_dxn_xhat = 0.0f;
      for (int64_t j = 0; j < d; ++j) {
        float g = self.grad.at(r * d + j);
        float xh = xhat.at(r * d + j);
        gb.at(j) += g;
        gg.at(j) += g * xh;
        float dxn = g * vg.at(j);
        sum_dxn += dxn;
        sum_dxn_xhat += dxn * xh;
      }
      const float inv_d = 1.0f / static_cast<float>(d);
      for (int64_t j = 0; j < d; ++j) {
        float dxn = self.grad.at(r * d + j) * vg.at(j);
        float xh = xhat.at(r * d + j);
        gx.at(r * d + j) += rstd.at(r) * (dxn - inv_d * sum_dxn -
                                          xh * inv_d * sum_dxn_xhat);
      }
    }
  };
  return push(std::move(n));
}

NodeId Tape::softmax_last(NodeId x, bool causal) {
  const Tensor& vx = value(x);
  const int64_t d = vx.dim(vx.rank() - 1);
  if (causal && (vx.rank() < 2 || vx.dim(vx.rank() - 2) != d))
    throw std::invalid_argument(
        "softmax_last: causal mask needs square trailing dims");
  const int64_t rows = vx.numel() / d;
  Node n;
  n.value = Tensor(vx.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* px = vx.data() + r * d;
    float* py = n.value.data() + r * d;
    // with the causal mask, row index within the square block caps the
    // visible prefix
    int64_t limit = causal ? (r % d) + 1 : d;
    float mx = px[0];
    for (int64_t j = 1; j < limit; ++j) mx = std::max(mx, px[j]);
    float denom = 0.0f;
    for (int64_t j = 0; j < limit; ++j) {
      py[j] = std::exp(px[j] - mx);
      denom += py[j];
    }
    for (int64_t j = 0; j < limit; ++j) py[j] /= denom;
    for (int64_t j = limit; j < d; ++j) py[j] = 0.0f;
  }
  n.inputs = {x};
  n.backward_fn = [d, rows](Tape& t, Node& self) {
    Tensor& gx = t.grad_buf(self.inputs[0]);
    for (int64_t r = 0; r < rows; ++r) {
      const float* p = self.value.data() + r * d;
      const float* g = self.grad.data() + r * d;
      float dot = 0.0f;
      for (int64_t j = 0; j < d; ++j) dot += p[j] * g[j];
      for (int64_t j = 0; j < d; ++j)
        gx.at(r * d + j) += p[j] * (g[j] - dot);
    }
  };
  return push(std::move(n));
}

NodeId Tape::bmm(NodeId a, NodeId b) {
  Node n;
  n.value = bmm_impl(value(a), value(b), false, false);
  n.inputs = {a, b};
  n.backward_fn = [](Tape& t, Node& self) {
    const Tensor& va = t.value(self.inputs[0]);
    const Tensor& vb = t.value(self.inputs[1]);
    accumulate(t.grad_buf(self.inputs[0]),
               bmm_impl(self.grad, vb, false, true));
    accumulate(t.grad_buf(self.inputs[1]),
               bmm_impl(va, self.grad, true, false));
  };
  return push(std::move(n));
}

namespace {

Tensor swap_last2(const Tensor& t) {
  const int r = t.rank();
  if (r < 2) throw std::invalid_argument("transpose_last2: rank must be >= 2");
  const int64_t m = t.dim(r - 2), n = t.dim(r - 1);
  Shape shape = t.shape();
  std::swap(shape[static_cast<size_t>(r - 2)],
            shape[static_cast<size_t>(r - 1)]);
  Tensor out(shape);
  const int64_t batch = t.numel() / (m * n);
  for (int64_t s = 0; s < batch; ++s)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        out.at(s * m * n + j * m + i) = t.at(s * m * n + i * n + j);
  return out;
}

}  // namespace

NodeId Tape::transpose_last2(NodeId x) {
  Node n;
  n.value = swap_last2(value(x));
  n.inputs = {x};
  n.backward_fn = [](Tape& t, Node& self) {
    accumulate(t.grad_buf(self.inputs[0]), swap_last2(self.grad));
  };
  return push(std::move(n));
}

NodeId Tape::split_heads(NodeId x, int heads) {
  const Tensor& vx = value(x);
  if (vx.rank() != 3)
    throw std::invalid_argument("split_heads: expected [B,T,D]");
  const int64_t b = vx.dim(0), tt = vx.dim(1), d = vx.dim(2);
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("split_heads: heads must divide model dim");
  const int64_t h = heads, e = d / heads;
  Node n;
  n.value = Tensor(Shape{b, h, tt, e});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t hi = 0; hi < h; ++hi)
      for (int64_t ti = 0; ti < tt; ++ti)
        for (int64_t ei = 0; ei < e; ++ei)
          n.value.at(((bi * h + hi) * tt + ti) * e + ei) =
              vx.at((bi * tt + ti) * d + hi * e + ei);
  n.inputs = {x};
  n.backward_fn = [b, tt, d, h, e](Tape& t, Node& self) {
    Tensor& gx = t.grad_buf(self.inputs[0]);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t hi = 0; hi < h; ++hi)
        for (int64_t ti = 0; ti < tt; ++ti)
          for (int64_t ei = 0; ei < e; ++ei)
            gx.at((bi * tt + ti) * d + hi * e + ei) +=
                self.grad.at(((bi * h + hi) * tt + ti) * e + ei);
  };
  return push(std::move(n));
}

NodeId Tape::merge_heads(NodeId x) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4)
    throw std::invalid_argument("merge_heads: expected [B,H,T,E]");
  const int64_t b = vx.dim(0), h = vx.dim(1), tt = vx.dim(2), e = vx.dim(3);
  const int64_t d = h * e;
  Node n;
  n.value = Tensor(Shape{b, tt, d});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t hi = 0; hi < h; ++hi)
      for (int64_t ti = 0; ti < tt; ++ti)
        for (int64_t ei = 0; ei < e; ++ei)
          n.value.at((bi * tt + ti) * d + hi * e + ei) =
              vx.at(((bi * h + hi) * tt + ti) * e + ei);
  n.inputs = {x};
  n.backward_fn = [b, h, tt, e, d](Tape& t, Node& self) {
    Tensor& gx = t.grad_buf(self.inputs[0]);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t hi = 0; hi < h; ++hi)
        for (int64_t ti = 0; ti < tt; ++ti)
          for (int64_t ei = 0; ei < e; ++ei)
            gx.at(((bi * h + hi) * tt + ti) * e + ei) +=
                self.grad.at((bi * tt + ti) * d + hi * e + ei);
  };
  return push(std::move(n));
}

NodeId Tape::mean_axis1(NodeId x) {
  const Tensor& vx = value(x);
  if (vx.rank() != 3)
    throw std::invalid_argument("mean_axis1: expected [B,T,D]");
  const int64_t b = vx.dim(0), tt = vx.dim(1), d = vx.dim(2);
  Node n;
  n.value = Tensor(Shape{b, d});
  const float inv_t = 1.0f / static_cast<float>(tt);
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t di = 0; di < d; ++di) {
      float acc = 0.0f;
      for (int64_t ti = 0; ti < tt; ++ti)
        acc += vx.at((bi * tt + ti) * d + di);
      n.value.at(bi * d + di) = acc * inv_t;
    }
  n.inputs = {x};
  n.backward_fn = [b, tt, d, inv_t](Tape& t, Node& self) {
    Tensor& gx = t.grad_buf(self.inputs[0]);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ti = 0; ti < tt; ++ti)
        for (int64_t di = 0; di < d; ++di)
          gx.at((bi * tt + ti) * d + di) += self.grad.at(bi * d + di) * inv_t;
  };
  return push(std::move(n));
}

NodeId Tape::embedding(NodeId table, std::vector<int32_t> ids, int64_t batch,
                       int64_t time) {
  const Tensor& vt = value(table);
  if (vt.rank() != 2)
    throw std::invalid_argument("embedding: table must be [V,D]");
  if (static_cast<int64_t>(ids.size()) != batch * time)
    throw std::invalid_argument("embedding: id count mismatch");
  const int64_t v = vt.dim(0), d = vt.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: token id " + std::to_string(id) +
                                  " outside vocab of " + std::to_string(v));
  Node n;
  n.value = Tensor(Shape{batch, time, d});
  for (int64_t i = 0; i < batch * time; ++i)
    for (int64_t j = 0; j < d; ++j)
      n.value.at(i * d + j) = vt.at(ids[static_cast<size_t>(i)] * d + j);
  n.inputs = {table};
  n.backward_fn = [ids = std::move(ids), d](Tape& t, Node& self) {
    Tensor& gt = t.grad_buf(self.inputs[0]);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < d; ++j)
        gt.at(ids[i] * d + j) += self.grad.at(static_cast<int64_t>(i) * d + j);
  };
  return push(std::move(n));
}

NodeId Tape::depthwise_conv1d(NodeId x, NodeId kernel, bool causal) {
  const Tensor& vx = value(x);
  const Tensor& vk = value(kernel);
  if (vx.rank() != 3 || vk.rank() != 2)
    throw std::invalid_argument("depthwise_conv1d: expected [B,T,D], [K,D]");
  const int64_t b = vx.dim(0), tt = vx.dim(1), d = vx.dim(2);
  const int64_t ksz = vk.dim(0);
  if (vk.dim(1) != d)
    throw std::invalid_argument("depthwise_conv1d: channel count mismatch");
  if (!causal && ksz % 2 == 0)
    throw std::invalid_argument(
        "depthwise_conv1d: centered padding needs an odd kernel");
  const int64_t off = causal ? ksz - 1 : (ksz - 1) / 2;
  Node n;
  n.value = Tensor(vx.shape());
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ti = 0; ti < tt; ++ti)
      for (int64_t di = 0; di < d; ++di) {
        float acc = 0.0f;
        for (int64_t k = 0; k < ksz; ++k) {
          int64_t src = ti - off + k;
          if (src < 0 || src >= tt) continue;
          acc += vx.at((bi * tt + src) * d + di) * vk.at(k * d + di);
        }
        n.value.at((bi * tt + ti) * d + di) = acc;
      }
  n.inputs = {x, kernel};
  n.backward_fn = [b, tt, d, ksz, off](Tape& t, Node& self) {
    const Tensor& vx = t.value(self.inputs[0]);
    const Tensor& vk = t.value(self.inputs[1]);
    Tensor& gx = t.grad_buf(self.inputs[0]);
    Tensor& gk = t.grad_buf(self.inputs[1]);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ti = 0; ti < tt; ++ti)
        for (int64_t di = 0; di < d; ++di) {
          float g = self.grad.at((bi * tt + ti) * d + di);
          for (int64_t k = 0; k < ksz; ++k) {
            int64_t src = ti - off + k;
            if (src < 0 || src >= tt) continue;
            gx.at((bi * tt + src) * d + di) += g * vk.at(k * d + di);
            gk.at(k * d + di) += g * vx.at((bi * tt + src) * d + di);
          }
        }
  };
  return push(std::move(n));
}

NodeId Tape::sum(NodeId x) {
  const Tensor& vx = value(x);
  double acc = 0.0;
  for (int64_t i = 0; i < vx.numel(); ++i)
    acc += static_cast<double>(vx.at(i));
  Node n;
  n.value = Tensor::scalar(static_cast<float>(acc));
  n.scalar_hi = acc;
  n.has_scalar_hi = true;
  n.inputs = {x};
  n.backward_fn = [](Tape& t, Node& self) {
    Tensor& gx = t.grad_buf(self.inputs[0]);
    float g = self.grad.at(0);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.at(i) += g;
  };
  return push(std::move(n));
}

NodeId Tape::softmax_cross_entropy(NodeId logits,
                                   std::vector<int32_t> labels) {
  const Tensor& vl = value(logits);
  if (vl.rank() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be [N,C]");
  const int64_t nrows = vl.dim(0), c = vl.dim(1);
  if (static_cast<int64_t>(labels.size()) != nrows)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  for (int32_t y : labels)
    if (y < 0 || y >= c)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
  Tensor probs(vl.shape());
  double loss = 0.0;
  for (int64_t r = 0; r < nrows; ++r) {
    const float* p = vl.data() + r * c;
    float mx = p[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, p[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j)
      denom += std::exp(static_cast<double>(p[j]) - mx);
    for (int64_t j = 0; j < c; ++j)
      probs.at(r * c + j) = static_cast<float>(
          std::exp(static_cast<double>(p[j]) - mx) / denom);
    loss += std::log(denom) -
            (static_cast<double>(p[labels[static_cast<size_t>(r)]]) - mx);
  }
  loss /= static_cast<double>(nrows);
  Node n;
  n.value = Tensor::scalar(static_cast<float>(loss));
  n.scalar_hi = loss;
  n.has_scalar_hi = true;
  n.inputs = {logits};
  n.backward_fn = [probs = std::move(probs), labels = std::move(labels), nrows,
                   c](Tape& t, Node& self) {
    Tensor& gl = t.grad_buf(self.inputs[0]);
    const float g = self.grad.at(0) / static_cast<float>(nrows);
    for (int64_t r = 0; r < nrows; ++r)
      for (int64_t j = 0; j < c; ++j) {
        float onehot = (labels[static_cast<size_t>(r)] == j) ? 1.0f : 0.0f;
        gl.at(r * c + j) += g * (probs.at(r * c + j) - onehot);
      }
  };
  return push(std::move(n));
}

void Tape::backward(NodeId root) {
  if (nodes_.empty())
    throw std::runtime_error("backward without a recorded forward pass");
  Node& rn = node(root);
  if (rn.value.numel() != 1)
    throw std::runtime_error("backward: root must be a scalar");
  for (auto& n : nodes_) n.grad = Tensor(n.value.shape(), 0.0f);
  rn.grad.at(0) = 1.0f;
  for (NodeId id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.backward_fn) n.backward_fn(*this, n);
  }
  ran_backward_ = true;
}

void SgdMomentum::step(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    if (!p->grad.all_finite())
      throw std::runtime_error("sgd step: non-finite gradient for parameter " +
                               p->name);
    Tensor* vel = nullptr;
    for (auto& [q, v] : velocity_)
      if (q == p) {
        vel = &v;
        break;
      }
    if (!vel) {
      velocity_.emplace_back(p, Tensor(p->value.shape(), 0.0f));
      vel = &velocity_.back().second;
    }
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      float v = momentum_ * vel->at(i) + p->grad.at(i);
      vel->at(i) = v;
      p->value.at(i) -= lr_ * v;
    }
  }
}

GradCheckReport grad_check(const std::function<double(bool)>& run,
                           const std::vector<Parameter*>& params, double h) {
  for (Parameter* p : params) p->zero_grad();
  run(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    float max_abs_diff = 0.0f, max_mag = 0.0f;
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      const float orig = p->value.at(i);
      p->value.at(i) = static_cast<float>(orig + h);
      const double hp = static_cast<double>(p->value.at(i)) - orig;
      const double lp = run(false);
      p->value.at(i) = static_cast<float>(orig - h);
      const double hm = static_cast<double>(orig) - p->value.at(i);
      const double lm = run(false);
      p->value.at(i) = orig;
      const float fd = static_cast<float>((lp - lm) / (hp + hm));
      const float a = analytic[pi].at(i);
      max_abs_diff = std::max(max_abs_diff, std::fabs(a - fd));
      max_mag = std::max({max_mag, std::fabs(a), std::fabs(fd)});
    }
    float rel = max_abs_diff / std::max(max_mag, 1e-12f);
    rep.per_param.push_back({p->name, rel});
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
  }
  return rep;
}

}  // namespace qatforge
