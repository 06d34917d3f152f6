#include "tsdp/engine.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tsdp::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

Shape batched(std::size_t n, const Shape& per_sample) {
  Shape s;
  s.reserve(per_sample.size() + 1);
  s.push_back(n);
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

const Tensor& param(const LayerSpec& l, const char* name) {
  return l.params.at(name);
}

// Unrolls x [n, c, h, w] into columns [c*k*k, n*ho*wo].
MatR im2col(const Tensor& x, const LayerSpec& l) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = l.kernel, s = l.stride, pad = l.padding;
  const std::size_t ho = l.out_shape[1], wo = l.out_shape[2];
  const std::size_t p = ho * wo;
  MatR col = MatR::Zero(idx(c * k * k), idx(n * p));
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        double* row = col.row(idx((ci * k + kh) * k + kw)).data();
        for (std::size_t b = 0; b < n; ++b) {
          const double* src = &x.vec()[(b * c + ci) * h * w];
          double* dst = row + b * p;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s + kw) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[oh * wo + ow] = src[static_cast<std::size_t>(ih) * w +
                                      static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }
  return col;
}

void col2im(const MatR& col, const LayerSpec& l, Tensor& dx) {
  const std::size_t n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  const std::size_t k = l.kernel, s = l.stride, pad = l.padding;
  const std::size_t ho = l.out_shape[1], wo = l.out_shape[2];
  const std::size_t p = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const double* row = col.row(idx((ci * k + kh) * k + kw)).data();
        for (std::size_t b = 0; b < n; ++b) {
          double* dst = &dx.vec()[(b * c + ci) * h * w];
          const double* src = row + b * p;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s + kw) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw)] +=
                  src[oh * wo + ow];
            }
          }
        }
      }
    }
  }
}

Tensor conv_forward(const LayerSpec& l, const Tensor& x) {
  const std::size_t n = x.dim(0);
  const std::size_t co = l.c_out;
  const std::size_t p = l.out_shape[1] * l.out_shape[2];
  const MatR col = im2col(x, l);
  const Tensor& wt = param(l, "weight");
  CMapR wm(wt.vec().data(), idx(co), idx(wt.size() / co));
  const MatR y = wm * col;
  Tensor out(batched(n, l.out_shape));
  const double* bias = l.has_bias ? param(l, "bias").vec().data() : nullptr;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < co; ++c) {
      const double* src = y.row(idx(c)).data() + b * p;
      double* dst = &out.vec()[(b * co + c) * p];
      const double bv = bias ? bias[c] : 0.0;
      for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + bv;
    }
  }
  return out;
}

Tensor conv_backward(const LayerSpec& l, const Tensor& x, const Tensor& dy,
                     std::map<std::string, Tensor>* pg, bool want_dx) {
  const std::size_t n = x.dim(0);
  const std::size_t co = l.c_out;
  const std::size_t p = l.out_shape[1] * l.out_shape[2];
  MatR dym(idx(co), idx(n * p));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < co; ++c) {
      const double* src = &dy.vec()[(b * co + c) * p];
      std::copy(src, src + p, dym.row(idx(c)).data() + b * p);
    }
  }
  const Tensor& wt = param(l, "weight");
  CMapR wm(wt.vec().data(), idx(co), idx(wt.size() / co));
  if (pg) {
    const MatR col = im2col(x, l);
    Tensor dw(wt.shape());
    MapR(dw.vec().data(), idx(co), idx(wt.size() / co)).noalias() = dym * col.transpose();
    (*pg)["weight"] = std::move(dw);
    if (l.has_bias) {
      Tensor db({co});
      for (std::size_t c = 0; c < co; ++c) db[c] = dym.row(idx(c)).sum();
      (*pg)["bias"] = std::move(db);
    }
  }
  if (!want_dx) return {};
  const MatR dcol = wm.transpose() * dym;
  Tensor dx(x.shape());
  col2im(dcol, l, dx);
  return dx;
}

Tensor linear_forward(const LayerSpec& l, const Tensor& x) {
  const std::size_t n = x.dim(0);
  CMapR xm(x.vec().data(), idx(n), idx(l.c_in));
  const Tensor& wt = param(l, "weight");
  CMapR wm(wt.vec().data(), idx(l.c_out), idx(l.c_in));
  Tensor out({n, l.c_out});
  MapR om(out.vec().data(), idx(n), idx(l.c_out));
  om.noalias() = xm * wm.transpose();
  if (l.has_bias) {
    const auto& b = param(l, "bias").vec();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < l.c_out; ++c) out[r * l.c_out + c] += b[c];
    }
  }
  return out;
}

Tensor linear_backward(const LayerSpec& l, const Tensor& x, const Tensor& dy,
                       std::map<std::string, Tensor>* pg, bool want_dx) {
  const std::size_t n = x.dim(0);
  CMapR xm(x.vec().data(), idx(n), idx(l.c_in));
  CMapR dym(dy.vec().data(), idx(n), idx(l.c_out));
  const Tensor& wt = param(l, "weight");
  CMapR wm(wt.vec().data(), idx(l.c_out), idx(l.c_in));
  if (pg) {
    Tensor dw(wt.shape());
    MapR(dw.vec().data(), idx(l.c_out), idx(l.c_in)).noalias() = dym.transpose() * xm;
    (*pg)["weight"] = std::move(dw);
    if (l.has_bias) {
      Tensor db({l.c_out});
      for (std::size_t c = 0; c < l.c_out; ++c) db[c] = dym.col(idx(c)).sum();
      (*pg)["bias"] = std::move(db);
    }
  }
  if (!want_dx) return {};
  Tensor dx(x.shape());
  MapR(dx.vec().data(), idx(n), idx(l.c_in)).noalias() = dym * wm;
  return dx;
}

// Spatial size per channel for a [n, c, ...] activation.
std::size_t spatial(const Tensor& x) { return x.size() / (x.dim(0) * x.dim(1)); }

Tensor bn_forward(const LayerSpec& l, const Tensor& x, bool batch_stats,
                  Tensor* xhat_out, Tensor* inv_std_out, Tensor* mean_out,
                  Tensor* var_out) {
  const std::size_t n = x.dim(0), c = l.c_in, hw = spatial(x);
  const auto& gamma = param(l, "gamma").vec();
  const auto& beta = param(l, "beta").vec();
  Tensor mean({c}), var({c});
  if (batch_stats) {
    const double m = static_cast<double>(n * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* src = &x.vec()[(b * c + ch) * hw];
        for (std::size_t i = 0; i < hw; ++i) s += src[i];
      }
      const double mu = s / m;
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* src = &x.vec()[(b * c + ch) * hw];
        for (std::size_t i = 0; i < hw; ++i) v += (src[i] - mu) * (src[i] - mu);
      }
      mean[ch] = mu;
      var[ch] = v / m;
    }
  } else {
    mean = param(l, "running_mean");
    var = param(l, "running_var");
  }
  Tensor inv_std({c});
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + l.bn_eps);
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (x[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = xh;
        out[off + i] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  if (mean_out) *mean_out = std::move(mean);
  if (var_out) *var_out = std::move(var);
  return out;
}

Tensor bn_backward(const LayerSpec& l, const Tensor& dy, const Tensor& xhat,
                   const Tensor& inv_std, bool batch_stats,
                   std::map<std::string, Tensor>* pg, bool want_dx) {
  const std::size_t n = dy.dim(0), c = l.c_in, hw = spatial(dy);
  const auto& gamma = param(l, "gamma").vec();
  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy[ch] += dy[off + i];
        sum_dy_xhat[ch] += dy[off + i] * xhat[off + i];
      }
    }
  }
  if (pg) {
    (*pg)["gamma"] = Tensor({c}, sum_dy_xhat);
    (*pg)["beta"] = Tensor({c}, sum_dy);
  }
  if (!want_dx) return {};
  Tensor dx(dy.shape());
  const double m = static_cast<double>(n * hw);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      const double g = gamma[ch] * inv_std[ch];
      for (std::size_t i = 0; i < hw; ++i) {
        if (batch_stats) {
          dx[off + i] = g / m *
                        (m * dy[off + i] - sum_dy[ch] - xhat[off + i] * sum_dy_xhat[ch]);
        } else {
          dx[off + i] = g * dy[off + i];
        }
      }
    }
  }
  return dx;
}

Tensor avgpool_forward(const LayerSpec& l, const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = l.kernel, ho = h / k, wo = w / k;
  Tensor out({n, c, ho, wo});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          double s = 0.0;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) s += x.at(b, ch, oh * k + i, ow * k + j);
          out.at(b, ch, oh, ow) = s * inv;
        }
  return out;
}

Tensor avgpool_backward(const LayerSpec& l, const Tensor& dy, const Shape& xshape) {
  Tensor dx(xshape);
  const std::size_t n = dy.dim(0), c = dy.dim(1), ho = dy.dim(2), wo = dy.dim(3);
  const std::size_t k = l.kernel;
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          const double g = dy.at(b, ch, oh, ow) * inv;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) dx.at(b, ch, oh * k + i, ow * k + j) += g;
        }
  return dx;
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.dim(0), f = x.row_size();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* src = &x.vec()[r * f];
    double* dst = &out.vec()[r * f];
    const double mx = *std::max_element(src, src + f);
    double s = 0.0;
    for (std::size_t i = 0; i < f; ++i) {
      dst[i] = std::exp(src[i] - mx);
      s += dst[i];
    }
    for (std::size_t i = 0; i < f; ++i) dst[i] /= s;
  }
  return out;
}

Tensor forward_node(const Node& node, std::span<const Tensor* const> ins,
                    bool batch_stats, Trace* trace, std::size_t slot) {
  const LayerSpec& l = node.layer;
  const Tensor& x = *ins[0];
  const Shape want = batched(x.dim(0), l.in_shape);
  for (const Tensor* t : ins) {
    if (t->shape() != want) {
      throw GraphError("layer " + l.name + " received " + shape_str(t->shape()) +
                       ", expected " + shape_str(want));
    }
  }
  switch (l.kind) {
    case LayerKind::Conv2d:
      return conv_forward(l, x);
    case LayerKind::Linear:
      return linear_forward(l, x.reshaped({x.dim(0), l.c_in}));
    case LayerKind::BatchNorm: {
      const bool bs = batch_stats && !node.frozen;
      if (trace) {
        return bn_forward(l, x, bs, &trace->bn_xhat[slot], &trace->bn_inv_std[slot],
                          &trace->bn_mean[slot], &trace->bn_var[slot]);
      }
      return bn_forward(l, x, bs, nullptr, nullptr, nullptr, nullptr);
    }
    case LayerKind::ReLU: {
      Tensor out = x;
      for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case LayerKind::AvgPool:
      return avgpool_forward(l, x);
    case LayerKind::ResidualAdd: {
      Tensor out = x;
      for (std::size_t k = 1; k < ins.size(); ++k) {
        const auto& o = ins[k]->vec();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += o[i];
      }
      return out;
    }
    case LayerKind::Softmax:
      return softmax_rows(x);
    case LayerKind::Gate: {
      const double a = sigmoid(param(l, "logit")[0]);
      Tensor out = x;
      for (auto& v : out.vec()) v *= a;
      return out;
    }
  }
  throw GraphError("unhandled layer kind");
}

}  // namespace

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor run(const ModelGraph& g, const Tensor& x, Mode mode, Trace* trace) {
  const Shape want_tail = g.input_shape();
  if (x.rank() != want_tail.size() + 1 ||
      !std::equal(want_tail.begin(), want_tail.end(), x.shape().begin() + 1)) {
    throw GraphError("shape mismatch on edge input -> " + g.node(0).layer.name +
                     ": got " + shape_str(x.shape()) + ", model expects [n, " +
                     shape_str(want_tail).substr(1));
  }
  Trace local;
  Trace& tr = trace ? *trace : local;
  tr.mode = mode;
  tr.input = x;
  tr.outputs.assign(g.size(), Tensor{});
  tr.bn_xhat.assign(g.size(), Tensor{});
  tr.bn_inv_std.assign(g.size(), Tensor{});
  tr.bn_mean.assign(g.size(), Tensor{});
  tr.bn_var.assign(g.size(), Tensor{});
  // Without a caller trace, intermediate outputs are released once their
  // last consumer has run.
  std::vector<std::size_t> last_use(g.size(), 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (int s : g.node(i).inputs) {
      if (s >= 0) last_use[static_cast<std::size_t>(s)] = i;
    }
  }
  std::vector<const Tensor*> ins;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Node& node = g.node(i);
    ins.clear();
    for (int s : node.inputs) {
      ins.push_back(s < 0 ? &tr.input : &tr.outputs[static_cast<std::size_t>(s)]);
    }
    tr.outputs[i] = forward_node(node, ins, mode == Mode::Train,
                                 trace ? trace : nullptr, i);
    if (!trace) {
      for (int s : node.inputs) {
        if (s >= 0 && last_use[static_cast<std::size_t>(s)] == i) {
          tr.outputs[static_cast<std::size_t>(s)] = Tensor{};
        }
      }
    }
  }
  return tr.outputs.back();
}

Tensor apply_layer(const Node& node, std::span<const Tensor* const> inputs) {
  return forward_node(node, inputs, false, nullptr, 0);
}

Tensor softmax(const Tensor& logits) { return softmax_rows(logits); }

std::vector<int> argmax_rows(const Tensor& t) {
  const std::size_t n = t.dim(0), f = t.row_size();
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* src = &t.vec()[r * f];
    out[r] = static_cast<int>(std::max_element(src, src + f) - src);
  }
  return out;
}

Tensor forward(const ModelGraph& g, const Tensor& x) {
  Tensor out = run(g, x, Mode::Eval);
  switch (g.output_mode()) {
    case OutputMode::Logits:
      return out;
    case OutputMode::Probabilities:
      return softmax_rows(out);
    case OutputMode::LabelOnly: {
      const auto labels = argmax_rows(out);
      Tensor t({labels.size()});
      for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i];
      return t;
    }
  }
  return out;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad) {
  const std::size_t n = logits.dim(0), f = logits.row_size();
  if (labels.size() != n) throw std::invalid_argument("label count mismatch");
  const Tensor p = softmax_rows(logits);
  double loss = 0.0;
  if (grad) *grad = p;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= f) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside output arity " +
                                  std::to_string(f));
    }
    loss -= std::log(std::max(p[r * f + static_cast<std::size_t>(y)], 1e-300));
    if (grad) {
      (*grad)[r * f + static_cast<std::size_t>(y)] -= 1.0;
      for (std::size_t i = 0; i < f; ++i) (*grad)[r * f + i] *= inv_n;
    }
  }
  return loss * inv_n;
}

Tensor backward(const ModelGraph& g, const Trace& trace, const Tensor& grad_out,
                ParamGrads* grads, bool want_input_grad) {
  const std::size_t count = g.size();
  // A node needs its output gradient when something trainable, or the graph
  // input (if requested), lies upstream of it.
  std::vector<bool> upstream(count, false);
  for (std::size_t i = 0; i < count; ++i) {
    const Node& n = g.node(i);
    bool u = grads && !n.frozen && has_params(n.layer.kind);
    for (int s : n.inputs) {
      u = u || (s < 0 ? want_input_grad : upstream[static_cast<std::size_t>(s)]);
    }
    upstream[i] = u;
  }
  if (grads) grads->assign(count, {});
  std::vector<Tensor> dout(count);
  dout.back() = grad_out;
  Tensor dinput;
  auto accumulate = [&](int src, Tensor&& d) {
    Tensor& slot = src < 0 ? dinput : dout[static_cast<std::size_t>(src)];
    if (slot.empty()) {
      slot = std::move(d);
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += d[i];
    }
  };
  const bool train = trace.mode == Mode::Train;
  for (std::size_t ii = count; ii-- > 0;) {
    if (!upstream[ii] || dout[ii].empty()) continue;
    const Node& node = g.node(ii);
    const LayerSpec& l = node.layer;
    const Tensor& dy = dout[ii];
    auto input_of = [&](std::size_t k) -> const Tensor& {
      const int s = node.inputs[k];
      return s < 0 ? trace.input : trace.outputs[static_cast<std::size_t>(s)];
    };
    auto wants = [&](std::size_t k) {
      const int s = node.inputs[k];
      return s < 0 ? want_input_grad : upstream[static_cast<std::size_t>(s)];
    };
    std::map<std::string, Tensor>* pg =
        grads && !node.frozen && has_params(l.kind) ? &(*grads)[ii] : nullptr;
    const bool wdx = wants(0);
    switch (l.kind) {
      case LayerKind::Conv2d: {
        Tensor dx = conv_backward(l, input_of(0), dy, pg, wdx);
        if (wdx) accumulate(node.inputs[0], std::move(dx));
        break;
      }
      case LayerKind::Linear: {
        const Tensor& x = input_of(0);
        Tensor dx = linear_backward(l, x.reshaped({x.dim(0), l.c_in}),
                                    dy.reshaped({dy.dim(0), l.c_out}), pg, wdx);
        if (wdx) accumulate(node.inputs[0], dx.reshaped(x.shape()));
        break;
      }
      case LayerKind::BatchNorm: {
        Tensor dx = bn_backward(l, dy, trace.bn_xhat[ii], trace.bn_inv_std[ii],
                                train && !node.frozen, pg, wdx);
        if (wdx) accumulate(node.inputs[0], std::move(dx));
        break;
      }
      case LayerKind::ReLU: {
        if (!wdx) break;
        Tensor dx = dy;
        const auto& y = trace.outputs[ii].vec();
        for (std::size_t i = 0; i < dx.size(); ++i) {
          if (y[i] <= 0.0) dx[i] = 0.0;
        }
        accumulate(node.inputs[0], std::move(dx));
        break;
      }
      case LayerKind::AvgPool:
        if (wdx) accumulate(node.inputs[0], avgpool_backward(l, dy, input_of(0).shape()));
        break;
      case LayerKind::ResidualAdd:
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          if (wants(k)) accumulate(node.inputs[k], Tensor(dy));
        }
        break;
      case LayerKind::Softmax: {
        if (!wdx) break;
        const Tensor& y = trace.outputs[ii];
        const std::size_t n = y.dim(0), f = y.row_size();
        Tensor dx(y.shape());
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0.0;
          for (std::size_t i = 0; i < f; ++i) dot += dy[r * f + i] * y[r * f + i];
          for (std::size_t i = 0; i < f; ++i) {
            dx[r * f + i] = y[r * f + i] * (dy[r * f + i] - dot);
          }
        }
        accumulate(node.inputs[0], std::move(dx));
        break;
      }
      case LayerKind::Gate: {
        const double a = sigmoid(param(l, "logit")[0]);
        if (pg) {
          const auto& x = input_of(0).vec();
          double s = 0.0;
          for (std::size_t i = 0; i < x.size(); ++i) s += dy[i] * x[i];
          (*pg)["logit"] = Tensor({1}, s * a * (1.0 - a));
        }
        if (wdx) {
          Tensor dx = dy;
          for (auto& v : dx.vec()) v *= a;
          accumulate(node.inputs[0], std::move(dx));
        }
        break;
      }
    }
  }
  if (want_input_grad && dinput.empty()) dinput = Tensor(trace.input.shape());
  return dinput;
}

void batchnorm_affine(const LayerSpec& bn, std::vector<double>& scale,
                      std::vector<double>& shift) {
  const auto& gamma = bn.params.at("gamma").vec();
  const auto& beta = bn.params.at("beta").vec();
  const auto& mean = bn.params.at("running_mean").vec();
  const auto& var = bn.params.at("running_var").vec();
  scale.resize(bn.c_in);
  shift.resize(bn.c_in);
  for (std::size_t c = 0; c < bn.c_in; ++c) {
    scale[c] = gamma[c] / std::sqrt(var[c] + bn.bn_eps);
    shift[c] = beta[c] - scale[c] * mean[c];
  }
}

}  // namespace tsdp::nn
