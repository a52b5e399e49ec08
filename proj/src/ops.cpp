#include "forge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

FORGE_NAMESPACE_BEGIN
namespace ops {

namespace {

using detail::grad_buffer;
using detail::make_result;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

bool wants_grad(const ImplPtr& p) { return p && p->requires_grad; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::int64_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + to_string(t.shape()));
  }
}

// x[c][h][w] -> col[(c*kh+i)*kw+j][oh*ow_n+ow]
void im2col(const Real* src, std::int64_t channels, std::int64_t height, std::int64_t width,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t out_h, std::int64_t out_w, Real* col) {
  const std::int64_t positions = out_h * out_w;
  for (std::int64_t c = 0; c < channels; ++c) {
    const Real* plane = src + c * height * width;
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j) {
        Real* row = col + ((c * kh + i) * kw + j) * positions;
        for (std::int64_t oh = 0; oh < out_h; ++oh) {
          const std::int64_t ih = oh * stride - pad + i;
          Real* dst = row + oh * out_w;
          if (ih < 0 || ih >= height) {
            std::fill(dst, dst + out_w, Real{0});
            continue;
          }
          const Real* line = plane + ih * width;
          for (std::int64_t ow = 0; ow < out_w; ++ow) {
            const std::int64_t iw = ow * stride - pad + j;
            dst[ow] = (iw >= 0 && iw < width) ? line[iw] : Real{0};
          }
        }
      }
    }
  }
}

void col2im(const Real* col, std::int64_t channels, std::int64_t height, std::int64_t width,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t out_h, std::int64_t out_w, Real* dst) {
  const std::int64_t positions = out_h * out_w;
  for (std::int64_t c = 0; c < channels; ++c) {
    Real* plane = dst + c * height * width;
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j) {
        const Real* row = col + ((c * kh + i) * kw + j) * positions;
        for (std::int64_t oh = 0; oh < out_h; ++oh) {
          const std::int64_t ih = oh * stride - pad + i;
          if (ih < 0 || ih >= height) continue;
          Real* line = plane + ih * width;
          const Real* srcrow = row + oh * out_w;
          for (std::int64_t ow = 0; ow < out_w; ++ow) {
            const std::int64_t iw = ow * stride - pad + j;
            if (iw >= 0 && iw < width) line[iw] += srcrow[ow];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opt) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  const std::int64_t n_batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t groups = opt.groups, stride = opt.stride, pad = opt.padding;
  if (groups <= 0 || stride <= 0 || pad < 0) {
    throw ShapeError("conv2d: groups and stride must be positive, padding non-negative");
  }
  if (cin % groups != 0 || cout % groups != 0) {
    throw ShapeError("conv2d: channels (in " + std::to_string(cin) + ", out " +
                     std::to_string(cout) + ") not divisible by groups " + std::to_string(groups));
  }
  const std::int64_t cin_g = cin / groups, cout_g = cout / groups;
  if (w.dim(1) != cin_g) {
    throw ShapeError("conv2d: weight " + to_string(w.shape()) + " expects " +
                     std::to_string(w.dim(1) * groups) + " input channels, input has " +
                     std::to_string(cin) + " (" + to_string(x.shape()) + ")");
  }
  if (bias.defined() && bias.numel() != cout) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " elements, expected " +
                     std::to_string(cout));
  }
  const std::int64_t out_h = (height + 2 * pad - kh) / stride + 1;
  const std::int64_t out_w = (width + 2 * pad - kw) / stride + 1;
  if (height + 2 * pad < kh || width + 2 * pad < kw || out_h <= 0 || out_w <= 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + to_string(x.shape()));
  }

  const std::int64_t k_len = cin_g * kh * kw;
  const std::int64_t positions = out_h * out_w;
  auto cols = std::make_shared<std::vector<Real>>(
      static_cast<std::size_t>(n_batch * groups * k_len * positions));
  std::vector<Real> out(static_cast<std::size_t>(n_batch * cout * positions), Real{0});

  const Real* xd = x.values().data();
  const Real* wd = w.values().data();
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t g = 0; g < groups; ++g) {
      Real* col = cols->data() + (n * groups + g) * k_len * positions;
      im2col(xd + (n * cin + g * cin_g) * height * width, cin_g, height, width, kh, kw, stride,
             pad, out_h, out_w, col);
      for (std::int64_t co = 0; co < cout_g; ++co) {
        const std::int64_t oc = g * cout_g + co;
        Real* o = out.data() + (n * cout + oc) * positions;
        if (bias.defined()) std::fill(o, o + positions, bias.values()[oc]);
        const Real* wrow = wd + oc * k_len;
        for (std::int64_t k = 0; k < k_len; ++k) {
          const Real wv = wrow[k];
          const Real* crow = col + k * positions;
          for (std::int64_t p = 0; p < positions; ++p) o[p] += wv * crow[p];
        }
      }
    }
  }

  ImplPtr xi = x.impl_ptr(), wi = w.impl_ptr(), bi = bias.defined() ? bias.impl_ptr() : nullptr;
  return make_result(
      "conv2d", Shape{n_batch, cout, out_h, out_w}, std::move(out), {&x, &w, &bias},
      [=](const TensorImpl& res) {
        const Real* go = res.grad.data();
        if (wants_grad(bi)) {
          auto gb = grad_buffer(*bi);
          for (std::int64_t n = 0; n < n_batch; ++n) {
            for (std::int64_t oc = 0; oc < cout; ++oc) {
              const Real* row = go + (n * cout + oc) * positions;
              Real acc = 0;
              for (std::int64_t p = 0; p < positions; ++p) acc += row[p];
              gb[oc] += acc;
            }
          }
        }
        if (wants_grad(wi)) {
          auto gw = grad_buffer(*wi);
          std::vector<Real> col_t(static_cast<std::size_t>(k_len * positions));
          for (std::int64_t n = 0; n < n_batch; ++n) {
            for (std::int64_t g = 0; g < groups; ++g) {
              const Real* col = cols->data() + (n * groups + g) * k_len * positions;
              for (std::int64_t k = 0; k < k_len; ++k) {
                for (std::int64_t p = 0; p < positions; ++p) {
                  col_t[p * k_len + k] = col[k * positions + p];
                }
              }
              for (std::int64_t co = 0; co < cout_g; ++co) {
                const std::int64_t oc = g * cout_g + co;
                const Real* grow = go + (n * cout + oc) * positions;
                Real* gwrow = gw.data() + oc * k_len;
                for (std::int64_t p = 0; p < positions; ++p) {
                  const Real gv = grow[p];
                  const Real* crow = col_t.data() + p * k_len;
                  for (std::int64_t k = 0; k < k_len; ++k) gwrow[k] += gv * crow[k];
                }
              }
            }
          }
        }
        if (wants_grad(xi)) {
          auto gx = grad_buffer(*xi);
          const Real* wdata = wi->data.data();
          std::vector<Real> dcol(static_cast<std::size_t>(k_len * positions));
          for (std::int64_t n = 0; n < n_batch; ++n) {
            for (std::int64_t g = 0; g < groups; ++g) {
              std::fill(dcol.begin(), dcol.end(), Real{0});
              for (std::int64_t co = 0; co < cout_g; ++co) {
                const std::int64_t oc = g * cout_g + co;
                const Real* grow = go + (n * cout + oc) * positions;
                const Real* wrow = wdata + oc * k_len;
                for (std::int64_t k = 0; k < k_len; ++k) {
                  const Real wv = wrow[k];
                  Real* drow = dcol.data() + k * positions;
                  for (std::int64_t p = 0; p < positions; ++p) drow[p] += wv * grow[p];
                }
              }
              col2im(dcol.data(), cin_g, height, width, kh, kw, stride, pad, out_h, out_w,
                     gx.data() + (n * cin + g * cin_g) * height * width);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// linear

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const std::int64_t n_batch = x.dim(0), feat = x.dim(1), outs = w.dim(0);
  if (w.dim(1) != feat) {
    throw ShapeError("linear: input has " + std::to_string(feat) + " features, weight " +
                     to_string(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (bias.defined() && bias.numel() != outs) {
    throw ShapeError("linear: bias has " + std::to_string(bias.numel()) + " elements, expected " +
                     std::to_string(outs));
  }
  std::vector<Real> out(static_cast<std::size_t>(n_batch * outs));
  const Real* xd = x.values().data();
  const Real* wd = w.values().data();
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t o = 0; o < outs; ++o) {
      Real acc = bias.defined() ? bias.values()[o] : Real{0};
      const Real* xr = xd + n * feat;
      const Real* wr = wd + o * feat;
      for (std::int64_t f = 0; f < feat; ++f) acc += xr[f] * wr[f];
      out[n * outs + o] = acc;
    }
  }
  ImplPtr xi = x.impl_ptr(), wi = w.impl_ptr(), bi = bias.defined() ? bias.impl_ptr() : nullptr;
  return make_result("linear", Shape{n_batch, outs}, std::move(out), {&x, &w, &bias},
                     [=](const TensorImpl& res) {
                       const Real* go = res.grad.data();
                       if (wants_grad(bi)) {
                         auto gb = grad_buffer(*bi);
                         for (std::int64_t n = 0; n < n_batch; ++n) {
                           for (std::int64_t o = 0; o < outs; ++o) gb[o] += go[n * outs + o];
                         }
                       }
                       if (wants_grad(wi)) {
                         auto gw = grad_buffer(*wi);
                         for (std::int64_t n = 0; n < n_batch; ++n) {
                           const Real* xr = xi->data.data() + n * feat;
                           for (std::int64_t o = 0; o < outs; ++o) {
                             const Real gv = go[n * outs + o];
                             Real* gwr = gw.data() + o * feat;
                             for (std::int64_t f = 0; f < feat; ++f) gwr[f] += gv * xr[f];
                           }
                         }
                       }
                       if (wants_grad(xi)) {
                         auto gx = grad_buffer(*xi);
                         for (std::int64_t n = 0; n < n_batch; ++n) {
                           Real* gxr = gx.data() + n * feat;
                           for (std::int64_t o = 0; o < outs; ++o) {
                             const Real gv = go[n * outs + o];
                             const Real* wr = wi->data.data() + o * feat;
                             for (std::int64_t f = 0; f < feat; ++f) gxr[f] += gv * wr[f];
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// pooling

Tensor maxpool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride) {
  require_rank(x, 4, "maxpool2d", "input");
  if (kernel <= 0 || stride <= 0) throw ShapeError("maxpool2d: kernel and stride must be positive");
  const std::int64_t n_batch = x.dim(0), ch = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (height < kernel || width < kernel) {
    throw ShapeError("maxpool2d: kernel " + std::to_string(kernel) + " larger than input " +
                     to_string(x.shape()));
  }
  const std::int64_t out_h = (height - kernel) / stride + 1, out_w = (width - kernel) / stride + 1;
  const std::int64_t planes = n_batch * ch;
  std::vector<Real> out(static_cast<std::size_t>(planes * out_h * out_w));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const Real* xd = x.values().data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const Real* src = xd + pl * height * width;
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        std::int64_t best = (oh * stride) * width + ow * stride;
        for (std::int64_t i = 0; i < kernel; ++i) {
          for (std::int64_t j = 0; j < kernel; ++j) {
            const std::int64_t idx = (oh * stride + i) * width + ow * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::int64_t o = (pl * out_h + oh) * out_w + ow;
        out[o] = src[best];
        (*argmax)[o] = pl * height * width + best;
      }
    }
  }
  ImplPtr xi = x.impl_ptr();
  return make_result("maxpool2d", Shape{n_batch, ch, out_h, out_w}, std::move(out), {&x},
                     [=](const TensorImpl& res) {
                       auto gx = grad_buffer(*xi);
                       for (std::size_t o = 0; o < argmax->size(); ++o) {
                         gx[(*argmax)[o]] += res.grad[o];
                       }
                     });
}

Tensor avgpool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride) {
  require_rank(x, 4, "avgpool2d", "input");
  if (kernel <= 0 || stride <= 0) throw ShapeError("avgpool2d: kernel and stride must be positive");
  const std::int64_t n_batch = x.dim(0), ch = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (height < kernel || width < kernel) {
    throw ShapeError("avgpool2d: kernel " + std::to_string(kernel) + " larger than input " +
                     to_string(x.shape()));
  }
  const std::int64_t out_h = (height - kernel) / stride + 1, out_w = (width - kernel) / stride + 1;
  const std::int64_t planes = n_batch * ch;
  const Real inv = Real{1} / static_cast<Real>(kernel * kernel);
  std::vector<Real> out(static_cast<std::size_t>(planes * out_h * out_w));
  const Real* xd = x.values().data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const Real* src = xd + pl * height * width;
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        Real acc = 0;
        for (std::int64_t i = 0; i < kernel; ++i) {
          for (std::int64_t j = 0; j < kernel; ++j) {
            acc += src[(oh * stride + i) * width + ow * stride + j];
          }
        }
        out[(pl * out_h + oh) * out_w + ow] = acc * inv;
      }
    }
  }
  ImplPtr xi = x.impl_ptr();
  return make_result("avgpool2d", Shape{n_batch, ch, out_h, out_w}, std::move(out), {&x},
                     [=](const TensorImpl& res) {
                       auto gx = grad_buffer(*xi);
                       for (std::int64_t pl = 0; pl < planes; ++pl) {
                         Real* dst = gx.data() + pl * height * width;
                         for (std::int64_t oh = 0; oh < out_h; ++oh) {
                           for (std::int64_t ow = 0; ow < out_w; ++ow) {
                             const Real g = res.grad[(pl * out_h + oh) * out_w + ow] * inv;
                             for (std::int64_t i = 0; i < kernel; ++i) {
                               for (std::int64_t j = 0; j < kernel; ++j) {
                                 dst[(oh * stride + i) * width + ow * stride + j] += g;
                               }
                             }
                           }
                         }
                       }
                     });
}

Tensor global_avgpool(const Tensor& x) {
  require_rank(x, 4, "global_avgpool", "input");
  const std::int64_t n_batch = x.dim(0), ch = x.dim(1), area = x.dim(2) * x.dim(3);
  const Real inv = Real{1} / static_cast<Real>(area);
  std::vector<Real> out(static_cast<std::size_t>(n_batch * ch));
  const Real* xd = x.values().data();
  for (std::int64_t pl = 0; pl < n_batch * ch; ++pl) {
    Real acc = 0;
    for (std::int64_t i = 0; i < area; ++i) acc += xd[pl * area + i];
    out[pl] = acc * inv;
  }
  ImplPtr xi = x.impl_ptr();
  return make_result("global_avgpool", Shape{n_batch, ch, 1, 1}, std::move(out), {&x},
                     [=](const TensorImpl& res) {
                       auto gx = grad_buffer(*xi);
                       for (std::int64_t pl = 0; pl < n_batch * ch; ++pl) {
                         const Real g = res.grad[pl] * inv;
                         for (std::int64_t i = 0; i < area; ++i) gx[pl * area + i] += g;
                       }
                     });
}

// ---------------------------------------------------------------------------
// batchnorm

Tensor batchnorm(const Tensor& x, const BatchNormState& st, bool training) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batchnorm: input must be [N,C] or [N,C,H,W], got " + to_string(x.shape()));
  }
  const std::int64_t n_batch = x.dim(0), ch = x.dim(1);
  const std::int64_t area = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor* p : {&st.gamma, &st.beta, &st.running_mean, &st.running_var}) {
    if (p->numel() != ch) {
      throw ShapeError("batchnorm: parameter has " + std::to_string(p->numel()) +
                       " elements for " + std::to_string(ch) + " channels");
    }
  }
  const std::int64_t count = n_batch * area;
  const Real* xd = x.values().data();
  auto at = [ch, area](std::int64_t n, std::int64_t c) { return (n * ch + c) * area; };

  auto mean = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(ch));
  auto inv_std = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(ch));
  if (training) {
    Tensor rm = st.running_mean, rv = st.running_var;
    auto rmv = rm.mutable_values();
    auto rvv = rv.mutable_values();
    for (std::int64_t c = 0; c < ch; ++c) {
      Real s = 0;
      for (std::int64_t n = 0; n < n_batch; ++n) {
        for (std::int64_t i = 0; i < area; ++i) s += xd[at(n, c) + i];
      }
      const Real mu = s / static_cast<Real>(count);
      Real v = 0;
      for (std::int64_t n = 0; n < n_batch; ++n) {
        for (std::int64_t i = 0; i < area; ++i) {
          const Real d = xd[at(n, c) + i] - mu;
          v += d * d;
        }
      }
      const Real var = v / static_cast<Real>(count);
      (*mean)[c] = mu;
      (*inv_std)[c] = Real{1} / std::sqrt(var + st.eps);
      const Real unbiased = count > 1 ? v / static_cast<Real>(count - 1) : var;
      rmv[c] = (Real{1} - st.momentum) * rmv[c] + st.momentum * mu;
      rvv[c] = (Real{1} - st.momentum) * rvv[c] + st.momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < ch; ++c) {
      (*mean)[c] = st.running_mean.values()[c];
      (*inv_std)[c] = Real{1} / std::sqrt(st.running_var.values()[c] + st.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<Real>>(x.values().size());
  std::vector<Real> out(x.values().size());
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const Real g = st.gamma.values()[c], b = st.beta.values()[c];
      for (std::int64_t i = 0; i < area; ++i) {
        const auto idx = at(n, c) + i;
        const Real h = (xd[idx] - (*mean)[c]) * (*inv_std)[c];
        (*xhat)[idx] = h;
        out[idx] = g * h + b;
      }
    }
  }

  ImplPtr xi = x.impl_ptr(), gi = st.gamma.impl_ptr(), bi = st.beta.impl_ptr();
  return make_result(
      "batchnorm", x.shape(), std::move(out), {&x, &st.gamma, &st.beta},
      [=](const TensorImpl& res) {
        const Real* go = res.grad.data();
        std::vector<Real> sum_g(static_cast<std::size_t>(ch), 0), sum_gh(static_cast<std::size_t>(ch), 0);
        for (std::int64_t n = 0; n < n_batch; ++n) {
          for (std::int64_t c = 0; c < ch; ++c) {
            for (std::int64_t i = 0; i < area; ++i) {
              const auto idx = at(n, c) + i;
              sum_g[c] += go[idx];
              sum_gh[c] += go[idx] * (*xhat)[idx];
            }
          }
        }
        if (wants_grad(gi)) {
          auto gg = grad_buffer(*gi);
          for (std::int64_t c = 0; c < ch; ++c) gg[c] += sum_gh[c];
        }
        if (wants_grad(bi)) {
          auto gb = grad_buffer(*bi);
          for (std::int64_t c = 0; c < ch; ++c) gb[c] += sum_g[c];
        }
        if (wants_grad(xi)) {
          auto gx = grad_buffer(*xi);
          const Real inv_count = Real{1} / static_cast<Real>(count);
          for (std::int64_t n = 0; n < n_batch; ++n) {
            for (std::int64_t c = 0; c < ch; ++c) {
              const Real gamma = gi->data[c];
              const Real k = gamma * (*inv_std)[c];
              for (std::int64_t i = 0; i < area; ++i) {
                const auto idx = at(n, c) + i;
                if (training) {
                  gx[idx] += k * (go[idx] - sum_g[c] * inv_count -
                                  (*xhat)[idx] * sum_gh[c] * inv_count);
                } else {
                  gx[idx] += k * go[idx];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor relu(const Tensor& x) {
  std::vector<Real> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = v > 0 ? v : Real{0};
  ImplPtr xi = x.impl_ptr();
  return make_result("relu", x.shape(), std::move(out), {&x}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xi->data[i] > 0) gx[i] += res.grad[i];
    }
  });
}

namespace {

template <class Fwd, class Da, class Db>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  require_same_shape(a, b, name);
  const auto av = a.values(), bv = b.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result(name, a.shape(), std::move(out), {&a, &b}, [=](const TensorImpl& res) {
    if (wants_grad(ai)) {
      auto ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += res.grad[i] * da(ai->data[i], bi->data[i]);
    }
    if (wants_grad(bi)) {
      auto gb = grad_buffer(*bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += res.grad[i] * db(ai->data[i], bi->data[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{1}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{-1}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y) { return Real{1} / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale: factor must hold one value, got " + to_string(s.shape()));
  const Real f = s.values()[0];
  std::vector<Real> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= f;
  ImplPtr xi = x.impl_ptr(), si = s.impl_ptr();
  return make_result("scale", x.shape(), std::move(out), {&x, &s}, [=](const TensorImpl& res) {
    if (wants_grad(xi)) {
      auto gx = grad_buffer(*xi);
      const Real fac = si->data[0];
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i] * fac;
    }
    if (wants_grad(si)) {
      Real acc = 0;
      for (std::size_t i = 0; i < res.grad.size(); ++i) acc += res.grad[i] * xi->data[i];
      grad_buffer(*si)[0] += acc;
    }
  });
}

Tensor mul_scalar(const Tensor& x, Real c) {
  std::vector<Real> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= c;
  ImplPtr xi = x.impl_ptr();
  return make_result("mul_scalar", x.shape(), std::move(out), {&x}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i] * c;
  });
}

Tensor add_scalar(const Tensor& x, Real c) {
  std::vector<Real> out(x.values().begin(), x.values().end());
  for (auto& v : out) v += c;
  ImplPtr xi = x.impl_ptr();
  return make_result("add_scalar", x.shape(), std::move(out), {&x}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  ImplPtr xi = x.impl_ptr();
  return make_result("sum", Shape{}, {acc}, {&x}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    for (auto& g : gx) g += res.grad[0];
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), Real{1} / static_cast<Real>(x.numel())); }

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError("dot: size mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Real acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.values()[i] * b.values()[i];
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result("dot", Shape{}, {acc}, {&a, &b}, [=](const TensorImpl& res) {
    const Real g = res.grad[0];
    if (wants_grad(ai)) {
      auto ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bi->data[i];
    }
    if (wants_grad(bi)) {
      auto gb = grad_buffer(*bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * ai->data[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (forge::numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<Real> out(x.values().begin(), x.values().end());
  ImplPtr xi = x.impl_ptr();
  return make_result("reshape", std::move(shape), std::move(out), {&x}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i];
  });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("flatten: input needs a batch axis, got " + to_string(x.shape()));
  return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

Tensor concat(std::span<const Tensor> xs, std::int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  const auto rank = xs[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("concat: axis out of range for shape " + to_string(xs[0].shape()));
  }
  Shape shape = xs[0].shape();
  shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (std::int64_t d = 0; d < rank; ++d) {
      if (d != axis && t.dim(d) != xs[0].dim(d)) {
        throw ShapeError("concat: operand " + to_string(t.shape()) + " incompatible with " +
                         to_string(xs[0].shape()) + " along axis " + std::to_string(axis));
      }
    }
    shape[axis] += t.dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::int64_t d = axis + 1; d < rank; ++d) inner *= shape[d];
  const std::int64_t total = shape[axis];
  std::vector<Real> out(static_cast<std::size_t>(forge::numel(shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::int64_t len = t.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(t.values().data() + o * len * inner, len * inner,
                  out.data() + (o * total + off) * inner);
    }
    off += len;
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  std::vector<ImplPtr> impls;
  for (const auto& t : xs) impls.push_back(t.impl_ptr());
  return make_result("concat", shape, std::move(out), inputs, [=](const TensorImpl& res) {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      if (!wants_grad(impls[k])) continue;
      auto g = grad_buffer(*impls[k]);
      const std::int64_t len = impls[k]->shape[axis];
      for (std::int64_t o = 0; o < outer; ++o) {
        const Real* src = res.grad.data() + (o * total + offsets[k]) * inner;
        Real* dst = g.data() + o * len * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor stack(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw ShapeError("stack: no operands");
  std::vector<Real> out;
  for (const auto& s : scalars) {
    if (s.numel() != 1) throw ShapeError("stack: operands must be scalars, got " + to_string(s.shape()));
    out.push_back(s.values()[0]);
  }
  std::vector<Tensor> inputs(scalars.begin(), scalars.end());
  std::vector<ImplPtr> impls;
  for (const auto& s : scalars) impls.push_back(s.impl_ptr());
  const auto m = static_cast<std::int64_t>(out.size());
  return make_result("stack", Shape{m}, std::move(out), inputs, [=](const TensorImpl& res) {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      if (wants_grad(impls[k])) grad_buffer(*impls[k])[0] += res.grad[k];
    }
  });
}

Tensor select(const Tensor& x, std::int64_t index) {
  if (index < 0 || index >= x.numel()) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range for " + to_string(x.shape()));
  }
  ImplPtr xi = x.impl_ptr();
  return make_result("select", Shape{}, {x.values()[index]}, {&x}, [=](const TensorImpl& res) {
    grad_buffer(*xi)[index] += res.grad[0];
  });
}

Tensor mul_channels(const Tensor& x, const Tensor& factors) {
  if (x.rank() < 1 || x.dim(0) != factors.numel()) {
    throw ShapeError("mul_channels: " + std::to_string(factors.numel()) + " factors for tensor " +
                     to_string(x.shape()));
  }
  const std::int64_t ch = x.dim(0), inner = x.numel() / ch;
  std::vector<Real> out(x.values().begin(), x.values().end());
  for (std::int64_t c = 0; c < ch; ++c) {
    const Real f = factors.values()[c];
    for (std::int64_t i = 0; i < inner; ++i) out[c * inner + i] *= f;
  }
  ImplPtr xi = x.impl_ptr(), fi = factors.impl_ptr();
  return make_result("mul_channels", x.shape(), std::move(out), {&x, &factors},
                     [=](const TensorImpl& res) {
                       if (wants_grad(xi)) {
                         auto gx = grad_buffer(*xi);
                         for (std::int64_t c = 0; c < ch; ++c) {
                           const Real f = fi->data[c];
                           for (std::int64_t i = 0; i < inner; ++i) gx[c * inner + i] += res.grad[c * inner + i] * f;
                         }
                       }
                       if (wants_grad(fi)) {
                         auto gf = grad_buffer(*fi);
                         for (std::int64_t c = 0; c < ch; ++c) {
                           Real acc = 0;
                           for (std::int64_t i = 0; i < inner; ++i) {
                             acc += res.grad[c * inner + i] * xi->data[c * inner + i];
                           }
                           gf[c] += acc;
                         }
                       }
                     });
}

Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& weights) {
  if (xs.empty()) throw ShapeError("weighted_sum: no operands");
  if (weights.numel() != static_cast<std::int64_t>(xs.size())) {
    throw ShapeError("weighted_sum: " + std::to_string(weights.numel()) + " weights for " +
                     std::to_string(xs.size()) + " operands");
  }
  for (const auto& t : xs) require_same_shape(t, xs[0], "weighted_sum");
  std::vector<Real> out(xs[0].values().size(), Real{0});
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Real wk = weights.values()[k];
    const auto v = xs[k].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * v[i];
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  inputs.push_back(weights);
  std::vector<ImplPtr> impls;
  for (const auto& t : xs) impls.push_back(t.impl_ptr());
  ImplPtr wi = weights.impl_ptr();
  return make_result("weighted_sum", xs[0].shape(), std::move(out), inputs,
                     [=](const TensorImpl& res) {
                       for (std::size_t k = 0; k < impls.size(); ++k) {
                         const auto& ti = impls[k];
                         if (wants_grad(ti)) {
                           auto g = grad_buffer(*ti);
                           const Real wk = wi->data[k];
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i] * wk;
                         }
                         if (wants_grad(wi)) {
                           Real acc = 0;
                           for (std::size_t i = 0; i < res.grad.size(); ++i) acc += res.grad[i] * ti->data[i];
                           grad_buffer(*wi)[k] += acc;
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// softmax family

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax: needs at least one axis");
  const std::int64_t len = x.dim(-1), rows = x.numel() / len;
  std::vector<Real> out(x.values().size());
  const Real* xd = x.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* in = xd + r * len;
    Real* o = out.data() + r * len;
    const Real mx = *std::max_element(in, in + len);
    Real z = 0;
    for (std::int64_t i = 0; i < len; ++i) z += (o[i] = std::exp(in[i] - mx));
    for (std::int64_t i = 0; i < len; ++i) o[i] /= z;
  }
  auto y = std::make_shared<std::vector<Real>>(out);
  ImplPtr xi = x.impl_ptr();
  return make_result("softmax", x.shape(), std::move(out), {&x}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      Real s = 0;
      for (std::int64_t i = 0; i < len; ++i) s += res.grad[r * len + i] * (*y)[r * len + i];
      for (std::int64_t i = 0; i < len; ++i) {
        gx[r * len + i] += (*y)[r * len + i] * (res.grad[r * len + i] - s);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("log_softmax: needs at least one axis");
  const std::int64_t len = x.dim(-1), rows = x.numel() / len;
  std::vector<Real> out(x.values().size());
  const Real* xd = x.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* in = xd + r * len;
    const Real mx = *std::max_element(in, in + len);
    Real z = 0;
    for (std::int64_t i = 0; i < len; ++i) z += std::exp(in[i] - mx);
    const Real lz = mx + std::log(z);
    for (std::int64_t i = 0; i < len; ++i) out[r * len + i] = in[i] - lz;
  }
  auto y = std::make_shared<std::vector<Real>>(out);
  ImplPtr xi = x.impl_ptr();
  return make_result("log_softmax", x.shape(), std::move(out), {&x}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      Real s = 0;
      for (std::int64_t i = 0; i < len; ++i) s += res.grad[r * len + i];
      for (std::int64_t i = 0; i < len; ++i) {
        gx[r * len + i] += res.grad[r * len + i] - std::exp((*y)[r * len + i]) * s;
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const std::int64_t n_batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n_batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n_batch));
  }
  auto probs = std::make_shared<std::vector<Real>>(logits.values().size());
  Real loss = 0;
  const Real* xd = logits.values().data();
  for (std::int64_t n = 0; n < n_batch; ++n) {
    const int label = labels[n];
    if (label < 0 || label >= classes) {
      throw ShapeError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                       std::to_string(classes) + ")");
    }
    const Real* in = xd + n * classes;
    const Real mx = *std::max_element(in, in + classes);
    Real z = 0;
    for (std::int64_t c = 0; c < classes; ++c) z += ((*probs)[n * classes + c] = std::exp(in[c] - mx));
    for (std::int64_t c = 0; c < classes; ++c) (*probs)[n * classes + c] /= z;
    loss -= in[label] - mx - std::log(z);
  }
  loss /= static_cast<Real>(n_batch);
  std::vector<int> lab(labels.begin(), labels.end());
  ImplPtr xi = logits.impl_ptr();
  return make_result("cross_entropy", Shape{}, {loss}, {&logits}, [=](const TensorImpl& res) {
    auto gx = grad_buffer(*xi);
    const Real g = res.grad[0] / static_cast<Real>(n_batch);
    for (std::int64_t n = 0; n < n_batch; ++n) {
      for (std::int64_t c = 0; c < classes; ++c) {
        const Real target = c == lab[n] ? Real{1} : Real{0};
        gx[n * classes + c] += g * ((*probs)[n * classes + c] - target);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// search primitives

Tensor heaviside_ste(const Tensor& theta, Real threshold) {
  std::vector<Real> out(theta.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = theta.values()[i] >= threshold ? Real{1} : Real{0};
  ImplPtr ti = theta.impl_ptr();
  return make_result("heaviside_ste", theta.shape(), std::move(out), {&theta},
                     [=](const TensorImpl& res) {
                       auto g = grad_buffer(*ti);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i];
                     });
}

Tensor sample_gumbel(const Shape& shape, std::mt19937_64& rng) {
  // Drawn from the open interval so both logs stay finite.
  std::uniform_real_distribution<double> uni(std::numeric_limits<double>::min(), 1.0);
  Tensor t(shape);
  for (auto& v : t.mutable_values()) {
    double u = uni(rng);
    if (u >= 1.0) u = std::nextafter(1.0, 0.0);
    v = static_cast<Real>(-std::log(-std::log(u)));
  }
  return t;
}

Tensor gumbel_softmax(const Tensor& logits, Real tau, const Tensor& noise) {
  if (!(tau > 0)) throw ConfigError("gumbel_softmax: temperature must be positive, got " + std::to_string(tau));
  Tensor z = noise.defined() ? add(logits, noise) : logits;
  return softmax(mul_scalar(z, Real{1} / tau));
}

Real minmax_scale(std::span<const Real> w, int bits) {
  if (bits < 2) throw ConfigError("min-max quantization needs at least 2 bits, got " + std::to_string(bits));
  Real maxabs = 0;
  for (Real v : w) maxabs = std::max(maxabs, std::abs(v));
  const Real qmax = static_cast<Real>((std::int64_t{1} << (bits - 1)) - 1);
  return maxabs > 0 ? maxabs / qmax : Real{1};
}

Tensor fake_quant_weight_minmax(const Tensor& w, int bits) {
  if (bits < 2) throw ConfigError("min-max quantization needs at least 2 bits, got " + std::to_string(bits));
  Real maxabs = 0;
  for (Real v : w.values()) maxabs = std::max(maxabs, std::abs(v));
  const Real qmax = static_cast<Real>((std::int64_t{1} << (bits - 1)) - 1);
  const Real qmin = -qmax - 1;
  // w * (qmax / maxabs) keeps exact grid points exact.
  const Real inv = maxabs > 0 ? qmax / maxabs : Real{1};
  const Real s = maxabs > 0 ? maxabs / qmax : Real{1};
  const auto wv = w.values();
  std::vector<Real> out(wv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(std::round(wv[i] * inv), qmin, qmax) * s;
  // The range is set by max|w|, so no element is ever clipped: the
  // straight-through gradient is the identity everywhere.
  ImplPtr wi = w.impl_ptr();
  return make_result("fake_quant_weight_minmax", w.shape(), std::move(out), {&w},
                     [=](const TensorImpl& res) {
                       auto g = grad_buffer(*wi);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i];
                     });
}

Tensor fake_quant_act_pact(const Tensor& x, int bits, const Tensor& alpha) {
  if (bits < 2) throw ConfigError("PACT quantization needs at least 2 bits, got " + std::to_string(bits));
  if (alpha.numel() != 1) throw ShapeError("PACT: alpha must be a scalar, got " + to_string(alpha.shape()));
  const Real a = alpha.values()[0];
  if (!(a > 0)) throw NumericError("PACT: clipping bound alpha must be positive, got " + std::to_string(a));
  const Real levels = static_cast<Real>((std::int64_t{1} << bits) - 1);
  const auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real c = std::clamp(xv[i], Real{0}, a);
    out[i] = std::round(c * levels / a) * a / levels;
  }
  ImplPtr xi = x.impl_ptr(), ai = alpha.impl_ptr();
  return make_result("fake_quant_act_pact", x.shape(), std::move(out), {&x, &alpha},
                     [=](const TensorImpl& res) {
                       const Real av = ai->data[0];
                       if (wants_grad(xi)) {
                         auto g = grad_buffer(*xi);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const Real v = xi->data[i];
                           if (v >= 0 && v < av) g[i] += res.grad[i];
                         }
                       }
                       if (wants_grad(ai)) {
                         Real acc = 0;
                         for (std::size_t i = 0; i < res.grad.size(); ++i) {
                           if (xi->data[i] >= av) acc += res.grad[i];
                         }
                         grad_buffer(*ai)[0] += acc;
                       }
                     });
}

}  // namespace ops
FORGE_NAMESPACE_END
