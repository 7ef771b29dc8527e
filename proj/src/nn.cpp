#include "ave3/nn.hpp"

#include <cmath>
#include <cstring>

#include "ave3/rng.hpp"

namespace ave3::nn {

using detail::TensorImpl;

namespace {

std::vector<float>& ensure_grad(const std::shared_ptr<TensorImpl>& impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0f);
  return impl->grad;
}

bool wants_grad(const std::shared_ptr<TensorImpl>& impl) {
  return impl && (impl->tracked || impl->requires_grad);
}

bool recording(std::initializer_list<const Tensor*> ins) {
  if (!Tape::current()) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->tracked()) return true;
  return false;
}

void record(Tensor& out, std::function<void()> fn) {
  out.impl()->tracked = true;
  Tape::current()->record(std::move(fn));
}

Tensor init_uniform(Shape shape, Rng& rng, int fan_in) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound, true);
}

}  // namespace

int64_t param_count(const ParamList& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

// ---------------------------------------------------------------------------
// layer_norm

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps) {
  if (x.rank() != 1 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != x.dim(0) || beta.dim(0) != x.dim(0))
    raise(Errc::ShapeMismatch, "layer_norm dims " + shape_str(x.shape()));
  const int d = x.dim(0);
  Tensor y = Tensor::zeros({d});
  std::vector<float> xhat(static_cast<size_t>(d));
  double mean_acc = 0.0;
  auto px = x.data();
  for (int i = 0; i < d; ++i) mean_acc += px[static_cast<size_t>(i)];
  const double mu = mean_acc / d;
  double var_acc = 0.0;
  for (int i = 0; i < d; ++i) {
    const double dev = px[static_cast<size_t>(i)] - mu;
    var_acc += dev * dev;
  }
  const double sigma = std::sqrt(var_acc / d + static_cast<double>(eps));
  {
    auto py = y.mutable_data();
    auto pg = gamma.data();
    auto pb = beta.data();
    for (int i = 0; i < d; ++i) {
      const float h = static_cast<float>((px[static_cast<size_t>(i)] - mu) / sigma);
      xhat[static_cast<size_t>(i)] = h;
      py[static_cast<size_t>(i)] = pg[static_cast<size_t>(i)] * h + pb[static_cast<size_t>(i)];
    }
  }
  if (recording({&x, &gamma, &beta})) {
    auto ix = x.impl(), ig = gamma.impl(), ib = beta.impl(), iy = y.impl();
    record(y, [ix, ig, ib, iy, xhat = std::move(xhat), sigma, d]() {
      auto gy = iy->grad;
      if (gy.empty()) return;
      if (wants_grad(ib)) {
        auto& gb = ensure_grad(ib);
        for (int i = 0; i < d; ++i) gb[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
      }
      if (wants_grad(ig)) {
        auto& gg = ensure_grad(ig);
        for (int i = 0; i < d; ++i)
          gg[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * xhat[static_cast<size_t>(i)];
      }
      if (wants_grad(ix)) {
        double s1 = 0.0, s2 = 0.0;  // mean(gi), mean(gi*xhat)
        for (int i = 0; i < d; ++i) {
          const double gi = static_cast<double>(gy[static_cast<size_t>(i)]) * ig->data[static_cast<size_t>(i)];
          s1 += gi;
          s2 += gi * xhat[static_cast<size_t>(i)];
        }
        s1 /= d;
        s2 /= d;
        auto& gx = ensure_grad(ix);
        for (int i = 0; i < d; ++i) {
          const double gi = static_cast<double>(gy[static_cast<size_t>(i)]) * ig->data[static_cast<size_t>(i)];
          gx[static_cast<size_t>(i)] +=
              static_cast<float>((gi - s1 - xhat[static_cast<size_t>(i)] * s2) / sigma);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv1d / conv_transpose1d

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.rank() != 2 || w.rank() != 3)
    raise(Errc::ShapeMismatch, "conv1d expects x:[in,T], w:[out,in,k]");
  const int in_ch = x.dim(0), T = x.dim(1);
  const int out_ch = w.dim(0), k = w.dim(2);
  if (w.dim(1) != in_ch) raise(Errc::ShapeMismatch, "conv1d channel mismatch");
  if (b.defined() && b.size() != out_ch) raise(Errc::ShapeMismatch, "conv1d bias");
  if (T < k) raise(Errc::InputTooShort, "conv1d input length " + std::to_string(T) +
                                            " < kernel " + std::to_string(k));
  const int F = (T - k) / stride + 1;
  Tensor y = Tensor::zeros({out_ch, F});
  {
    auto px = x.data();
    auto pw = w.data();
    auto py = y.mutable_data();
    for (int o = 0; o < out_ch; ++o) {
      const float bias = b.defined() ? b.at(o) : 0.0f;
      for (int f = 0; f < F; ++f) {
        double acc = bias;
        for (int ic = 0; ic < in_ch; ++ic)
          acc += dot_f64(px.subspan(static_cast<size_t>(ic) * T + static_cast<size_t>(f) * stride, static_cast<size_t>(k)),
                         pw.subspan((static_cast<size_t>(o) * in_ch + ic) * k, static_cast<size_t>(k)));
        py[static_cast<size_t>(o) * F + f] = static_cast<float>(acc);
      }
    }
  }
  if (recording({&x, &w, &b})) {
    auto ix = x.impl(), iw = w.impl(), iy = y.impl();
    auto ib = b.defined() ? b.impl() : nullptr;
    record(y, [ix, iw, ib, iy, in_ch, T, out_ch, k, F, stride]() {
      auto gy = iy->grad;
      if (gy.empty()) return;
      if (wants_grad(ix)) {
        auto& gx = ensure_grad(ix);
        for (int o = 0; o < out_ch; ++o)
          for (int f = 0; f < F; ++f) {
            const float g = gy[static_cast<size_t>(o) * F + f];
            if (g == 0.0f) continue;
            for (int ic = 0; ic < in_ch; ++ic) {
              const float* wr = iw->data.data() + (static_cast<size_t>(o) * in_ch + ic) * k;
              float* gxr = gx.data() + static_cast<size_t>(ic) * T + static_cast<size_t>(f) * stride;
              for (int t = 0; t < k; ++t) gxr[t] += g * wr[t];
            }
          }
      }
      if (wants_grad(iw)) {
        auto& gw = ensure_grad(iw);
        for (int o = 0; o < out_ch; ++o)
          for (int f = 0; f < F; ++f) {
            const float g = gy[static_cast<size_t>(o) * F + f];
            if (g == 0.0f) continue;
            for (int ic = 0; ic < in_ch; ++ic) {
              const float* xr = ix->data.data() + static_cast<size_t>(ic) * T + static_cast<size_t>(f) * stride;
              float* gwr = gw.data() + (static_cast<size_t>(o) * in_ch + ic) * k;
              for (int t = 0; t < k; ++t) gwr[t] += g * xr[t];
            }
          }
      }
      if (ib && wants_grad(ib)) {
        auto& gb = ensure_grad(ib);
        for (int o = 0; o < out_ch; ++o) {
          double acc = 0.0;
          for (int f = 0; f < F; ++f) acc += gy[static_cast<size_t>(o) * F + f];
          gb[static_cast<size_t>(o)] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride) {
  if (x.rank() != 2 || w.rank() != 3)
    raise(Errc::ShapeMismatch, "conv_transpose1d expects x:[ch,F], w:[ch,out,k]");
  const int ch = x.dim(0), F = x.dim(1);
  const int out_ch = w.dim(1), k = w.dim(2);
  if (w.dim(0) != ch) raise(Errc::ShapeMismatch, "conv_transpose1d channel mismatch");
  if (b.defined() && b.size() != out_ch) raise(Errc::ShapeMismatch, "conv_transpose1d bias");
  const int T = (F - 1) * stride + k;
  Tensor y = Tensor::zeros({out_ch, T});
  {
    auto px = x.data();
    auto pw = w.data();
    // f64 overlap-add accumulator, a frame contributes to <=k samples
    std::vector<double> acc(static_cast<size_t>(out_ch) * T, 0.0);
    for (int f = 0; f < F; ++f)
      for (int ic = 0; ic < ch; ++ic) {
        const double v = px[static_cast<size_t>(ic) * F + f];
        if (v == 0.0) continue;
        for (int oc = 0; oc < out_ch; ++oc) {
          const float* wr = pw.data() + (static_cast<size_t>(ic) * out_ch + oc) * k;
          double* ar = acc.data() + static_cast<size_t>(oc) * T + static_cast<size_t>(f) * stride;
          for (int t = 0; t < k; ++t) ar[t] += v * wr[t];
        }
      }
    auto py = y.mutable_data();
    for (int oc = 0; oc < out_ch; ++oc) {
      const double bias = b.defined() ? b.at(oc) : 0.0;
      for (int t = 0; t < T; ++t)
        py[static_cast<size_t>(oc) * T + t] = static_cast<float>(acc[static_cast<size_t>(oc) * T + t] + bias);
    }
  }
  if (recording({&x, &w, &b})) {
    auto ix = x.impl(), iw = w.impl(), iy = y.impl();
    auto ib = b.defined() ? b.impl() : nullptr;
    record(y, [ix, iw, ib, iy, ch, F, out_ch, k, T, stride]() {
      auto gy = iy->grad;
      if (gy.empty()) return;
      if (wants_grad(ix)) {
        auto& gx = ensure_grad(ix);
        for (int ic = 0; ic < ch; ++ic)
          for (int f = 0; f < F; ++f) {
            double acc = 0.0;
            for (int oc = 0; oc < out_ch; ++oc)
              acc += dot_f64({iw->data.data() + (static_cast<size_t>(ic) * out_ch + oc) * k, static_cast<size_t>(k)},
                             {gy.data() + static_cast<size_t>(oc) * T + static_cast<size_t>(f) * stride, static_cast<size_t>(k)});
            gx[static_cast<size_t>(ic) * F + f] += static_cast<float>(acc);
          }
      }
      if (wants_grad(iw)) {
        auto& gw = ensure_grad(iw);
        for (int ic = 0; ic < ch; ++ic)
          for (int f = 0; f < F; ++f) {
            const float v = ix->data[static_cast<size_t>(ic) * F + f];
            if (v == 0.0f) continue;
            for (int oc = 0; oc < out_ch; ++oc) {
              float* gwr = gw.data() + (static_cast<size_t>(ic) * out_ch + oc) * k;
              const float* gyr = gy.data() + static_cast<size_t>(oc) * T + static_cast<size_t>(f) * stride;
              for (int t = 0; t < k; ++t) gwr[t] += v * gyr[t];
            }
          }
      }
      if (ib && wants_grad(ib)) {
        auto& gb = ensure_grad(ib);
        for (int oc = 0; oc < out_ch; ++oc) {
          double acc = 0.0;
          for (int t = 0; t < T; ++t) acc += gy[static_cast<size_t>(oc) * T + t];
          gb[static_cast<size_t>(oc)] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// lstm_step

LstmOut lstm_step(const Tensor& x, const Tensor& h, const Tensor& c,
                  const Tensor& W, const Tensor& U, const Tensor& b) {
  const int in = x.dim(0);
  const int d = U.dim(1);
  if (W.rank() != 2 || U.rank() != 2 || W.dim(0) != 4 * d || W.dim(1) != in ||
      U.dim(0) != 4 * d || b.size() != 4 * d || h.size() != d || c.size() != d)
    raise(Errc::ShapeMismatch, "lstm_step dims");

  std::vector<float> gates(static_cast<size_t>(4) * d);  // post-activation i,f,g,o
  Tensor hn = Tensor::zeros({d});
  Tensor cn = Tensor::zeros({d});
  std::vector<float> tanh_cn(static_cast<size_t>(d));
  {
    auto px = x.data();
    auto ph = h.data();
    auto pc = c.data();
    auto pw = W.data();
    auto pu = U.data();
    auto pb = b.data();
    for (int r = 0; r < 4 * d; ++r) {
      double z = pb[static_cast<size_t>(r)];
      z += dot_f64(pw.subspan(static_cast<size_t>(r) * in, static_cast<size_t>(in)), px);
      z += dot_f64(pu.subspan(static_cast<size_t>(r) * d, static_cast<size_t>(d)), ph);
      const int gate = r / d;
      gates[static_cast<size_t>(r)] =
          gate == 2 ? static_cast<float>(std::tanh(z))
                    : static_cast<float>(1.0 / (1.0 + std::exp(-z)));
    }
    auto pcn = cn.mutable_data();
    auto phn = hn.mutable_data();
    for (int j = 0; j < d; ++j) {
      const float gi = gates[static_cast<size_t>(j)];
      const float gf = gates[static_cast<size_t>(d + j)];
      const float gg = gates[static_cast<size_t>(2 * d + j)];
      const float go = gates[static_cast<size_t>(3 * d + j)];
      const float cv = gf * pc[static_cast<size_t>(j)] + gi * gg;
      const float tv = std::tanh(cv);
      pcn[static_cast<size_t>(j)] = cv;
      tanh_cn[static_cast<size_t>(j)] = tv;
      phn[static_cast<size_t>(j)] = go * tv;
    }
  }
  if (recording({&x, &h, &c, &W, &U, &b})) {
    auto ix = x.impl(), ih = h.impl(), ic = c.impl();
    auto iw = W.impl(), iu = U.impl(), ib = b.impl();
    auto ihn = hn.impl(), icn = cn.impl();
    hn.impl()->tracked = true;
    cn.impl()->tracked = true;
    Tape::current()->record([ix, ih, ic, iw, iu, ib, ihn, icn,
                             gates = std::move(gates), tanh_cn = std::move(tanh_cn),
                             in, d]() {
      const bool has_gh = !ihn->grad.empty();
      const bool has_gc = !icn->grad.empty();
      if (!has_gh && !has_gc) return;
      std::vector<float> dz(static_cast<size_t>(4) * d);
      std::vector<float> dc_prev(static_cast<size_t>(d));
      for (int j = 0; j < d; ++j) {
        const float gi = gates[static_cast<size_t>(j)];
        const float gf = gates[static_cast<size_t>(d + j)];
        const float gg = gates[static_cast<size_t>(2 * d + j)];
        const float go = gates[static_cast<size_t>(3 * d + j)];
        const float tv = tanh_cn[static_cast<size_t>(j)];
        const float gh = has_gh ? ihn->grad[static_cast<size_t>(j)] : 0.0f;
        const float gcv = (has_gc ? icn->grad[static_cast<size_t>(j)] : 0.0f) +
                          gh * go * (1.0f - tv * tv);
        dz[static_cast<size_t>(3 * d + j)] = gh * tv * go * (1.0f - go);          // o
        dz[static_cast<size_t>(d + j)] = gcv * ic->data[static_cast<size_t>(j)] * gf * (1.0f - gf);  // f
        dz[static_cast<size_t>(j)] = gcv * gg * gi * (1.0f - gi);                 // i
        dz[static_cast<size_t>(2 * d + j)] = gcv * gi * (1.0f - gg * gg);         // g
        dc_prev[static_cast<size_t>(j)] = gcv * gf;
      }
      if (wants_grad(ic)) {
        auto& gc = ensure_grad(ic);
        for (int j = 0; j < d; ++j) gc[static_cast<size_t>(j)] += dc_prev[static_cast<size_t>(j)];
      }
      if (wants_grad(ix)) {
        auto& gx = ensure_grad(ix);
        for (int i = 0; i < in; ++i) {
          double acc = 0.0;
          for (int r = 0; r < 4 * d; ++r)
            acc += static_cast<double>(iw->data[static_cast<size_t>(r) * in + i]) * dz[static_cast<size_t>(r)];
          gx[static_cast<size_t>(i)] += static_cast<float>(acc);
        }
      }
      if (wants_grad(ih)) {
        auto& gh = ensure_grad(ih);
        for (int i = 0; i < d; ++i) {
          double acc = 0.0;
          for (int r = 0; r < 4 * d; ++r)
            acc += static_cast<double>(iu->data[static_cast<size_t>(r) * d + i]) * dz[static_cast<size_t>(r)];
          gh[static_cast<size_t>(i)] += static_cast<float>(acc);
        }
      }
      if (wants_grad(iw)) {
        auto& gw = ensure_grad(iw);
        for (int r = 0; r < 4 * d; ++r) {
          const float g = dz[static_cast<size_t>(r)];
          if (g == 0.0f) continue;
          float* row = gw.data() + static_cast<size_t>(r) * in;
          for (int i = 0; i < in; ++i) row[i] += g * ix->data[static_cast<size_t>(i)];
        }
      }
      if (wants_grad(iu)) {
        auto& gu = ensure_grad(iu);
        for (int r = 0; r < 4 * d; ++r) {
          const float g = dz[static_cast<size_t>(r)];
          if (g == 0.0f) continue;
          float* row = gu.data() + static_cast<size_t>(r) * d;
          for (int i = 0; i < d; ++i) row[i] += g * ih->data[static_cast<size_t>(i)];
        }
      }
      if (wants_grad(ib)) {
        auto& gb = ensure_grad(ib);
        for (int r = 0; r < 4 * d; ++r) gb[static_cast<size_t>(r)] += dz[static_cast<size_t>(r)];
      }
    });
  }
  return {hn, cn};
}

// ---------------------------------------------------------------------------
// 2-D ops for the video trunk

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad, int groups) {
  if (x.rank() != 3 || w.rank() != 4)
    raise(Errc::ShapeMismatch, "conv2d expects x:[C,H,W], w:[OC,C/g,kh,kw]");
  const int C = x.dim(0), H = x.dim(1), Wd = x.dim(2);
  const int OC = w.dim(0), ICg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (C % groups != 0 || OC % groups != 0 || ICg != C / groups)
    raise(Errc::NotDivisible, "conv2d group layout");
  if (b.defined() && b.size() != OC) raise(Errc::ShapeMismatch, "conv2d bias");
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (Wd + 2 * pad - kw) / stride + 1;
  if (OH <= 0 || OW <= 0) raise(Errc::InputTooShort, "conv2d spatial underflow");
  const int ocg = OC / groups;
  Tensor y = Tensor::zeros({OC, OH, OW});
  {
    auto px = x.data();
    auto pw = w.data();
    auto py = y.mutable_data();
    for (int oc = 0; oc < OC; ++oc) {
      const int g = oc / ocg;
      const float bias = b.defined() ? b.at(oc) : 0.0f;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = bias;
          for (int icl = 0; icl < ICg; ++icl) {
            const int ic = g * ICg + icl;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ixp = ox * stride - pad + kx;
                if (ixp < 0 || ixp >= Wd) continue;
                acc += static_cast<double>(px[(static_cast<size_t>(ic) * H + iy) * Wd + ixp]) *
                       pw[((static_cast<size_t>(oc) * ICg + icl) * kh + ky) * kw + kx];
              }
            }
          }
          py[(static_cast<size_t>(oc) * OH + oy) * OW + ox] = static_cast<float>(acc);
        }
    }
  }
  if (recording({&x, &w, &b})) {
    auto ix = x.impl(), iw = w.impl(), iy = y.impl();
    auto ib = b.defined() ? b.impl() : nullptr;
    record(y, [ix, iw, ib, iy, C, H, Wd, OC, ICg, kh, kw, OH, OW, stride, pad, ocg]() {
      auto gy = iy->grad;
      if (gy.empty()) return;
      const bool gx_needed = wants_grad(ix);
      const bool gw_needed = wants_grad(iw);
      if (gx_needed || gw_needed) {
        if (gx_needed) ensure_grad(ix);
        if (gw_needed) ensure_grad(iw);
        for (int oc = 0; oc < OC; ++oc) {
          const int g = oc / ocg;
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
              const float gv = gy[(static_cast<size_t>(oc) * OH + oy) * OW + ox];
              if (gv == 0.0f) continue;
              for (int icl = 0; icl < ICg; ++icl) {
                const int ic = g * ICg + icl;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy2 = oy * stride - pad + ky;
                  if (iy2 < 0 || iy2 >= H) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix2 = ox * stride - pad + kx;
                    if (ix2 < 0 || ix2 >= Wd) continue;
                    const size_t xi = (static_cast<size_t>(ic) * H + iy2) * Wd + ix2;
                    const size_t wi = ((static_cast<size_t>(oc) * ICg + icl) * kh + ky) * kw + kx;
                    if (gx_needed) ix->grad[xi] += gv * iw->data[wi];
                    if (gw_needed) iw->grad[wi] += gv * ix->data[xi];
                  }
                }
              }
            }
        }
      }
      if (ib && wants_grad(ib)) {
        auto& gb = ensure_grad(ib);
        for (int oc = 0; oc < OC; ++oc) {
          double acc = 0.0;
          for (int i = 0; i < OH * OW; ++i) acc += gy[static_cast<size_t>(oc) * OH * OW + i];
          gb[static_cast<size_t>(oc)] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 3 || gamma.size() != x.dim(0) || beta.size() != x.dim(0))
    raise(Errc::ShapeMismatch, "channel_affine dims");
  const int C = x.dim(0);
  const int HW = x.dim(1) * x.dim(2);
  Tensor y = Tensor::zeros(x.shape());
  {
    auto px = x.data();
    auto pg = gamma.data();
    auto pb = beta.data();
    auto py = y.mutable_data();
    for (int c = 0; c < C; ++c) {
      const float g = pg[static_cast<size_t>(c)], b = pb[static_cast<size_t>(c)];
      for (int i = 0; i < HW; ++i)
        py[static_cast<size_t>(c) * HW + i] = g * px[static_cast<size_t>(c) * HW + i] + b;
    }
  }
  if (recording({&x, &gamma, &beta})) {
    auto ix = x.impl(), ig = gamma.impl(), ib = beta.impl(), iy = y.impl();
    record(y, [ix, ig, ib, iy, C, HW]() {
      auto gy = iy->grad;
      if (gy.empty()) return;
      if (wants_grad(ix)) {
        auto& gx = ensure_grad(ix);
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < HW; ++i)
            gx[static_cast<size_t>(c) * HW + i] += gy[static_cast<size_t>(c) * HW + i] * ig->data[static_cast<size_t>(c)];
      }
      if (wants_grad(ig)) {
        auto& gg = ensure_grad(ig);
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int i = 0; i < HW; ++i)
            acc += static_cast<double>(gy[static_cast<size_t>(c) * HW + i]) * ix->data[static_cast<size_t>(c) * HW + i];
          gg[static_cast<size_t>(c)] += static_cast<float>(acc);
        }
      }
      if (wants_grad(ib)) {
        auto& gb = ensure_grad(ib);
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int i = 0; i < HW; ++i) acc += gy[static_cast<size_t>(c) * HW + i];
          gb[static_cast<size_t>(c)] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) raise(Errc::ShapeMismatch, "global_avg_pool expects [C,H,W]");
  const int C = x.dim(0);
  const int HW = x.dim(1) * x.dim(2);
  Tensor y = Tensor::zeros({C});
  {
    auto px = x.data();
    auto py = y.mutable_data();
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int i = 0; i < HW; ++i) acc += px[static_cast<size_t>(c) * HW + i];
      py[static_cast<size_t>(c)] = static_cast<float>(acc / HW);
    }
  }
  if (recording({&x})) {
    auto ix = x.impl(), iy = y.impl();
    record(y, [ix, iy, C, HW]() {
      auto gy = iy->grad;
      if (gy.empty() || !wants_grad(ix)) return;
      auto& gx = ensure_grad(ix);
      for (int c = 0; c < C; ++c) {
        const float g = gy[static_cast<size_t>(c)] / static_cast<float>(HW);
        for (int i = 0; i < HW; ++i) gx[static_cast<size_t>(c) * HW + i] += g;
      }
    });
  }
  return y;
}

Tensor channel_shuffle(const Tensor& x, int groups) {
  const int C = x.dim(0);
  if (C % groups != 0)
    raise(Errc::NotDivisible, "channel_shuffle: " + std::to_string(C) +
                                  " channels not divisible by " + std::to_string(groups));
  const int per = C / groups;
  const int HW = x.rank() == 3 ? x.dim(1) * x.dim(2) : 1;
  if (x.rank() != 3 && x.rank() != 1)
    raise(Errc::ShapeMismatch, "channel_shuffle expects [C,H,W] or [C]");
  // out[ci*g + gi] = in[gi*per + ci]
  std::vector<int> src(static_cast<size_t>(C));
  for (int gi = 0; gi < groups; ++gi)
    for (int ci = 0; ci < per; ++ci) src[static_cast<size_t>(ci) * groups + gi] = gi * per + ci;
  Tensor y = Tensor::zeros(x.shape());
  {
    auto px = x.data();
    auto py = y.mutable_data();
    for (int c = 0; c < C; ++c)
      std::memcpy(py.data() + static_cast<size_t>(c) * HW,
                  px.data() + static_cast<size_t>(src[static_cast<size_t>(c)]) * HW,
                  sizeof(float) * static_cast<size_t>(HW));
  }
  if (recording({&x})) {
    auto ix = x.impl(), iy = y.impl();
    record(y, [ix, iy, src = std::move(src), C, HW]() {
      auto gy = iy->grad;
      if (gy.empty() || !wants_grad(ix)) return;
      auto& gx = ensure_grad(ix);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i)
          gx[static_cast<size_t>(src[static_cast<size_t>(c)]) * HW + i] += gy[static_cast<size_t>(c) * HW + i];
    });
  }
  return y;
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
  if (x.rank() != 3) raise(Errc::ShapeMismatch, "slice_channels expects [C,H,W]");
  if (begin < 0 || count <= 0 || begin + count > x.dim(0))
    raise(Errc::ShapeMismatch, "slice_channels range");
  const int HW = x.dim(1) * x.dim(2);
  Tensor y = Tensor::zeros({count, x.dim(1), x.dim(2)});
  std::memcpy(y.mutable_data().data(), x.data().data() + static_cast<size_t>(begin) * HW,
              sizeof(float) * static_cast<size_t>(count) * HW);
  if (recording({&x})) {
    auto ix = x.impl(), iy = y.impl();
    record(y, [ix, iy, begin, count, HW]() {
      auto gy = iy->grad;
      if (gy.empty() || !wants_grad(ix)) return;
      auto& gx = ensure_grad(ix);
      for (int64_t i = 0; i < static_cast<int64_t>(count) * HW; ++i)
        gx[static_cast<size_t>(begin) * HW + i] += gy[static_cast<size_t>(i)];
    });
  }
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    raise(Errc::ShapeMismatch, "concat_channels spatial dims");
  const int HW = a.dim(1) * a.dim(2);
  Tensor y = Tensor::zeros({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  auto py = y.mutable_data();
  std::memcpy(py.data(), a.data().data(), sizeof(float) * static_cast<size_t>(a.size()));
  std::memcpy(py.data() + a.size(), b.data().data(), sizeof(float) * static_cast<size_t>(b.size()));
  if (recording({&a, &b})) {
    auto ia = a.impl(), ib = b.impl(), iy = y.impl();
    const int64_t na = a.size(), nb = b.size();
    (void)HW;
    record(y, [ia, ib, iy, na, nb]() {
      auto gy = iy->grad;
      if (gy.empty()) return;
      if (wants_grad(ia)) {
        auto& ga = ensure_grad(ia);
        for (int64_t i = 0; i < na; ++i) ga[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
      }
      if (wants_grad(ib)) {
        auto& gb = ensure_grad(ib);
        for (int64_t i = 0; i < nb; ++i) gb[static_cast<size_t>(i)] += gy[static_cast<size_t>(na + i)];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// layers

FullyConnected::FullyConnected(int in, int out, Rng& rng) {
  weight = init_uniform({out, in}, rng, in);
  bias = init_uniform({out}, rng, in);
}

Tensor FullyConnected::forward(const Tensor& x) const {
  return linear(x, weight, bias);
}

void FullyConnected::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", weight});
  out.push_back({prefix + ".b", bias});
}

LayerNorm::LayerNorm(int d) {
  gamma = Tensor::full({d}, 1.0f, true);
  beta = Tensor::zeros({d}, true);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm(x, gamma, beta, eps);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".g", gamma});
  out.push_back({prefix + ".b", beta});
}

Conv1d::Conv1d(int in_ch, int out_ch, int kernel, int stride_, Rng& rng)
    : stride(stride_) {
  weight = init_uniform({out_ch, in_ch, kernel}, rng, in_ch * kernel);
  bias = init_uniform({out_ch}, rng, in_ch * kernel);
}

Tensor Conv1d::forward(const Tensor& x) const { return conv1d(x, weight, bias, stride); }

void Conv1d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", weight});
  out.push_back({prefix + ".b", bias});
}

ConvTranspose1d::ConvTranspose1d(int in_ch, int out_ch, int kernel, int stride_, Rng& rng)
    : stride(stride_) {
  weight = init_uniform({in_ch, out_ch, kernel}, rng, in_ch);
  bias = init_uniform({out_ch}, rng, in_ch);
}

Tensor ConvTranspose1d::forward(const Tensor& x) const {
  return conv_transpose1d(x, weight, bias, stride);
}

void ConvTranspose1d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", weight});
  out.push_back({prefix + ".b", bias});
}

LstmLayer::LstmLayer(int in, int d, Rng& rng) {
  W = init_uniform({4 * d, in}, rng, in);
  U = init_uniform({4 * d, d}, rng, d);
  b = init_uniform({4 * d}, rng, d);
}

LstmOut LstmLayer::step(const Tensor& x, const Tensor& h, const Tensor& c) const {
  return lstm_step(x, h, c, W, U, b);
}

void LstmLayer::collect(const std::string& prefix, ParamList& out) const {
  // gate order within the leading 4d dimension: input, forget, cell, output
  out.push_back({prefix + ".W", W});
  out.push_back({prefix + ".U", U});
  out.push_back({prefix + ".b", b});
}

ProjectionBlock::ProjectionBlock(int in, int out, Rng& rng)
    : fc(in, out, rng), norm(out) {
  prelu_alpha = Tensor::full({1}, 0.25f, true);
}

Tensor ProjectionBlock::forward(const Tensor& x) const {
  return norm.forward(prelu(fc.forward(x), prelu_alpha));
}

void ProjectionBlock::collect(const std::string& prefix, ParamList& out) const {
  fc.collect(prefix + ".fc", out);
  out.push_back({prefix + ".alpha", prelu_alpha});
  norm.collect(prefix + ".ln", out);
}

}  // namespace ave3::nn
