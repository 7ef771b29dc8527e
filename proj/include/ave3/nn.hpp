#pragma once

#include <string>
#include <vector>

#include "ave3/tensor.hpp"

namespace ave3 {
class Rng;
}

namespace ave3::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

int64_t param_count(const ParamList& params);

// ---- fused differentiable ops ----

// Statistics over the feature dimension of a rank-1 input, f64 accumulation.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps);

// x: [in_ch, T], w: [out_ch, in_ch, k] -> [out_ch, floor((T-k)/stride)+1].
// Valid framing only; no padding. Cross-correlation (no kernel flip).
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

// x: [ch, F], w: [ch, out_ch, k] -> [out_ch, (F-1)*stride + k].
// Overlap-add of per-frame kernel contributions; adjoint of conv1d.
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride);

struct LstmOut {
  Tensor h;
  Tensor c;
};

// Gate order (i, f, g, o): c' = f.c + i.g, h' = o.tanh(c').
// W: [4d, in], U: [4d, d], b: [4d].
LstmOut lstm_step(const Tensor& x, const Tensor& h, const Tensor& c,
                  const Tensor& W, const Tensor& U, const Tensor& b);

// x: [C,H,W], w: [OC, C/groups, kh, kw], optional bias [OC].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad, int groups);

// Per-channel scale/shift on [C,H,W] (inference-style normalisation affine).
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor global_avg_pool(const Tensor& x);  // [C,H,W] -> [C]

// [g*c, H, W]: reshape channels [g,c] -> transpose -> flatten. Also accepts
// rank-1 [g*c] inputs (pure channel vectors).
Tensor channel_shuffle(const Tensor& x, int groups);

Tensor slice_channels(const Tensor& x, int begin, int count);
Tensor concat_channels(const Tensor& a, const Tensor& b);

// ---- layers ----

struct FullyConnected {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  FullyConnected() = default;
  FullyConnected(int in, int out, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  float eps = 1e-5f;

  LayerNorm() = default;
  explicit LayerNorm(int d);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv1d {
  Tensor weight;  // [out_ch, in_ch, k]
  Tensor bias;    // [out_ch]
  int stride = 1;

  Conv1d() = default;
  Conv1d(int in_ch, int out_ch, int kernel, int stride, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct ConvTranspose1d {
  Tensor weight;  // [in_ch, out_ch, k]
  Tensor bias;    // [out_ch]
  int stride = 1;

  ConvTranspose1d() = default;
  ConvTranspose1d(int in_ch, int out_ch, int kernel, int stride, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LstmLayer {
  Tensor W;  // [4d, in]
  Tensor U;  // [4d, d]
  Tensor b;  // [4d]

  LstmLayer() = default;
  LstmLayer(int in, int d, Rng& rng);
  int hidden() const { return U.defined() ? U.dim(1) : 0; }
  LstmOut step(const Tensor& x, const Tensor& h, const Tensor& c) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Fully connected + shared-alpha PReLU + layer normalisation.
struct ProjectionBlock {
  FullyConnected fc;
  Tensor prelu_alpha;  // scalar, init 0.25
  LayerNorm norm;

  ProjectionBlock() = default;
  ProjectionBlock(int in, int out, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace ave3::nn
