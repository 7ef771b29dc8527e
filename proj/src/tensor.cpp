#include "ave3/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "ave3/rng.hpp"

namespace ave3 {

namespace debug {
bool corrupt_sigmoid_backward = false;
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

bool shape_equal(const Shape& a, const Shape& b) { return a == b; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

using detail::TensorImpl;

static std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad) {
  for (int d : shape)
    if (d <= 0) raise(Errc::ShapeMismatch, "non-positive dimension in " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  impl->tracked = requires_grad;
  return impl;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  std::fill(impl->data.begin(), impl->data.end(), value);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    raise(Errc::ShapeMismatch, "value count " + std::to_string(values.size()) +
                                   " does not fill " + shape_str(shape));
  auto impl = make_impl(std::move(shape), requires_grad);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  for (auto& v : impl->data) v = rng.uniform_f(lo, hi);
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
int64_t Tensor::size() const { return static_cast<int64_t>(impl_->data.size()); }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::tracked() const { return impl_ && impl_->tracked; }

std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() { return impl_->data; }

float Tensor::item() const {
  if (size() != 1) raise(Errc::ShapeMismatch, "item() on non-scalar " + shape_str(shape()));
  return impl_->data[0];
}

float Tensor::at(int64_t i) const { return impl_->data.at(static_cast<size_t>(i)); }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) raise(Errc::ShapeMismatch, "grad not populated");
  return impl_->grad;
}

std::span<float> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty())
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != size())
    raise(Errc::ShapeMismatch,
          "reshape " + shape_str(shape()) + " -> " + shape_str(new_shape));
  auto out = make_impl(new_shape, false);
  out->data = impl_->data;
  Tensor result(std::move(out));
  Tape* tape = Tape::current();
  if (tape && tracked()) {
    result.impl()->tracked = true;
    auto src = impl_;
    auto dst = result.impl();
    tape->record([src, dst]() {
      if (dst->grad.empty()) return;
      if (src->grad.empty()) src->grad.assign(src->data.size(), 0.0f);
      for (size_t i = 0; i < src->grad.size(); ++i) src->grad[i] += dst->grad[i];
    });
  }
  return result;
}

Tensor Tensor::clone() const {
  auto out = make_impl(impl_->shape, impl_->requires_grad);
  out->data = impl_->data;
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

Tape::Scope::Scope(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }
Tape::Scope::~Scope() { g_current_tape = prev_; }

Tape::Pause::Pause() : prev_(g_current_tape) { g_current_tape = nullptr; }
Tape::Pause::~Pause() { g_current_tape = prev_; }

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.size() != 1)
    raise(Errc::NotScalarLoss, "backward needs a scalar loss");
  if (tape.nodes_.empty())
    raise(Errc::EmptyTape, "tape has no recorded nodes (already consumed?)");
  auto impl = loss.impl();
  impl->grad.assign(1, 1.0f);
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
  tape.clear();
}

// ---------------------------------------------------------------------------
// Shared kernels

namespace {

// Four f64 accumulators break the FMA dependency chain; gcc vectorises the
// convert+multiply-add body at -O3.
double dot_impl(const float* a, const float* b, size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    s1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
    s2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
    s3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
  }
  for (; i < n; ++i) s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (s0 + s1) + (s2 + s3);
}

bool any_tracked(std::initializer_list<const Tensor*> ins) {
  for (const Tensor* t : ins)
    if (t->defined() && t->tracked()) return true;
  return false;
}

// Marks the output as on-path and records the closure, if a tape is active
// and any input is on-path. Returns true when recorded.
bool maybe_record(std::initializer_list<const Tensor*> ins, Tensor& out,
                  std::function<void()> fn) {
  Tape* tape = Tape::current();
  if (!tape || !any_tracked(ins)) return false;
  out.impl()->tracked = true;
  tape->record(std::move(fn));
  return true;
}

std::vector<float>& ensure_grad(const std::shared_ptr<TensorImpl>& impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0f);
  return impl->grad;
}

// Output grad of a node; empty span when this output never received one.
std::span<const float> out_grad(const std::shared_ptr<TensorImpl>& impl) {
  return impl->grad;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!shape_equal(a.shape(), b.shape()))
    raise(Errc::ShapeMismatch, std::string(op) + ": " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
}

}  // namespace

double dot_f64(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) raise(Errc::ShapeMismatch, "dot length mismatch");
  return dot_impl(a.data(), b.data(), a.size());
}

// ---------------------------------------------------------------------------
// matmul / linear

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    raise(Errc::ShapeMismatch, "matmul expects rank-2 inputs");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    raise(Errc::ShapeMismatch, "matmul inner dims " + std::to_string(k) +
                                   " vs " + std::to_string(k2));
  Tensor out = Tensor::zeros({m, n});
  {
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.mutable_data().data();
    // b column access is strided; transpose once for contiguous dots.
    std::vector<float> bt(static_cast<size_t>(k) * n);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < n; ++j) bt[static_cast<size_t>(j) * k + i] = pb[static_cast<size_t>(i) * n + j];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        po[static_cast<size_t>(i) * n + j] = static_cast<float>(
            dot_impl(pa + static_cast<size_t>(i) * k, bt.data() + static_cast<size_t>(j) * k, static_cast<size_t>(k)));
  }
  auto ia = a.impl(), ib = b.impl(), io = out.impl();
  maybe_record({&a, &b}, out, [ia, ib, io, m, k, n]() {
    auto gy = out_grad(io);
    if (gy.empty()) return;
    if (ia->tracked || ia->requires_grad) {
      auto& ga = ensure_grad(ia);
      // dA = dY . B^T
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) {
          double acc = 0.0;
          for (int t = 0; t < n; ++t)
            acc += static_cast<double>(gy[static_cast<size_t>(i) * n + t]) * ib->data[static_cast<size_t>(j) * n + t];
          ga[static_cast<size_t>(i) * k + j] += static_cast<float>(acc);
        }
    }
    if (ib->tracked || ib->requires_grad) {
      auto& gb = ensure_grad(ib);
      // dB = A^T . dY
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int t = 0; t < m; ++t)
            acc += static_cast<double>(ia->data[static_cast<size_t>(t) * k + i]) * gy[static_cast<size_t>(t) * n + j];
          gb[static_cast<size_t>(i) * n + j] += static_cast<float>(acc);
        }
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 1 || w.rank() != 2)
    raise(Errc::ShapeMismatch, "linear expects x:[in], w:[out,in]");
  const int in = x.dim(0), out_dim = w.dim(0);
  if (w.dim(1) != in)
    raise(Errc::ShapeMismatch, "linear: w " + shape_str(w.shape()) + " vs x " + shape_str(x.shape()));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim))
    raise(Errc::ShapeMismatch, "linear: bias " + shape_str(b.shape()));
  Tensor y = Tensor::zeros({out_dim});
  {
    const float* px = x.data().data();
    const float* pw = w.data().data();
    float* py = y.mutable_data().data();
    for (int o = 0; o < out_dim; ++o) {
      double acc = b.defined() ? static_cast<double>(b.at(o)) : 0.0;
      acc += dot_impl(pw + static_cast<size_t>(o) * in, px, static_cast<size_t>(in));
      py[o] = static_cast<float>(acc);
    }
  }
  auto ix = x.impl(), iw = w.impl(), iy = y.impl();
  auto ib = b.defined() ? b.impl() : nullptr;
  maybe_record({&x, &w, &b}, y, [ix, iw, ib, iy, in, out_dim]() {
    auto gy = out_grad(iy);
    if (gy.empty()) return;
    if (ix->tracked || ix->requires_grad) {
      auto& gx = ensure_grad(ix);
      for (int i = 0; i < in; ++i) {
        double acc = 0.0;
        for (int o = 0; o < out_dim; ++o)
          acc += static_cast<double>(iw->data[static_cast<size_t>(o) * in + i]) * gy[o];
        gx[i] += static_cast<float>(acc);
      }
    }
    if (iw->tracked || iw->requires_grad) {
      auto& gw = ensure_grad(iw);
      for (int o = 0; o < out_dim; ++o) {
        const float g = gy[o];
        if (g == 0.0f) continue;
        float* row = gw.data() + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) row[i] += g * ix->data[i];
      }
    }
    if (ib && (ib->tracked || ib->requires_grad)) {
      auto& gb = ensure_grad(ib);
      for (int o = 0; o < out_dim; ++o) gb[o] += gy[o];
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  // No broadcasting beyond scalars: either shapes match exactly or one side
  // is a single element.
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!a_scalar && !b_scalar) check_same_shape(a, b, "elementwise");
  const Tensor& shaped = a_scalar && !b_scalar ? b : a;
  Tensor out = Tensor::zeros(shaped.shape());
  const int64_t n = out.size();
  {
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.mutable_data();
    for (int64_t i = 0; i < n; ++i) {
      const float va = a_scalar ? pa[0] : pa[static_cast<size_t>(i)];
      const float vb = b_scalar ? pb[0] : pb[static_cast<size_t>(i)];
      switch (op) {
        case BinOp::Add: po[static_cast<size_t>(i)] = va + vb; break;
        case BinOp::Sub: po[static_cast<size_t>(i)] = va - vb; break;
        case BinOp::Mul: po[static_cast<size_t>(i)] = va * vb; break;
      }
    }
  }
  auto ia = a.impl(), ib = b.impl(), io = out.impl();
  maybe_record({&a, &b}, out, [ia, ib, io, op, a_scalar, b_scalar, n]() {
    auto gy = out_grad(io);
    if (gy.empty()) return;
    auto accum = [&](const std::shared_ptr<TensorImpl>& tgt, bool tgt_scalar,
                     const std::shared_ptr<TensorImpl>& other, bool other_scalar,
                     bool negate, bool times_other) {
      if (!(tgt->tracked || tgt->requires_grad)) return;
      auto& g = ensure_grad(tgt);
      if (tgt_scalar && n > 1) {
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          double v = gy[static_cast<size_t>(i)];
          if (times_other) v *= other->data[other_scalar ? 0 : static_cast<size_t>(i)];
          acc += negate ? -v : v;
        }
        g[0] += static_cast<float>(acc);
      } else {
        for (int64_t i = 0; i < n; ++i) {
          float v = gy[static_cast<size_t>(i)];
          if (times_other) v *= other->data[other_scalar ? 0 : static_cast<size_t>(i)];
          g[static_cast<size_t>(i)] += negate ? -v : v;
        }
      }
    };
    switch (op) {
      case BinOp::Add:
        accum(ia, a_scalar, ib, b_scalar, false, false);
        accum(ib, b_scalar, ia, a_scalar, false, false);
        break;
      case BinOp::Sub:
        accum(ia, a_scalar, ib, b_scalar, false, false);
        accum(ib, b_scalar, ia, a_scalar, true, false);
        break;
      case BinOp::Mul:
        accum(ia, a_scalar, ib, b_scalar, false, true);
        accum(ib, b_scalar, ia, a_scalar, false, true);
        break;
    }
  });
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = x.size();
  {
    auto px = x.data();
    auto po = out.mutable_data();
    for (int64_t i = 0; i < n; ++i) po[static_cast<size_t>(i)] = fwd(px[static_cast<size_t>(i)]);
  }
  auto ix = x.impl(), io = out.impl();
  maybe_record({&x}, out, [ix, io, bwd, n]() {
    auto gy = out_grad(io);
    if (gy.empty()) return;
    if (!(ix->tracked || ix->requires_grad)) return;
    auto& gx = ensure_grad(ix);
    for (int64_t i = 0; i < n; ++i)
      gx[static_cast<size_t>(i)] +=
          gy[static_cast<size_t>(i)] * bwd(ix->data[static_cast<size_t>(i)], io->data[static_cast<size_t>(i)]);
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }

Tensor scale(const Tensor& a, float s) {
  return unary(a, [s](float v) { return v * s; },
               [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary(a, [s](float v) { return v + s; },
               [](float, float) { return 1.0f; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](float v) { return v > 0.0f ? v : 0.0f; },
               [](float vin, float) { return vin > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& x) {
  auto fwd = [](float v) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); };
  auto bwd = [](float, float vout) {
    float d = vout * (1.0f - vout);
    if (debug::corrupt_sigmoid_backward) d += 0.05f;
    return d;
  };
  return unary(x, fwd, bwd);
}

Tensor tanh_op(const Tensor& x) {
  return unary(x, [](float v) { return std::tanh(v); },
               [](float, float vout) { return 1.0f - vout * vout; });
}

Tensor prelu(const Tensor& x, const Tensor& alpha) {
  if (alpha.size() != 1) raise(Errc::ShapeMismatch, "prelu alpha must be scalar");
  const float a = alpha.item();
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = x.size();
  {
    auto px = x.data();
    auto po = out.mutable_data();
    for (int64_t i = 0; i < n; ++i) {
      float v = px[static_cast<size_t>(i)];
      po[static_cast<size_t>(i)] = v > 0.0f ? v : a * v;
    }
  }
  auto ix = x.impl(), ia = alpha.impl(), io = out.impl();
  maybe_record({&x, &alpha}, out, [ix, ia, io, a, n]() {
    auto gy = out_grad(io);
    if (gy.empty()) return;
    if (ix->tracked || ix->requires_grad) {
      auto& gx = ensure_grad(ix);
      for (int64_t i = 0; i < n; ++i) {
        float v = ix->data[static_cast<size_t>(i)];
        gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * (v > 0.0f ? 1.0f : a);
      }
    }
    if (ia->tracked || ia->requires_grad) {
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        float v = ix->data[static_cast<size_t>(i)];
        if (v <= 0.0f) acc += static_cast<double>(gy[static_cast<size_t>(i)]) * v;
      }
      ensure_grad(ia)[0] += static_cast<float>(acc);
    }
  });
  return out;
}

Tensor pow_scalar(const Tensor& x, float p) {
  return unary(x, [p](float v) { return std::pow(v, p); },
               [p](float vin, float) { return p * std::pow(vin, p - 1.0f); });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1});
  const int64_t n = x.size();
  {
    auto px = x.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += px[static_cast<size_t>(i)];
    out.mutable_data()[0] = static_cast<float>(acc);
  }
  auto ix = x.impl(), io = out.impl();
  maybe_record({&x}, out, [ix, io, n]() {
    auto gy = out_grad(io);
    if (gy.empty()) return;
    if (!(ix->tracked || ix->requires_grad)) return;
    auto& gx = ensure_grad(ix);
    for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += gy[0];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  Tensor s = sum(x);
  return scale(s, 1.0f / static_cast<float>(x.size()));
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1)
    raise(Errc::ShapeMismatch, "concat expects 1-D inputs");
  const int na = a.dim(0), nb = b.dim(0);
  Tensor out = Tensor::zeros({na + nb});
  {
    auto po = out.mutable_data();
    std::memcpy(po.data(), a.data().data(), sizeof(float) * static_cast<size_t>(na));
    std::memcpy(po.data() + na, b.data().data(), sizeof(float) * static_cast<size_t>(nb));
  }
  auto ia = a.impl(), ib = b.impl(), io = out.impl();
  maybe_record({&a, &b}, out, [ia, ib, io, na, nb]() {
    auto gy = out_grad(io);
    if (gy.empty()) return;
    if (ia->tracked || ia->requires_grad) {
      auto& ga = ensure_grad(ia);
      for (int i = 0; i < na; ++i) ga[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
    }
    if (ib->tracked || ib->requires_grad) {
      auto& gb = ensure_grad(ib);
      for (int i = 0; i < nb; ++i) gb[static_cast<size_t>(i)] += gy[static_cast<size_t>(na + i)];
    }
  });
  return out;
}

Tensor slice(const Tensor& x, int64_t begin, int64_t len) {
  if (x.rank() != 1) raise(Errc::ShapeMismatch, "slice expects a 1-D input");
  if (begin < 0 || len <= 0 || begin + len > x.size())
    raise(Errc::ShapeMismatch, "slice range out of bounds");
  Tensor out = Tensor::zeros({static_cast<int>(len)});
  std::memcpy(out.mutable_data().data(), x.data().data() + begin,
              sizeof(float) * static_cast<size_t>(len));
  auto ix = x.impl(), io = out.impl();
  maybe_record({&x}, out, [ix, io, begin, len]() {
    auto gy = out_grad(io);
    if (gy.empty()) return;
    if (!(ix->tracked || ix->requires_grad)) return;
    auto& gx = ensure_grad(ix);
    for (int64_t i = 0; i < len; ++i) gx[static_cast<size_t>(begin + i)] += gy[static_cast<size_t>(i)];
  });
  return out;
}

// ---------------------------------------------------------------------------
// grad_check

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           std::span<Tensor> params, float eps, float tol,
                           Rng& rng, int max_samples) {
  if (eps <= 0.0f) raise(Errc::InvalidConfig, "grad_check eps must be > 0");

  auto eval = [&]() -> double {
    Tape::Pause pause;
    Tensor y = f();
    if (y.size() != 1) raise(Errc::NotScalarLoss, "grad_check function must return a scalar");
    return static_cast<double>(y.item());
  };

  const double l0 = eval();
  const double l1 = eval();
  if (std::memcmp(&l0, &l1, sizeof(double)) != 0)
    raise(Errc::NonDeterministicFunction, "two forward passes disagree");

  for (auto& p : params) p.zero_grad();
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = f();
    if (tape.node_count() > 0) backward(loss, tape);
  }

  // Gather all scalar coordinates, shuffle, keep at most max_samples while
  // touching every parameter tensor at least once.
  struct Coord { size_t tensor; int64_t index; };
  std::vector<Coord> coords;
  for (size_t t = 0; t < params.size(); ++t)
    for (int64_t i = 0; i < params[t].size(); ++i) coords.push_back({t, i});
  for (size_t i = coords.size(); i > 1; --i)
    std::swap(coords[i - 1], coords[rng.below(i)]);
  if (static_cast<int>(coords.size()) > max_samples) {
    // One coordinate per tensor first (so no parameter tensor goes
    // unchecked), then fill from the shuffled pool.
    std::vector<Coord> chosen;
    chosen.reserve(static_cast<size_t>(max_samples));
    std::vector<bool> represented(params.size(), false);
    std::vector<bool> used(coords.size(), false);
    for (size_t i = 0; i < coords.size(); ++i) {
      if (static_cast<int>(chosen.size()) >= max_samples) break;
      if (represented[coords[i].tensor]) continue;
      represented[coords[i].tensor] = true;
      used[i] = true;
      chosen.push_back(coords[i]);
    }
    for (size_t i = 0; i < coords.size(); ++i) {
      if (static_cast<int>(chosen.size()) >= max_samples) break;
      if (!used[i]) chosen.push_back(coords[i]);
    }
    coords = std::move(chosen);
  }

  GradCheckReport report;
  for (const auto& c : coords) {
    Tensor& p = params[c.tensor];
    float* slot = p.mutable_data().data() + c.index;
    const float orig = *slot;
    const float hi = orig + eps;
    const float lo = orig - eps;
    *slot = hi;
    const double lp = eval();
    *slot = lo;
    const double lm = eval();
    *slot = orig;
    const double numeric = (lp - lm) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double analytic = p.has_grad() ? static_cast<double>(p.grad()[static_cast<size_t>(c.index)]) : 0.0;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.checked;
  }
  report.pass = report.max_rel_err <= static_cast<double>(tol);
  return report;
}

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NotScalarLoss: return "NotScalarLoss";
    case Errc::EmptyTape: return "EmptyTape";
    case Errc::NonDeterministicFunction: return "NonDeterministicFunction";
    case Errc::NotDivisible: return "NotDivisible";
    case Errc::InputTooShort: return "InputTooShort";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::BadFrameShape: return "BadFrameShape";
    case Errc::SessionPoisoned: return "SessionPoisoned";
    case Errc::TimestampRegression: return "TimestampRegression";
    case Errc::AlreadyFinished: return "AlreadyFinished";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::ZeroReference: return "ZeroReference";
    case Errc::PositionOutOfRoom: return "PositionOutOfRoom";
    case Errc::SilentSource: return "SilentSource";
    case Errc::UnsupportedFormat: return "UnsupportedFormat";
    case Errc::UnsupportedSampleRate: return "UnsupportedSampleRate";
    case Errc::CorruptHeader: return "CorruptHeader";
    case Errc::BadMagic: return "BadMagic";
    case Errc::UnsupportedVersion: return "UnsupportedVersion";
    case Errc::UnknownTensor: return "UnknownTensor";
    case Errc::MissingTensor: return "MissingTensor";
    case Errc::UnexpectedEof: return "UnexpectedEof";
    case Errc::IoError: return "IoError";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
  }
  return "UnknownError";
}

}  // namespace ave3
