#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ave3/error.hpp"

namespace ave3 {

class Rng;

// Dimension sizes, outermost first. Data is dense row-major f32.
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
bool shape_equal(const Shape& a, const Shape& b);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;     // empty until backward touches it
  bool requires_grad = false;  // leaf parameter
  bool tracked = false;        // on the gradient path of the active tape
};
}  // namespace detail

// Value-semantic handle over a shared dense buffer. Shapes are fixed at
// creation; reshape returns a new tensor over a copy of the data. Only the
// grad buffer mutates after construction (plus mutable_data for parameter
// initialisation and loaders, which must not be used on tensors already
// recorded on a tape).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values,
                     bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int i) const;
  int64_t size() const;
  bool requires_grad() const;
  bool tracked() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;  // scalar tensors only
  float at(int64_t flat_index) const;

  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();  // zero-fills on first use
  void zero_grad();

  Tensor reshape(Shape new_shape) const;
  Tensor clone() const;  // deep copy, detached from any tape

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Ops record a backward closure when a tape is active
// (see Tape::Scope) and at least one input is on the gradient path. A tape
// belongs to one forward pass and one thread; backward() consumes it.
// With no active tape, ops are pure computation and record nothing.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t node_count() const { return nodes_.size(); }
  void record(std::function<void()> backward_fn);
  void clear() { nodes_.clear(); }

  static Tape* current();

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  // Suspends recording (used by grad_check's finite-difference passes).
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<std::function<void()>> nodes_;
  friend void backward(const Tensor&, Tape&);
};

// Seeds d(loss)/d(loss)=1 and walks the tape in reverse record order,
// accumulating gradients into every tensor on the path. The tape is
// consumed; a second call raises EmptyTape.
void backward(const Tensor& loss, Tape& tape);

// ---- primitive ops (all record backward rules when a tape is active) ----

Tensor matmul(const Tensor& a, const Tensor& b);             // [m,k]x[k,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // w:[out,in]
Tensor add(const Tensor& a, const Tensor& b);   // same shape, or one scalar
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& x);
Tensor prelu(const Tensor& x, const Tensor& alpha);  // alpha: learnable scalar
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor pow_scalar(const Tensor& x, float p);  // elementwise x^p, x > 0
Tensor sum(const Tensor& x);                  // -> scalar
Tensor mean(const Tensor& x);                 // -> scalar
Tensor concat(const Tensor& a, const Tensor& b);            // 1-D
Tensor slice(const Tensor& x, int64_t begin, int64_t len);  // 1-D

// Dot product with f64 accumulation; the kernel under every matmul/linear.
double dot_f64(std::span<const float> a, std::span<const float> b);

struct GradCheckReport {
  double max_rel_err = 0.0;
  int checked = 0;
  bool pass = false;
};

// Central finite differences against tape gradients over a random subsample
// of at most max_samples scalar parameters (all of them, if fewer). The
// function is evaluated twice up front; any bitwise difference raises
// NonDeterministicFunction. Relative error uses max(|a|,|n|,1e-8).
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           std::span<Tensor> params, float eps, float tol,
                           Rng& rng, int max_samples = 100);

namespace debug {
// Test fixture: corrupts the sigmoid backward rule so a broken gradient is
// observable end to end. Never set outside tests.
extern bool corrupt_sigmoid_backward;
}  // namespace debug

}  // namespace ave3
