#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ave3/rng.hpp"
#include "ave3/tensor.hpp"

using namespace ave3;

namespace {

// Independent triple-loop oracle for matmul.
std::vector<float> matmul_oracle(std::span<const float> a, std::span<const float> b,
                                 int m, int k, int n) {
  std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t)
        acc += static_cast<double>(a[static_cast<size_t>(i) * k + t]) * b[static_cast<size_t>(t) * n + j];
      out[static_cast<size_t>(i) * n + j] = static_cast<float>(acc);
    }
  return out;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul identity") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor y = matmul(a, eye);
  CHECK(max_abs_diff(y.data(), a.data()) == 0.0);
}

TEST_CASE("matmul hand example") {
  Tensor a = Tensor::from({1, 2}, {1, 2});
  Tensor b = Tensor::from({2, 1}, {3, 4});
  Tensor y = matmul(a, b);
  CHECK(y.item() == doctest::Approx(11.0f));
}

TEST_CASE("matmul vs triple-loop oracle") {
  Rng rng(7);
  Tensor a = Tensor::uniform({5, 7}, rng, -1.0f, 1.0f);
  Tensor b = Tensor::uniform({7, 3}, rng, -1.0f, 1.0f);
  Tensor y = matmul(a, b);
  auto expect = matmul_oracle(a.data(), b.data(), 5, 7, 3);
  CHECK(max_abs_diff(y.data(), expect) <= 1e-6);
}

TEST_CASE("matmul random dims vs oracle up to 32") {
  Rng rng(21);
  for (int iter = 0; iter < 10; ++iter) {
    int m = 1 + static_cast<int>(rng.below(32));
    int k = 1 + static_cast<int>(rng.below(32));
    int n = 1 + static_cast<int>(rng.below(32));
    Tensor a = Tensor::uniform({m, k}, rng, -2.0f, 2.0f);
    Tensor b = Tensor::uniform({k, n}, rng, -2.0f, 2.0f);
    auto expect = matmul_oracle(a.data(), b.data(), m, k, n);
    CHECK(max_abs_diff(matmul(a, b).data(), expect) <= 1e-6);
  }
}

TEST_CASE("matmul shape mismatch") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), Error);
  try {
    matmul(a, b);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ShapeMismatch);
  }
}

TEST_CASE("elementwise basics") {
  CHECK(sigmoid(Tensor::scalar(0.0f)).item() == doctest::Approx(0.5f));
  Tensor r = relu(Tensor::from({2}, {-1, 2}));
  CHECK(r.at(0) == 0.0f);
  CHECK(r.at(1) == 2.0f);
  Tensor p = prelu(Tensor::from({2}, {-4, 4}), Tensor::scalar(0.25f));
  CHECK(p.at(0) == doctest::Approx(-1.0f));
  CHECK(p.at(1) == doctest::Approx(4.0f));
  CHECK(tanh_op(Tensor::scalar(0.0f)).item() == 0.0f);
}

TEST_CASE("binary ops reject non-scalar shape mismatch") {
  Tensor a = Tensor::zeros({3});
  Tensor b = Tensor::zeros({4});
  CHECK_THROWS_AS(add(a, b), Error);
  CHECK_THROWS_AS(mul(a, b), Error);
  // scalar broadcast is the one exception
  CHECK_NOTHROW(add(a, Tensor::scalar(1.0f)));
}

TEST_CASE("backward: sum gives ones") {
  Rng rng(3);
  Tensor x = Tensor::uniform({3, 4}, rng, -1, 1, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = sum(x);
    backward(loss, tape);
  }
  for (int64_t i = 0; i < x.size(); ++i) CHECK(x.grad()[static_cast<size_t>(i)] == 1.0f);
}

TEST_CASE("backward: sum of squares") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = sum(mul(x, x));
    backward(loss, tape);
  }
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  CHECK(x.grad()[1] == doctest::Approx(4.0f));
  CHECK(x.grad()[2] == doctest::Approx(6.0f));
}

TEST_CASE("backward twice raises EmptyTape") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tensor loss;
  {
    Tape::Scope scope(tape);
    loss = sum(x);
  }
  backward(loss, tape);
  CHECK_THROWS_AS(backward(loss, tape), Error);
  try {
    backward(loss, tape);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::EmptyTape);
  }
}

TEST_CASE("backward requires scalar loss") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tensor y;
  {
    Tape::Scope scope(tape);
    y = mul(x, x);
  }
  CHECK_THROWS_AS(backward(y, tape), Error);
}

TEST_CASE("grad_check passes on a tiny sigmoid net") {
  Rng rng(11);
  Tensor w = Tensor::uniform({4, 6}, rng, -0.5f, 0.5f, true);
  Tensor x = Tensor::uniform({6}, rng, -1.0f, 1.0f);
  std::vector<Tensor> params = {w};
  auto f = [&]() {
    Tensor b;
    return sum(sigmoid(linear(x, w, b)));
  };
  Rng check_rng(5);
  auto report = grad_check(f, params, 1e-3f, 1e-3f, check_rng);
  CHECK(report.pass);
  CHECK(report.checked == 24);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("grad_check on a constant function passes") {
  Tensor w = Tensor::from({3}, {1, 2, 3}, true);
  std::vector<Tensor> params = {w};
  auto f = []() { return Tensor::scalar(42.0f); };
  Rng rng(1);
  auto report = grad_check(f, params, 1e-3f, 1e-3f, rng);
  CHECK(report.pass);
  CHECK(report.max_rel_err == 0.0);
}

TEST_CASE("grad_check detects a corrupted backward rule") {
  Rng rng(13);
  Tensor w = Tensor::uniform({3, 3}, rng, -0.5f, 0.5f, true);
  Tensor x = Tensor::uniform({3}, rng, -1.0f, 1.0f);
  std::vector<Tensor> params = {w};
  auto f = [&]() {
    Tensor b;
    return sum(sigmoid(linear(x, w, b)));
  };
  debug::corrupt_sigmoid_backward = true;
  Rng check_rng(5);
  auto report = grad_check(f, params, 1e-3f, 1e-3f, check_rng);
  debug::corrupt_sigmoid_backward = false;
  CHECK_FALSE(report.pass);
}

TEST_CASE("grad_check determinism and repeatability") {
  Rng rng(17);
  Tensor w = Tensor::uniform({4, 4}, rng, -0.5f, 0.5f, true);
  Tensor x = Tensor::uniform({4}, rng, -1.0f, 1.0f);
  std::vector<Tensor> params = {w};
  auto f = [&]() {
    Tensor b;
    return mean(tanh_op(linear(x, w, b)));
  };
  Rng r1(99), r2(99);
  auto a = grad_check(f, params, 1e-3f, 1e-3f, r1);
  auto b = grad_check(f, params, 1e-3f, 1e-3f, r2);
  CHECK(a.max_rel_err == b.max_rel_err);
}

// Property: analytic gradients of every primitive match central finite
// differences on random small shapes.
TEST_CASE("primitive ops pass finite-difference checks") {
  Rng rng(29);
  for (int iter = 0; iter < 8; ++iter) {
    const int n = 2 + static_cast<int>(rng.below(6));
    Tensor a = Tensor::uniform({n}, rng, -0.9f, 0.9f, true);
    Tensor b = Tensor::uniform({n}, rng, -0.9f, 0.9f, true);
    Tensor alpha = Tensor::scalar(0.25f, true);
    std::vector<Tensor> params = {a, b, alpha};
    auto f = [&]() {
      Tensor t1 = mul(add(a, b), sub(a, b));
      Tensor t2 = prelu(t1, alpha);
      Tensor t3 = add(sigmoid(t2), tanh_op(scale(a, 0.5f)));
      Tensor t4 = mul(t3, t3);
      Tensor t5 = pow_scalar(add_scalar(t4, 1.0f), 0.3f);
      return mean(concat(t5, slice(t3, 0, n / 2 + 1)));
    };
    Rng check_rng(1000 + static_cast<uint64_t>(iter));
    auto report = grad_check(f, params, 1e-3f, 1e-3f, check_rng, 64);
    INFO("iter ", iter, " max_rel_err ", report.max_rel_err);
    CHECK(report.pass);
  }
}

TEST_CASE("matmul gradients pass finite differences") {
  Rng rng(31);
  Tensor a = Tensor::uniform({3, 4}, rng, -0.8f, 0.8f, true);
  Tensor b = Tensor::uniform({4, 2}, rng, -0.8f, 0.8f, true);
  std::vector<Tensor> params = {a, b};
  auto f = [&]() { return sum(tanh_op(matmul(a, b))); };
  Rng check_rng(2);
  auto report = grad_check(f, params, 1e-3f, 1e-3f, check_rng);
  CHECK(report.pass);
}

TEST_CASE("reshape keeps count and flows gradient") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  CHECK_THROWS_AS(x.reshape({4, 2}), Error);
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor y = x.reshape({6});
    backward(sum(mul(y, y)), tape);
  }
  CHECK(x.grad()[5] == doctest::Approx(12.0f));
}

TEST_CASE("inference mode records nothing") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = mul(x, x);  // no active tape
  CHECK(y.at(1) == 4.0f);
  Tape tape;
  CHECK(tape.node_count() == 0);
}

TEST_CASE("no gradient flows into untracked inputs") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor k = Tensor::from({2}, {3, 4});  // constant
  Tape tape;
  {
    Tape::Scope scope(tape);
    backward(sum(mul(x, k)), tape);
  }
  CHECK_FALSE(k.has_grad());
  CHECK(x.grad()[0] == doctest::Approx(3.0f));
}
