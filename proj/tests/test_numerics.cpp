// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "dvp/grad_check.hpp"
#include "dvp/kernels.hpp"
#include "helpers.hpp"

using namespace dvp;
using dvp::test::max_abs_diff;
using dvp::test::random_tensor;

TEST_CASE("tensor construction validates shape and data") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), Error);
  CHECK_THROWS_AS(Tensor({2, 0}), Error);
  Tensor t({2, 3}, 1.5);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.size() == 6);
  CHECK(t(1, 2) == 1.5);
  Tensor r({4, 2, 3});
  CHECK(r.rows() == 8);
  CHECK(r.cols() == 3);
}

TEST_CASE("gradient buffer keeps the tensor's shape") {
  Tensor t({2, 2}, 1.0);
  CHECK_FALSE(t.has_grad());
  std::vector<double> g{1, 2, 3, 4};
  t.accumulate_grad(g);
  t.accumulate_grad(g);
  REQUIRE(t.has_grad());
  CHECK(t.grad().size() == t.size());
  CHECK(t.grad()[3] == 8.0);
  CHECK_THROWS_AS(t.accumulate_grad(std::vector<double>(3)), Error);
}

TEST_CASE("matmul examples") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = tape.constant(Tensor::matrix(2, 1, {5, 6}));
  const Tensor& c = ad::matmul(a, b).value();
  CHECK(c(0, 0) == 17.0);
  CHECK(c(1, 0) == 39.0);

  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  Var xi = ad::matmul(tape.constant(x), tape.constant(Tensor::identity(4)));
  CHECK(xi.value() == x);

  Var p = tape.constant(Tensor({2, 3}));
  Var q = tape.constant(Tensor({2, 3}));
  try {
    ad::matmul(p, q);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul equals a naive triple loop exactly on integer inputs") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(9), p = 1 + rng.below(9);
    Tensor a({m, k}), b({k, p});
    for (auto& v : a.values()) v = static_cast<double>(static_cast<int>(rng.below(21)) - 10);
    for (auto& v : b.values()) v = static_cast<double>(static_cast<int>(rng.below(21)) - 10);
    Tensor expect({m, p});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j)
        for (std::size_t t = 0; t < k; ++t) expect(i, j) += a(i, t) * b(t, j);
    Tape tape;
    CHECK(ad::matmul(tape.constant(a), tape.constant(b)).value() == expect);
  }
}

TEST_CASE("softmax rows") {
  Tape tape;
  const Tensor& y = ad::softmax_rows(tape.constant(Tensor::matrix(2, 2, {0, 0, 1, 0}))).value();
  CHECK(y(0, 0) == 0.5);
  CHECK(y(1, 0) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(y(1, 1) == doctest::Approx(0.268941).epsilon(1e-6));

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5, 7}, rng, 5.0);
    Tensor shifted = x;
    for (std::size_t r = 0; r < 5; ++r) {
      const double c = rng.uniform(-50, 50);
      for (auto& v : shifted.row(r)) v += c;
    }
    const Tensor a = ad::softmax_rows(tape.constant(x)).value();
    const Tensor b = ad::softmax_rows(tape.constant(shifted)).value();
    CHECK(max_abs_diff(a, b) < 1e-12);
    for (std::size_t r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (double v : a.row(r)) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
  Tensor bad = Tensor::matrix(1, 2, {NAN, 0});
  CHECK_THROWS_AS(ad::softmax_rows(tape.constant(bad)), Error);
}

TEST_CASE("gelu values") {
  CHECK(gelu_scalar(0.0) == 0.0);
  CHECK(std::abs(gelu_scalar(3.0) - 2.995950) < 1e-5);
  CHECK(std::abs(gelu_scalar(-3.0) + 0.004050) < 1e-5);
}

TEST_CASE("layer norm examples") {
  Tape tape;
  Var gain = tape.constant(Tensor({2}, 1.0));
  Var bias = tape.constant(Tensor({2}, 0.0));
  const Tensor& y = ad::layer_norm(tape.constant(Tensor::matrix(1, 2, {1, 3})), gain, bias, 1e-12).value();
  CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y(0, 1) == doctest::Approx(1.0).epsilon(1e-9));

  const Tensor& z = ad::layer_norm(tape.constant(Tensor::matrix(1, 2, {4, 4})), gain, bias, 1e-5).value();
  CHECK(z(0, 0) == 0.0);
  CHECK(z(0, 1) == 0.0);

  Var zero_gain = tape.constant(Tensor({2}, 0.0));
  Var b2 = tape.constant(Tensor({2}, std::vector<double>{0.25, -2.0}));
  const Tensor& w = ad::layer_norm(tape.constant(Tensor::matrix(1, 2, {7, -1})), zero_gain, b2, 1e-5).value();
  CHECK(w(0, 0) == 0.25);
  CHECK(w(0, 1) == -2.0);

  CHECK_THROWS_AS(ad::layer_norm(tape.constant(Tensor({1, 3})), gain, bias, 1e-5), Error);
}

TEST_CASE("parallel kernels agree with the serial reference") {
  Rng rng(4);
  const std::size_t m = 37, k = 29, p = 41;
  auto close = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
  };
  auto rnd = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  auto a = rnd(m * k), b = rnd(k * p), bt = rnd(p * k), at = rnd(k * m);
  std::vector<double> c1(m * p), c2(m * p);
  kernels::matmul(a, b, c1, m, k, p);
  reference::matmul(a, b, c2, m, k, p);
  CHECK(close(c1, c2) < 1e-12);
  std::fill(c1.begin(), c1.end(), 0.0);
  std::fill(c2.begin(), c2.end(), 0.0);
  kernels::matmul_nt(a, bt, c1, m, k, p);
  reference::matmul_nt(a, bt, c2, m, k, p);
  CHECK(close(c1, c2) < 1e-12);
  std::vector<double> g1(k * p), g2(k * p);
  auto mm = rnd(m * p);
  kernels::matmul_tn(a, mm, g1, m, k, p);
  reference::matmul_tn(a, mm, g2, m, k, p);
  CHECK(close(g1, g2) < 1e-12);

  auto x = rnd(m * k), dy = rnd(m * k);
  std::vector<double> y1(m * k), y2(m * k), d1(m * k), d2(m * k);
  kernels::softmax_rows(x, y1, m, k);
  reference::softmax_rows(x, y2, m, k);
  CHECK(close(y1, y2) < 1e-15);
  kernels::softmax_rows_backward(y1, dy, d1, m, k);
  reference::softmax_rows_backward(y2, dy, d2, m, k);
  CHECK(close(d1, d2) < 1e-14);

  kernels::gelu(x, y1);
  reference::gelu(x, y2);
  CHECK(close(y1, y2) == 0.0);

  auto gain = rnd(k), bias = rnd(k);
  std::vector<double> mu1(m), mu2(m), rs1(m), rs2(m);
  kernels::layer_norm(x, gain, bias, y1, mu1, rs1, m, k, 1e-5);
  reference::layer_norm(x, gain, bias, y2, mu2, rs2, m, k, 1e-5);
  CHECK(close(y1, y2) < 1e-13);

  AttentionDims dims{3, 5, 7, 12, 3, 0.5};
  auto q = rnd(3 * 5 * 12), kk = rnd(3 * 7 * 12), v = rnd(3 * 7 * 12), dout = rnd(3 * 5 * 12);
  std::vector<double> o1(q.size()), o2(q.size()), p1(dims.probs_size()), p2(dims.probs_size());
  kernels::attention(q, kk, v, o1, p1, dims);
  reference::attention(q, kk, v, o2, p2, dims);
  CHECK(close(o1, o2) < 1e-13);
  CHECK(close(p1, p2) < 1e-15);
  std::vector<double> dq1(q.size()), dq2(q.size()), dk1(kk.size()), dk2(kk.size()),
      dv1(v.size()), dv2(v.size());
  kernels::attention_backward(q, kk, v, p1, dout, dq1, dk1, dv1, dims);
  reference::attention_backward(q, kk, v, p2, dout, dq2, dk2, dv2, dims);
  CHECK(close(dq1, dq2) < 1e-13);
  CHECK(close(dk1, dk2) < 1e-13);
  CHECK(close(dv1, dv2) < 1e-13);
}

TEST_CASE("attention probability rows sum to one") {
  Rng rng(5);
  Tape tape;
  AttentionDims dims{2, 3, 6, 8, 2, 0.5};
  Tensor probs;
  ad::attention(tape.constant(random_tensor({6, 8}, rng)), tape.constant(random_tensor({12, 8}, rng)),
                tape.constant(random_tensor({12, 8}, rng)), dims, &probs);
  REQUIRE(probs.size() == dims.probs_size());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    double sum = 0.0;
    for (double v : probs.row(r)) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("grad_check on a quadratic is exact to roundoff") {
  Rng rng(6);
  Tensor x = random_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  Tensor* params[] = {&x};
  auto report = grad_check([&](Tape& t) { return ad::sum_squares(t.param(x)); }, params, 1e-5, 1e-8);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-8);
  CHECK_THROWS_AS(grad_check([&](Tape& t) { return ad::sum_squares(t.param(x)); }, params, 1.0, 1e-8),
                  Error);
}

namespace {

struct OpCase {
  const char* name;
  std::function<Var(Tape&, std::vector<Tensor>&)> loss;
  std::vector<Shape> shapes;
};

}  // namespace

TEST_CASE("every differentiable op matches finite differences over 20 seeds") {
  const std::vector<int> ids{0, 3, 1, 3, 2};
  const std::vector<int> labels{2, 0, 1};
  std::vector<OpCase> cases = {
      {"matmul", [](Tape& t, auto& p) { return ad::sum_squares(ad::matmul(t.param(p[0]), t.param(p[1]))); },
       {{3, 4}, {4, 2}}},
      {"add", [](Tape& t, auto& p) { return ad::sum_squares(ad::add(t.param(p[0]), t.param(p[1]))); },
       {{3, 4}, {3, 4}}},
      {"add_bias", [](Tape& t, auto& p) { return ad::sum_squares(ad::add_bias(t.param(p[0]), t.param(p[1]))); },
       {{3, 4}, {4}}},
      {"add_periodic",
       [](Tape& t, auto& p) { return ad::sum_squares(ad::add_periodic(t.param(p[0]), t.param(p[1]))); },
       {{6, 3}, {2, 3}}},
      {"repeat_rows", [](Tape& t, auto& p) { return ad::sum_squares(ad::repeat_rows(t.param(p[0]), 3)); },
       {{1, 4}}},
      {"scale", [](Tape& t, auto& p) { return ad::sum_squares(ad::scale(t.param(p[0]), -1.7)); }, {{2, 3}}},
      {"gelu", [](Tape& t, auto& p) { return ad::sum_squares(ad::gelu(t.param(p[0]))); }, {{3, 5}}},
      {"softmax_rows", [](Tape& t, auto& p) { return ad::sum_squares(ad::softmax_rows(t.param(p[0]))); },
       {{3, 5}}},
      {"layer_norm",
       [](Tape& t, auto& p) {
         return ad::sum_squares(ad::matmul(
             ad::layer_norm(t.param(p[0]), t.param(p[1]), t.param(p[2]), 1e-5), t.param(p[3])));
       },
       {{3, 5}, {5}, {5}, {5, 2}}},
      {"attention",
       [](Tape& t, auto& p) {
         AttentionDims dims{2, 2, 3, 4, 2, 0.7};
         return ad::sum_squares(ad::attention(t.param(p[0]), t.param(p[1]), t.param(p[2]), dims));
       },
       {{4, 4}, {6, 4}, {6, 4}}},
      {"concat_segments",
       [](Tape& t, auto& p) {
         return ad::sum_squares(ad::matmul(ad::concat_segments(t.param(p[0]), 1, t.param(p[1]), 2, 2),
                                           t.param(p[2])));
       },
       {{2, 3}, {4, 3}, {3, 2}}},
      {"slice_segments",
       [](Tape& t, auto& p) { return ad::sum_squares(ad::slice_segments(t.param(p[0]), 3, 1, 2, 2)); },
       {{6, 3}}},
      {"mean_segments",
       [](Tape& t, auto& p) {
         return ad::sum_squares(ad::matmul(ad::mean_segments(t.param(p[0]), 3, 2), t.param(p[1])));
       },
       {{6, 3}, {3, 3}}},
      {"gather_rows",
       [&ids](Tape& t, auto& p) { return ad::sum_squares(ad::gather_rows(t.param(p[0]), ids)); },
       {{4, 3}}},
      {"cross_entropy",
       [&labels](Tape& t, auto& p) { return ad::cross_entropy(t.param(p[0]), labels); }, {{3, 4}}},
      {"binary_cross_entropy",
       [&labels](Tape& t, auto& p) { return ad::binary_cross_entropy(t.param(p[0]), labels); }, {{3, 4}}},
      {"sum", [](Tape& t, auto& p) { return ad::sum(ad::gelu(t.param(p[0]))); }, {{2, 3}}},
  };
  for (auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 7919 + 1);
      std::vector<Tensor> params;
      for (const auto& s : c.shapes) {
        params.push_back(random_tensor(s, rng));
        params.back().set_requires_grad(true);
      }
      std::vector<Tensor*> ptrs;
      for (auto& p : params) ptrs.push_back(&p);
      auto report = grad_check([&](Tape& t) { return c.loss(t, params); }, ptrs, 1e-5, 1e-4);
      INFO(c.name << " seed " << seed << " worst " << report.worst);
      CHECK(report.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("backward visits every node once and respects requires_grad") {
  Rng rng(8);
  Tensor w = random_tensor({3, 3}, rng);
  Tensor frozen = random_tensor({3, 3}, rng);
  w.set_requires_grad(true);
  Tape tape;
  Var x = tape.constant(random_tensor({2, 3}, rng));
  Var y = ad::matmul(ad::matmul(x, tape.param(w)), tape.param(frozen));
  Var loss = ad::sum_squares(y);
  tape.backward(loss);
  CHECK(tape.visited_in_last_backward() <= tape.size());
  CHECK(tape.grad(tape.param(w)).size() == 9);
  CHECK(tape.grad(tape.param(frozen)).empty());
  CHECK_THROWS_AS(tape.backward(y), Error);
}
