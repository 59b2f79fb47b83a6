#include <cmath>
#include <random>

#include "abnet/gradcheck.hpp"
#include "abnet/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace abnet;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return Tensor::from(std::move(shape), oracle::random_vec((std::size_t)n, rng, lo, hi));
}

}  // namespace

TEST_CASE("conv2d matches hand values and shapes") {
  Tensor in = Tensor::full({1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tensor out = conv2d(in, k, b, 0, nullptr);
  CHECK(out.shape() == std::vector<int>{1, 1, 1});
  CHECK(out.scalar() == doctest::Approx(9.0).epsilon(1e-15));

  std::mt19937_64 rng(7);
  Tensor big_in = random_tensor({3, 84, 84}, rng);
  Tensor big_k = random_tensor({64, 3, 3, 3}, rng);
  Tensor big_b = random_tensor({64}, rng);
  Tensor big_out = conv2d(big_in, big_k, big_b, 0, nullptr);
  CHECK(big_out.shape() == std::vector<int>{64, 82, 82});
}

TEST_CASE("conv2d equals the nested-loop oracle") {
  std::mt19937_64 rng(11);
  Tensor in = random_tensor({2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor out = conv2d(in, k, b, 1, nullptr);
  oracle::Chw ref_in{2, 5, 5, in.values()};
  oracle::Chw ref = oracle::conv2d_ref(ref_in, k.values(), 3, b.values(), 1);
  CHECK(oracle::max_rel_diff(out.values(), ref.v) <= 1e-12);
}

TEST_CASE("conv2d rejects mismatched shapes") {
  Tensor in = Tensor::zeros({3, 5, 5});
  Tensor k = Tensor::zeros({4, 2, 3, 3});
  Tensor b = Tensor::zeros({4});
  CHECK_THROWS_AS(conv2d(in, k, b, 0, nullptr), std::invalid_argument);
  Tensor small = Tensor::zeros({3, 2, 2});
  Tensor k2 = Tensor::zeros({4, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(small, k2, b, 0, nullptr), std::invalid_argument);
}

TEST_CASE("conv/pool/dense match brute-force oracles over small shapes") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 60; ++trial) {
    std::uniform_int_distribution<int> cd(1, 8), hd(3, 8), od(1, 8), pd(0, 1);
    const int c = cd(rng), h = hd(rng), w = hd(rng), co = od(rng), pad = pd(rng);
    Tensor in = random_tensor({c, h, w}, rng);
    Tensor k = random_tensor({co, c, 3, 3}, rng);
    Tensor b = random_tensor({co}, rng);
    Tensor out = conv2d(in, k, b, pad, nullptr);
    oracle::Chw ref = oracle::conv2d_ref({c, h, w, in.values()}, k.values(), co, b.values(), pad);
    REQUIRE(oracle::max_rel_diff(out.values(), ref.v) <= 1e-12);

    Tensor pooled = maxpool2d(in, nullptr);
    oracle::Chw pref = oracle::maxpool_ref({c, h, w, in.values()});
    REQUIRE(oracle::max_rel_diff(pooled.values(), pref.v) <= 1e-12);

    const int di = cd(rng), dout = od(rng);
    Tensor x = random_tensor({di}, rng);
    Tensor wgt = random_tensor({dout, di}, rng);
    Tensor bias = random_tensor({dout}, rng);
    Tensor y = dense(x, wgt, bias, nullptr);
    auto yref = oracle::dense_ref(x.values(), wgt.values(), dout, bias.values());
    REQUIRE(oracle::max_rel_diff(y.values(), yref) <= 1e-12);
  }
}

TEST_CASE("batchnorm normalizes per channel") {
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  BatchNormState st;
  st.init(2);

  Tensor constant = Tensor::from({2, 2, 2}, {3, 3, 3, 3, -1, -1, -1, -1});
  Tensor out = batchnorm(constant, gamma, beta, st, true, nullptr);
  for (double v : out.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  std::mt19937_64 rng(5);
  Tensor in = random_tensor({4, 3, 3}, rng, -10.0, 10.0);
  BatchNormState st4;
  st4.init(4);
  Tensor g4 = Tensor::full({4}, 1.0), b4 = Tensor::zeros({4});
  Tensor norm = batchnorm(in, g4, b4, st4, true, nullptr);
  for (int c = 0; c < 4; ++c) {
    double mu = 0.0, var = 0.0;
    for (int i = 0; i < 9; ++i) mu += norm.values()[c * 9 + i];
    mu /= 9;
    for (int i = 0; i < 9; ++i) {
      const double d = norm.values()[c * 9 + i] - mu;
      var += d * d;
    }
    var /= 9;
    CHECK(std::abs(mu) < 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }

  Tensor zero_gamma = Tensor::zeros({4});
  Tensor some_beta = Tensor::from({4}, {1, 2, 3, 4});
  Tensor betas = batchnorm(in, zero_gamma, some_beta, st4, true, nullptr);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 9; ++i) CHECK(betas.values()[c * 9 + i] == doctest::Approx(c + 1.0));
}

TEST_CASE("batchnorm eval mode uses running stats and never divides by zero") {
  BatchNormState st;
  st.init(1);
  Tensor g = Tensor::full({1}, 1.0), b = Tensor::zeros({1});
  Tensor flat = Tensor::full({1, 2, 2}, 5.0);  // zero variance channel
  Tensor out = batchnorm(flat, g, b, st, true, nullptr);
  for (double v : out.values()) CHECK(std::isfinite(v));
  Tensor ev = batchnorm(flat, g, b, st, false, nullptr);
  for (double v : ev.values()) CHECK(std::isfinite(v));
}

TEST_CASE("activations") {
  Tensor x = Tensor::from({3}, {-1, 0, 2});
  Tensor r = relu(x, nullptr);
  CHECK(r.values() == std::vector<double>{0, 0, 2});
  Tensor s = sigmoid(Tensor::zeros({1}), nullptr);
  CHECK(s.scalar() == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("sigmoid gradient matches finite differences") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({5}, rng, -2.0, 2.0);
  x.set_requires_grad(true);
  auto f = [&](Tape* t) { return sq_diff_sum(sigmoid(x, t), Tensor::zeros({5}), t); };
  auto res = finite_diff_check(f, {{"x", x}}, 1e-5);
  CHECK(res.max_rel_error <= 1e-6);
}

TEST_CASE("maxpool2d") {
  Tensor t = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  Tensor p = maxpool2d(t, nullptr);
  CHECK(p.shape() == std::vector<int>{1, 1, 1});
  CHECK(p.scalar() == 4.0);

  Tensor odd = Tensor::zeros({64, 39, 39});
  CHECK(maxpool2d(odd, nullptr).shape() == std::vector<int>{64, 19, 19});

  CHECK_THROWS_AS(maxpool2d(Tensor::zeros({1, 1, 4}), nullptr), std::invalid_argument);

  std::mt19937_64 rng(17);
  Tensor r = random_tensor({1, 6, 6}, rng);
  Tensor pr = maxpool2d(r, nullptr);
  oracle::Chw ref = oracle::maxpool_ref({1, 6, 6, r.values()});
  CHECK(oracle::max_rel_diff(pr.values(), ref.v) == 0.0);
}

TEST_CASE("dense identity and bias cases") {
  Tensor x = Tensor::from({3}, {1, -2, 5});
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor zb = Tensor::zeros({3});
  CHECK(dense(x, eye, zb, nullptr).values() == x.values());

  Tensor zw = Tensor::zeros({2, 3});
  Tensor bias = Tensor::from({2}, {7, -4});
  CHECK(dense(x, zw, bias, nullptr).values() == bias.values());

  CHECK_THROWS_AS(dense(x, Tensor::zeros({2, 4}), bias, nullptr), std::invalid_argument);
}

TEST_CASE("concat_channels") {
  std::mt19937_64 rng(23);
  Tensor a = random_tensor({64, 19, 19}, rng);
  Tensor b = random_tensor({64, 19, 19}, rng);
  Tensor cat = concat_channels({a, b}, nullptr);
  CHECK(cat.shape() == std::vector<int>{128, 19, 19});
  CHECK(cat.values()[0] == a.values()[0]);
  CHECK(cat.values()[64 * 19 * 19] == b.values()[0]);

  Tensor solo = concat_channels({a}, nullptr);
  CHECK(solo.values() == a.values());

  Tensor c = Tensor::zeros({2, 5, 4});
  CHECK_THROWS_AS(concat_channels({a, c}, nullptr), std::invalid_argument);
}

TEST_CASE("gradient of sum(concat(a,b)) w.r.t. a is all ones") {
  std::mt19937_64 rng(29);
  Tensor a = random_tensor({2, 3, 3}, rng);
  Tensor b = random_tensor({1, 3, 3}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  Tensor loss = reduce_sum(concat_channels({a, b}, &tape), &tape);
  tape.backward(loss);
  for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a.grad()[i] == 1.0);
  for (std::int64_t i = 0; i < b.size(); ++i) CHECK(b.grad()[i] == 1.0);
}

TEST_CASE("global_avg_pool") {
  Tensor t = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(t, nullptr).scalar() == doctest::Approx(2.5));
  Tensor c = Tensor::full({3, 4, 4}, -2.5);
  Tensor cp = global_avg_pool(c, nullptr);
  for (double v : cp.values()) CHECK(v == doctest::Approx(-2.5));

  std::mt19937_64 rng(31);
  Tensor r = random_tensor({2, 3, 5}, rng);
  Tensor g = global_avg_pool(r, nullptr);
  for (int ch = 0; ch < 2; ++ch) {
    double mu = 0.0;
    for (int i = 0; i < 15; ++i) mu += r.values()[ch * 15 + i];
    CHECK(g.values()[ch] == doctest::Approx(mu / 15).epsilon(1e-14));
  }
}

TEST_CASE("backward computes grad of sum of squares") {
  Tensor x = Tensor::from({4}, {1, -2, 0.5, 3});
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss = sq_diff_sum(x, Tensor::zeros({4}), &tape);
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.values()[i]));
}

TEST_CASE("backward leaves grad zero for unused leaves") {
  Tensor x = Tensor::from({2}, {1, 2});
  Tensor y = Tensor::from({2}, {3, 4});
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  Tape tape;
  Tensor loss = sq_diff_sum(y, Tensor::zeros({2}), &tape);
  tape.backward(loss);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from({2}, {1, 2});
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = relu(x, &tape);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("two backward passes without clearing give exactly twice the gradient") {
  std::mt19937_64 rng(37);
  Tensor x = random_tensor({6}, rng);
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss = sq_diff_sum(sigmoid(x, &tape), Tensor::full({6}, 0.25), &tape);
  tape.backward(loss);
  std::vector<double> once(x.grad(), x.grad() + x.size());
  tape.backward(loss);
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-15));
}

TEST_CASE("tape order is topological and backward visits each op once") {
  std::mt19937_64 rng(41);
  Tensor x = random_tensor({2, 4, 4}, rng);
  Tensor k = random_tensor({2, 2, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  Tensor h = relu(conv2d(x, k, b, 1, &tape), &tape);
  Tensor loss = sq_diff_sum(maxpool2d(h, &tape), Tensor::zeros({2, 2, 2}), &tape);
  for (const auto& op : tape.ops())
    for (int in_id : op.input_ids) CHECK(in_id < op.output_id);
  tape.backward(loss);
  CHECK(tape.last_backward_op_count() == tape.ops().size());
}

TEST_CASE("finite_diff_check basics") {
  Tensor x = Tensor::from({1}, {3.0});
  x.set_requires_grad(true);
  auto square = [&](Tape* t) { return sq_diff_sum(x, Tensor::zeros({1}), t); };
  auto res = finite_diff_check(square, {{"x", x}}, 1e-4);
  CHECK(res.max_rel_error <= 1e-8);

  // a corrupted backward rule must be detected
  set_gradient_fault("sigmoid");
  Tensor y = Tensor::from({3}, {0.3, -0.2, 0.9});
  y.set_requires_grad(true);
  auto f = [&](Tape* t) { return sq_diff_sum(sigmoid(y, t), Tensor::zeros({3}), t); };
  auto bad = finite_diff_check(f, {{"y", y}}, 1e-5);
  clear_gradient_fault();
  CHECK(bad.max_rel_error >= 0.3);
  auto good = finite_diff_check(f, {{"y", y}}, 1e-5);
  CHECK(good.max_rel_error <= 1e-6);
}

TEST_CASE("finite_diff_check on a conv+relu+maxpool chain") {
  std::mt19937_64 rng(43);
  Tensor x = random_tensor({2, 6, 6}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng, 0.05, 0.4);  // keep outputs away from relu kinks
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  b.set_requires_grad(true);
  Tensor target = random_tensor({3, 2, 2}, rng);
  auto f = [&](Tape* t) {
    Tensor h = maxpool2d(relu(conv2d(x, k, b, 0, t), t), t);
    return sq_diff_sum(h, target, t);
  };
  auto res = finite_diff_check(f, {{"x", x}, {"k", k}, {"b", b}}, 1e-5);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  std::mt19937_64 rng(47);
  // batchnorm (train mode)
  {
    Tensor x = random_tensor({3, 4, 4}, rng);
    Tensor g = random_tensor({3}, rng, 0.5, 1.5);
    Tensor be = random_tensor({3}, rng);
    x.set_requires_grad(true);
    g.set_requires_grad(true);
    be.set_requires_grad(true);
    Tensor target = random_tensor({3, 4, 4}, rng);
    auto f = [&](Tape* t) {
      BatchNormState st;
      st.init(3);
      return sq_diff_sum(batchnorm(x, g, be, st, true, t), target, t);
    };
    auto res = finite_diff_check(f, {{"x", x}, {"gamma", g}, {"beta", be}}, 1e-5);
    CHECK(res.max_rel_error <= 1e-4);
  }
  // dense + sigmoid + mean_abs + mul_scalar + add + scale + gap + concat_flat
  {
    Tensor x = random_tensor({5}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor gate = random_tensor({1}, rng, 0.2, 0.8);
    Tensor fm = random_tensor({2, 3, 3}, rng);
    for (Tensor* t : {&x, &w, &b, &gate, &fm}) t->set_requires_grad(true);
    auto f = [&](Tape* t) {
      Tensor v = sigmoid(dense(x, w, b, t), t);
      Tensor pooled = global_avg_pool(mul_scalar(gate, fm, t), t);
      Tensor joined = concat_flat({v, pooled, scale(add(v, v, t), 0.5, t)}, t);
      Tensor m = mean_abs(joined, t);
      return weighted_sum3(m, mse_vs_targets(v, {0.1, 0.9, 0.4, 0.6}, t), reduce_sum(pooled, t),
                           0.3, 0.2, t);
    };
    auto res = finite_diff_check(
        f, {{"x", x}, {"w", w}, {"b", b}, {"gate", gate}, {"fm", fm}}, 1e-5);
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("adam") {
  // zero gradient leaves parameters unchanged
  Tensor p = Tensor::from({3}, {1, 2, 3});
  p.set_requires_grad(true);
  Adam opt;
  opt.add_group({p}, 0.1);
  opt.step();
  CHECK(p.values() == std::vector<double>{1, 2, 3});

  // constant gradient: first-step magnitude is about lr per coordinate
  Tensor q = Tensor::zeros({2});
  q.set_requires_grad(true);
  q.grad()[0] = 0.7;
  q.grad()[1] = -123.0;
  Adam opt2;
  opt2.add_group({q}, 0.05);
  opt2.step();
  CHECK(q.values()[0] == doctest::Approx(-0.05).epsilon(1e-4));
  CHECK(q.values()[1] == doctest::Approx(0.05).epsilon(1e-4));

  // ten steps on f(x)=x^2 from x=1 strictly shrink |x|
  Tensor x = Tensor::from({1}, {1.0});
  x.set_requires_grad(true);
  Adam opt3;
  opt3.add_group({x}, 0.1);
  double prev = 1.0;
  for (int i = 0; i < 10; ++i) {
    opt3.zero_grad();
    Tape tape;
    Tensor loss = sq_diff_sum(x, Tensor::zeros({1}), &tape);
    tape.backward(loss);
    opt3.step();
    CHECK(std::abs(x.scalar()) < prev);
    prev = std::abs(x.scalar());
  }
}

TEST_CASE("forward passes are deterministic") {
  std::mt19937_64 rng(53);
  Tensor in = random_tensor({4, 7, 7}, rng);
  Tensor k = random_tensor({4, 4, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor a = conv2d(in, k, b, 1, nullptr);
  Tensor c = conv2d(in, k, b, 1, nullptr);
  CHECK(a.values() == c.values());
}
