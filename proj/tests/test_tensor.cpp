#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "axinv/tensor.hpp"
#include "testutil.hpp"

using namespace axinv;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

TEST_CASE("matmul identity and hand product") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_values({2, 2}, {3, 4, 5, 6});
  Tensor r = matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(r.at(i) == doctest::Approx(m.at(i)));

  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_values({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.at(0) == doctest::Approx(19));
  CHECK(c.at(1) == doctest::Approx(22));
  CHECK(c.at(2) == doctest::Approx(43));
  CHECK(c.at(3) == doctest::Approx(50));
}

TEST_CASE("matmul shape mismatch") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  double err = max_grad_rel_err(
      [](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); },
      {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("gelu values and derivative at zero") {
  Tensor x = Tensor::from_values({3}, {0.0, 10.0, -10.0});
  Tensor y = gelu(x);
  CHECK(y.at(0) == doctest::Approx(0.0));
  CHECK(y.at(1) == doctest::Approx(10.0).epsilon(1e-7));
  CHECK(std::abs(y.at(2)) < 1e-6);

  Tensor z = Tensor::from_values({1}, {0.0}, true);
  Tape tape;
  Tensor loss = sum(gelu(z));
  tape.backward(loss);
  CHECK(z.grad()[0] == doctest::Approx(0.5));
}

TEST_CASE("softmax hand values and normalization") {
  Tensor x = Tensor::from_values({2}, {0.0, 0.0});
  Tensor y = softmax(x, 0);
  CHECK(y.at(0) == doctest::Approx(0.5));
  CHECK(y.at(1) == doctest::Approx(0.5));

  Tensor x2 = Tensor::from_values({2}, {std::log(2.0), 0.0});
  Tensor y2 = softmax(x2, 0);
  CHECK(y2.at(0) == doctest::Approx(2.0 / 3.0));
  CHECK(y2.at(1) == doctest::Approx(1.0 / 3.0));

  Rng rng(3);
  Tensor r = random_tensor({4, 7, 3}, rng, false, 2.0);
  Tensor s = softmax(r, 1);
  for (int64_t o = 0; o < 4; ++o) {
    for (int64_t j = 0; j < 3; ++j) {
      double total = 0.0;
      for (int64_t i = 0; i < 7; ++i) total += s.at((o * 7 + i) * 3 + j);
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("conv identity and hand correlation") {
  // 1x1 kernel of value 1, stride 1 is the identity
  Tensor x = Tensor::from_values({1, 2, 2}, {1, 2, 3, 4});
  Tensor k = Tensor::from_values({1, 1, 1, 1}, {1.0});
  Tensor y = conv(x, k, 2, 1, 0);
  CHECK(y.shape() == Shape{1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)));

  // 1D [1,2,3] * [1,1] valid -> [3,5]
  Tensor x1 = Tensor::from_values({1, 3}, {1, 2, 3});
  Tensor k1 = Tensor::from_values({1, 1, 2}, {1, 1});
  Tensor y1 = conv(x1, k1, 1, 1, 0);
  CHECK(y1.shape() == Shape{1, 2});
  CHECK(y1.at(0) == doctest::Approx(3));
  CHECK(y1.at(1) == doctest::Approx(5));
}

TEST_CASE("conv rejects oversized kernels") {
  Tensor x = Tensor::zeros({1, 3});
  Tensor k = Tensor::zeros({1, 1, 5});
  CHECK_THROWS_AS(conv(x, k, 1, 1, 0), ShapeError);
}

TEST_CASE("conv gradient vs finite differences") {
  Rng rng(5);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  double err = max_grad_rel_err(
      [](const std::vector<Tensor>& in) {
        return mse(conv(in[0], in[1], 2, 2, 1), Tensor::zeros({2, 3, 3, 3}));
      },
      {x, k});
  CHECK(err < 1e-5);

  Tensor x1 = random_tensor({2, 3, 9}, rng);
  Tensor k1 = random_tensor({4, 3, 3}, rng);
  double err1 = max_grad_rel_err(
      [](const std::vector<Tensor>& in) {
        return sum(gelu(conv(in[0], in[1], 1, 1, 0)));
      },
      {x1, k1});
  CHECK(err1 < 1e-5);
}

TEST_CASE("layernorm hand values") {
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias = Tensor::zeros({3});

  Tensor c = Tensor::full({2, 3}, 4.2);
  Tensor yc = layernorm(c, 1, gain, bias);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(yc.at(i)) < 1e-9);

  Tensor x = Tensor::from_values({1, 3}, {1, 2, 3});
  Tensor y = layernorm(x, 1, gain, bias);
  CHECK(y.at(0) == doctest::Approx(-1.2247).epsilon(1e-3));
  CHECK(y.at(1) == doctest::Approx(0.0));
  CHECK(y.at(2) == doctest::Approx(1.2247).epsilon(1e-3));
}

TEST_CASE("layernorm slice statistics on random input") {
  Rng rng(17);
  Tensor gain = Tensor::full({8}, 1.0);
  Tensor bias = Tensor::zeros({8});
  Tensor x = random_tensor({5, 8}, rng, false, 3.0);
  Tensor y = layernorm(x, 1, gain, bias);
  for (int64_t r = 0; r < 5; ++r) {
    double m = 0.0, v = 0.0;
    for (int64_t i = 0; i < 8; ++i) m += y.at(r * 8 + i);
    m /= 8;
    for (int64_t i = 0; i < 8; ++i) {
      double d = y.at(r * 8 + i) - m;
      v += d * d;
    }
    v /= 8;
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("layernorm gradient vs finite differences") {
  Rng rng(23);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor g = random_tensor({6}, rng);
  Tensor b = random_tensor({6}, rng);
  double err = max_grad_rel_err(
      [](const std::vector<Tensor>& in) {
        return mse(layernorm(in[0], 1, in[1], in[2]),
                   Tensor::full({4, 6}, 0.3));
      },
      {x, g, b});
  CHECK(err < 1e-4);
}

TEST_CASE("dropout contract") {
  Rng rng(7);
  Tensor x = random_tensor({40}, rng, false);

  Rng d1(1);
  Tensor ye = dropout(x, 0.7, Mode::kEval, d1);
  CHECK(ye.storage_id() == x.storage_id());

  Tensor y0 = dropout(x, 0.0, Mode::kTrain, d1);
  CHECK(y0.storage_id() == x.storage_id());

  Rng d2(99);
  Tensor ones = Tensor::full({10000}, 1.0);
  Tensor yd = dropout(ones, 0.5, Mode::kTrain, d2);
  double m = 0.0;
  for (double v : yd.values()) m += v;
  m /= yd.numel();
  CHECK(std::abs(m - 1.0) < 0.05);

  CHECK_THROWS_AS(dropout(x, 1.0, Mode::kTrain, d2), ValueError);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::kTrain, d2), ValueError);
}

TEST_CASE("mse values and gradient") {
  Tensor a = Tensor::from_values({2}, {0, 0});
  Tensor b = Tensor::from_values({2}, {1, 1});
  CHECK(mse(a, a).item() == doctest::Approx(0.0));
  CHECK(mse(a, b).item() == doctest::Approx(1.0));

  Rng rng(31);
  Tensor p = random_tensor({3, 3}, rng);
  Tensor t = random_tensor({3, 3}, rng, false);
  double err = max_grad_rel_err(
      [&](const std::vector<Tensor>& in) { return mse(in[0], t); }, {p});
  CHECK(err < 1e-6);
}

TEST_CASE("mse shape mismatch") {
  CHECK_THROWS_AS(mse(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("backward fills expected grads") {
  Tensor x = Tensor::from_values({3}, {5, -1, 2}, true);
  {
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
  }
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

  Tensor x2 = Tensor::from_values({2}, {1, 2}, true);
  {
    Tape tape;
    Tensor loss = sum(mul(x2, x2));
    tape.backward(loss);
  }
  CHECK(x2.grad()[0] == doctest::Approx(2.0));
  CHECK(x2.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("grad accumulates across branches") {
  Tensor x = Tensor::from_values({2}, {3, 4}, true);
  Tape tape;
  Tensor branch_a = scale(x, 2.0);
  Tensor branch_b = mul(x, x);
  Tensor loss = sum(add(branch_a, branch_b));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0 + 2.0 * 3.0));
  CHECK(x.grad()[1] == doctest::Approx(2.0 + 2.0 * 4.0));
}

TEST_CASE("backward rejects non-scalar and foreign losses") {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  Tape tape;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
  Tensor leaf = Tensor::scalar(1.0, true);
  CHECK_THROWS_AS(tape.backward(leaf), ValueError);
}

TEST_CASE("shape ops round out the algebra") {
  Rng rng(41);
  Tensor x = random_tensor({2, 3, 4}, rng);

  Tensor r = reshape(x, {6, 4});
  CHECK(r.shape() == Shape{6, 4});
  CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);

  Tensor p = permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  CHECK(p.at(0) == doctest::Approx(x.at(0)));
  // element (i,j,k) of x lands at (k,i,j)
  CHECK(p.at((3 * 2 + 1) * 3 + 2) == doctest::Approx(x.at((1 * 3 + 2) * 4 + 3)));

  Tensor b = broadcast_to(Tensor::from_values({1, 3}, {1, 2, 3}), {4, 3});
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(b.at(i * 3 + 2) == doctest::Approx(3.0));
  }
  CHECK_THROWS_AS(broadcast_to(Tensor::zeros({2, 3}), Shape{4, 3}), ShapeError);

  Tensor s = slice(x, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2, 4});
  CHECK(s.at(0) == doctest::Approx(x.at(4)));

  Tensor c = concat({s, s}, 1);
  CHECK(c.shape() == Shape{2, 4, 4});
}

TEST_CASE("shape op gradients vs finite differences") {
  Rng rng(43);
  Tensor x = random_tensor({2, 3, 4}, rng);
  double err = max_grad_rel_err(
      [](const std::vector<Tensor>& in) {
        Tensor p = permute(in[0], {1, 0, 2});
        Tensor s = slice(p, 2, 1, 3);
        Tensor c = concat({s, s}, 0);
        Tensor b = broadcast_to(reshape(mean(c, 2), {6, 2, 1}), {6, 2, 5});
        return mse(b, Tensor::full({6, 2, 5}, 0.25));
      },
      {x});
  CHECK(err < 1e-6);
}

TEST_CASE("bmm matches per-slice matmul and differentiates") {
  Rng rng(47);
  Tensor a = random_tensor({3, 2, 4}, rng);
  Tensor b = random_tensor({3, 4, 5}, rng);
  Tensor c = bmm(a, b);
  CHECK(c.shape() == Shape{3, 2, 5});
  for (int64_t i = 0; i < 3; ++i) {
    Tensor ai = reshape(slice(a, 0, i, 1), {2, 4});
    Tensor bi = reshape(slice(b, 0, i, 1), {4, 5});
    Tensor ci = matmul(ai, bi);
    for (int64_t e = 0; e < 10; ++e) {
      CHECK(c.at(i * 10 + e) == doctest::Approx(ci.at(e)));
    }
  }
  double err = max_grad_rel_err(
      [](const std::vector<Tensor>& in) { return sum(bmm(in[0], in[1])); },
      {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("per-op gradient sweep across seeds") {
  // Randomized finite-difference pass over every differentiable op.
  double worst = 0.0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    worst = std::max(worst, max_grad_rel_err(
        [](const std::vector<Tensor>& in) {
          return sum(matmul(in[0], in[1]));
        }, {a, b}));

    Tensor x = random_tensor({3, 6}, rng);
    worst = std::max(worst, max_grad_rel_err(
        [](const std::vector<Tensor>& in) { return sum(gelu(in[0])); }, {x}));

    worst = std::max(worst, max_grad_rel_err(
        [](const std::vector<Tensor>& in) {
          return mse(softmax(in[0], 1), Tensor::full({3, 6}, 0.2));
        }, {x}));

    Tensor g = random_tensor({6}, rng);
    Tensor bb = random_tensor({6}, rng);
    worst = std::max(worst, max_grad_rel_err(
        [](const std::vector<Tensor>& in) {
          return mse(layernorm(in[0], 1, in[1], in[2]),
                     Tensor::full({3, 6}, 0.1));
        }, {x, g, bb}));

    Tensor cx = random_tensor({2, 6}, rng);
    Tensor ck = random_tensor({2, 2, 3}, rng);
    worst = std::max(worst, max_grad_rel_err(
        [](const std::vector<Tensor>& in) {
          return sum(conv(in[0], in[1], 1, 1, 1));
        }, {cx, ck}));

    uint64_t mask_seed = seed * 31 + 7;
    worst = std::max(worst, max_grad_rel_err(
        [mask_seed](const std::vector<Tensor>& in) {
          Rng mask_rng(mask_seed);
          return sum(dropout(in[0], 0.4, Mode::kTrain, mask_rng));
        }, {x}));

    Tensor t = random_tensor({3, 6}, rng, false);
    worst = std::max(worst, max_grad_rel_err(
        [&t](const std::vector<Tensor>& in) { return mse(in[0], t); }, {x}));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("forward ops keep finite inputs finite") {
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 6}, rng, false, 50.0);
    CHECK(softmax(x, 1).all_finite());
    CHECK(gelu(x).all_finite());
    CHECK(layernorm(x, 1, Tensor::full({6}, 1.0), Tensor::zeros({6})).all_finite());
    CHECK(mse(x, scale(x, -1.0)).all_finite());
  }
}
