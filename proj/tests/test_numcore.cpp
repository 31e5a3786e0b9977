#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "check_util.hpp"
#include "elmur/numcore.hpp"

using namespace elmur;
using testutil::gradcheck;
using testutil::random_tensor;

using TD = Tensor<double>;

TEST_CASE("matmul hand cases") {
  TD eye({2, 2}, {1, 0, 0, 1});
  TD a({2, 2}, {1, 2, 3, 4});
  auto c = matmul(eye, a);
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) == std::vector<double>{1, 2, 3, 4});
  auto d = matmul(TD({1, 2}, {1, 2}), TD({2, 1}, {3, 4}));
  CHECK(d.shape() == Shape{1, 1});
  CHECK(d.item() == 11);
  CHECK_THROWS_AS(matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul gradient equals ones times B transpose") {
  Rng rng(1);
  auto a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
  {
    Tape<double> tape;
    TapeScope<double> s(tape);
    tape.backward(sum(matmul(a, b)));
  }
  auto bv = b.values();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) {
      double expect = 0;
      for (int j = 0; j < 3; ++j) expect += bv[k * 3 + j];
      CHECK(a.grad()[i * 3 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  CHECK(gradcheck([&] { return sum(matmul(a, b)); }, {a, b}) < 1e-6);
}

TEST_CASE("batched matmul broadcasts and differentiates") {
  Rng rng(2);
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 5}, rng), c = random_tensor({2, 1, 5, 2}, rng);
  CHECK(gradcheck([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b}) < 1e-6);
  CHECK(gradcheck([&] { return sum(matmul(matmul(a, b), c)); }, {a, b, c}) < 1e-6);
  CHECK(matmul(matmul(a, b), c).shape() == Shape{2, 2, 3, 2});
}

TEST_CASE("masked softmax") {
  auto p = softmax(TD({2}, {0, 0}));
  CHECK(p.values()[0] == doctest::Approx(0.5));
  Mask m{{2}, {1, 0}};
  auto q = masked_softmax(TD({2}, {5, 7}), m);
  CHECK(q.values()[0] == 1.0);
  CHECK(q.values()[1] == 0.0);
  auto r = softmax(TD({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  CHECK(r.values()[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(r.values()[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
  CHECK(r.values()[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));
  CHECK_THROWS(masked_softmax(TD({2}, {1, 2}), Mask{{2}, {0, 0}}));
}

TEST_CASE("masked softmax rows sum to one and respect a broadcast mask") {
  Rng rng(3);
  auto x = random_tensor({2, 4, 4}, rng);
  auto y = masked_softmax(x, Mask::causal(4));
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 4; ++i) {
      double s = 0;
      for (int j = 0; j < 4; ++j) {
        double v = y.values()[(b * 4 + i) * 4 + j];
        if (j > i) CHECK(v == 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1) < 1e-6);
    }
  auto w = random_tensor({2, 4, 4}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(masked_softmax(x, Mask::causal(4)), w)); }, {x}) < 1e-4);
}

TEST_CASE("layer norm") {
  auto g = TD::full({4}, 1.0), b = TD::zeros({4});
  auto y = layer_norm(TD({1, 4}, {1, 1, 1, 1}), g, b);
  for (double v : y.values()) CHECK(v == 0.0);
  auto z = layer_norm(TD({1, 2}, {0, 2}), TD::full({2}, 1.0), TD::zeros({2}));
  CHECK(z.values()[0] == doctest::Approx(-1).epsilon(1e-4));
  CHECK(z.values()[1] == doctest::Approx(1).epsilon(1e-4));

  Rng rng(4);
  auto x = random_tensor({5, 8}, rng, true, 3.0);
  auto n = layer_norm(x, TD::full({8}, 1.0), TD::zeros({8}));
  for (int r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (int i = 0; i < 8; ++i) m += n.values()[r * 8 + i];
    m /= 8;
    for (int i = 0; i < 8; ++i) v += std::pow(n.values()[r * 8 + i] - m, 2);
    v /= 8;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1) < 1e-5);
  }
  auto gain = random_tensor({8}, rng), bias = random_tensor({8}, rng), w = random_tensor({5, 8}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(layer_norm(x, gain, bias), w)); }, {x, gain, bias}) < 1e-4);
}

TEST_CASE("backward contract") {
  TD x = TD::scalar(3.0, true);
  Tape<double> tape;
  {
    TapeScope<double> s(tape);
    auto y = mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == 6.0);
    CHECK_THROWS_AS(tape.backward(y), std::logic_error);
  }
  Tape<double> t2;
  TapeScope<double> s2(t2);
  TD c = TD::scalar(2.0);
  auto z = mul(x, c);
  CHECK_THROWS_AS(t2.backward(add(z, z) * TD({2}, {1, 1})), ShapeError);
  t2.backward(z);
  CHECK_FALSE(c.has_grad());
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(5);
  auto logits = random_tensor({3, 5}, rng);
  TD onehot({3, 5}, {0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1});
  CHECK(gradcheck([&] { return neg(sum(mul(log_softmax(logits), onehot))); }, {logits}) < 1e-5);
}

TEST_CASE("elementwise, shape and reduction ops differentiate") {
  Rng rng(6);
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({3, 1}, rng), w = random_tensor({4, 3, 2}, rng, false);
  auto pos = random_tensor({2, 3, 4}, rng);
  for (double& v : pos.data()) v = std::abs(v) + 0.5;
  CHECK(gradcheck([&] { return sum(add(a, b)); }, {a, b}) < 1e-4);
  CHECK(gradcheck([&] { return mean(mul(sub(a, b), a)); }, {a, b}) < 1e-4);
  CHECK(gradcheck([&] { return sum(div(a, pos)); }, {a, pos}) < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(permute(a, {2, 1, 0}), w)); }, {a}) < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(reshape(transpose(a, 0, 2), {4, 3, 2}), w)); }, {a}) < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(sum_last(a), sum_last(a))); }, {a}) < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(gelu(a), a)); }, {a}) < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(scale(neg(a), 0.3), a)); }, {a}) < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(concat<double>({a, pos}, 1), concat<double>({pos, a}, 1))); }, {a, pos}) < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(slice(a, 2, 1, 2), slice(a, 2, 2, 2))); }, {a}) < 1e-4);
  auto r = relu(TD({3}, {-1, 0.5, 2}));
  CHECK(r.values()[0] == 0.0);
  CHECK(r.values()[2] == 2.0);
}

TEST_CASE("gather, scatter, take_last and topk") {
  Rng rng(7);
  auto table = random_tensor({5, 3}, rng);
  std::vector<int> idx{4, 0, 4, 2};
  auto g = gather_rows(table, idx, {2, 2});
  CHECK(g.shape() == Shape{2, 2, 3});
  CHECK(g.values()[3] == table.values()[0]);
  auto w = random_tensor({2, 2, 3}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(gather_rows(table, idx, {2, 2}), w)); }, {table}) < 1e-4);

  auto src = random_tensor({4, 3}, rng);
  auto s = scatter_add_rows(src, idx, 5);
  CHECK(s.values()[4 * 3] == doctest::Approx(src.values()[0] + src.values()[6]));
  CHECK(s.values()[3] == 0.0);
  auto w5 = random_tensor({5, 3}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(scatter_add_rows(src, idx, 5), w5)); }, {src}) < 1e-4);

  TD x({2, 4}, {1, 3, 3, 0, 5, -1, 2, 7});
  auto tk = topk(x, 2);
  CHECK(tk.indices == std::vector<int>{1, 2, 3, 0});
  CHECK(tk.values.values()[3] == 5.0);
  auto tl = take_last(x, tk.indices, 2);
  CHECK(tl.values()[2] == 7.0);
  auto y = random_tensor({2, 4}, rng);
  auto w2 = random_tensor({2, 2}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(take_last(y, std::vector<int>{0, 3, 1, 1}, 2), w2)); }, {y}) < 1e-4);
}

TEST_CASE("dropout is inverted, seeded and identity at p = 0") {
  auto x = TD::full({1000}, 1.0);
  Rng r1(9), r2(9);
  auto a = dropout(x, 0.5, r1), b = dropout(x, 0.5, r2);
  int kept = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(a.values()[i] == b.values()[i]);
    CHECK((a.values()[i] == 0.0 || a.values()[i] == 2.0));
    kept += a.values()[i] > 0;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
  Rng r3(1);
  auto c = dropout(x, 0.0, r3);
  CHECK(c.values()[5] == 1.0);
}

TEST_CASE("non-finite results raise") {
  TD x({1}, {1e308});
  CHECK_THROWS_AS(mul(x, x), NumericError);
  TD z({1}, {0.0});
  CHECK_THROWS_AS(div(TD({1}, {1.0}), z), NumericError);
}

TEST_CASE("same inputs give bit-identical outputs") {
  Rng r1(11), r2(11);
  auto a = random_tensor({4, 6}, r1), b = random_tensor({4, 6}, r2);
  auto f = [](const TD& t) { return softmax(matmul(gelu(t), transpose(t, 0, 1))); };
  auto x = f(a), y = f(b);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.values()[i] == y.values()[i]);
}

TEST_CASE("float precision runs the same ops") {
  Tensor<float> a({2, 2}, {1, 2, 3, 4}, true);
  Tape<float> tape;
  TapeScope<float> s(tape);
  auto l = sum(layer_norm(matmul(a, a), Tensor<float>::full({2}, 1.f), Tensor<float>::zeros({2})));
  tape.backward(l);
  CHECK(a.has_grad());
}
