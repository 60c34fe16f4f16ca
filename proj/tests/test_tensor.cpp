#include "catch_amalgamated.hpp"
#include "dmamba/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/test_util.hpp"

using namespace dmamba;
using testsupport::gradcheck;
using testsupport::loss_weights;
using testsupport::rand_tensor;
using testsupport::weighted_loss;

TEST_CASE("elementwise arithmetic on vectors") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  Tensor s = add(a, b);
  CHECK(s.at({0}) == 4.0);
  CHECK(s.at({1}) == 6.0);

  Tensor e = exp(Tensor::zeros({2}));
  CHECK(e.at({0}) == 1.0);
  CHECK(e.at({1}) == 1.0);

  CHECK(sub(a, b).at({0}) == -2.0);
  CHECK(mul(a, b).at({1}) == 8.0);
  CHECK(neg(a).at({0}) == -1.0);
  CHECK(reciprocal(Tensor::from({1}, {4.0})).at({0}) == 0.25);
}

TEST_CASE("broadcasting follows trailing-dimension alignment") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from({3}, {10, 20, 30});
  Tensor y = add(a, row);
  CHECK(y.at({0, 0}) == 11.0);
  CHECK(y.at({1, 2}) == 36.0);

  Tensor col = Tensor::from({2, 1}, {100, 200});
  Tensor z = add(a, col);
  CHECK(z.at({0, 2}) == 103.0);
  CHECK(z.at({1, 0}) == 204.0);

  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), Error);
  CHECK_THROWS_WITH(add(Tensor::zeros({2}), Tensor::zeros({3})),
                    Catch::Matchers::ContainsSubstring("[2]") &&
                        Catch::Matchers::ContainsSubstring("[3]"));
}

TEST_CASE("gradient of mul matches finite differences") {
  Tensor a = Tensor::from({1}, {2.0}, true);
  Tensor b = Tensor::from({1}, {5.0}, true);
  auto res = gradcheck({a, b}, [&] { return sum(mul(a, b)); });
  CHECK(res.max_rel_err < 1e-6);

  // analytic value: d(ab)/da = b = 5
  {
    Tape tape;
    Tensor loss = sum(mul(a, b));
    tape.backward(loss);
  }
  CHECK(a.grad()[0] == Catch::Approx(5.0).epsilon(1e-12));
  a.zero_grad();
  b.zero_grad();
}

TEST_CASE("matmul identity and hand-contracted product") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  for (int64_t i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

  Tensor v = Tensor::from({2, 1}, {5, 6});
  Tensor p = matmul(m, v);
  // hand contraction oracle
  double expect[2] = {0, 0};
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 2; ++k) expect[i] += m.at({i, k}) * v.at({k, 0});
  CHECK(p.at({0, 0}) == expect[0]);
  CHECK(p.at({1, 0}) == expect[1]);
  CHECK(p.at({0, 0}) == 17.0);
  CHECK(p.at({1, 0}) == 39.0);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
}

TEST_CASE("matmul gradients vs finite differences") {
  auto rng = substream(1, "matmul-grad");
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  Tensor w = loss_weights({3, 2});
  auto res = gradcheck({a, b}, [&] { return weighted_loss(matmul(a, b), w); });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("batched matmul broadcasts leading dims") {
  auto rng = substream(2, "matmul-batch");
  Tensor a = rand_tensor({2, 3, 4}, rng);
  Tensor b = rand_tensor({4, 5}, rng, -2, 2, false);
  Tensor y = matmul(a, b);
  REQUIRE(y.shape() == Shape{2, 3, 5});
  // against per-slice 2-D products
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t r = 0; r < 3; ++r)
      for (int64_t c = 0; c < 5; ++c) {
        double acc = 0;
        for (int64_t k = 0; k < 4; ++k) acc += a.at({i, r, k}) * b.at({k, c});
        CHECK(y.at({i, r, c}) == Catch::Approx(acc).margin(1e-12));
      }

  Tensor w = loss_weights({2, 3, 5});
  auto res = gradcheck({a}, [&] { return weighted_loss(matmul(a, b), w); });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("activation values at reference points") {
  Tensor x0 = Tensor::zeros({1});
  CHECK(softplus(x0).at({0}) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(silu(x0).at({0}) == 0.0);
  CHECK(gelu(x0).at({0}) == 0.0);
  CHECK(relu(Tensor::from({2}, {-1.0, 2.0})).at({0}) == 0.0);
  CHECK(relu(Tensor::from({2}, {-1.0, 2.0})).at({1}) == 2.0);

  // overflow-stable branch
  CHECK(softplus(Tensor::from({1}, {40.0})).at({0}) == 40.0);
  CHECK(std::isfinite(softplus(Tensor::from({1}, {-745.0})).at({0})));

  // d(silu)/dx at 0 is 0.5
  Tensor x = Tensor::zeros({1}, true);
  auto res = gradcheck({x}, [&] { return sum(silu(x)); });
  CHECK(res.max_rel_err < 1e-6);
  {
    Tape tape;
    Tensor loss = sum(silu(x));
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == Catch::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("reductions") {
  CHECK(sum(Tensor::from({3}, {1, 2, 3})).item() == 6.0);
  CHECK(mean(Tensor::zeros({4, 5})).item() == 0.0);

  Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = sum(m, {0});
  REQUIRE(s0.shape() == Shape{3});
  CHECK(s0.at({0}) == 5.0);
  Tensor s1k = sum(m, {1}, true);
  REQUIRE(s1k.shape() == Shape{2, 1});
  CHECK(s1k.at({1, 0}) == 15.0);

  CHECK_THROWS_AS(sum(m, {2}), Error);

  // gradient of mean broadcasts 1/count to every element
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  {
    Tape tape;
    Tensor loss = mean(x);
    tape.backward(loss);
  }
  for (int64_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 0.25);
  x.zero_grad();
}

TEST_CASE("shape ops") {
  Tensor v = Tensor::from({4}, {1, 2, 3, 4});
  Tensor m = reshape(v, {2, 2});
  CHECK(m.at({0, 1}) == 2.0);
  CHECK(m.at({1, 0}) == 3.0);
  CHECK_THROWS_AS(reshape(v, {3, 2}), Error);

  Tensor c = concat({Tensor::from({2}, {1, 2}), Tensor::from({3}, {3, 4, 5})}, 0);
  REQUIRE(c.shape() == Shape{5});
  CHECK(c.at({4}) == 5.0);

  Tensor t = transpose(m, 0, 1);
  CHECK(t.at({0, 1}) == 3.0);

  Tensor s = slice(v, 0, 1, 4, 2);
  REQUIRE(s.shape() == Shape{2});
  CHECK(s.at({0}) == 2.0);
  CHECK(s.at({1}) == 4.0);

  Tensor b = broadcast_to(Tensor::from({1, 2}, {7, 9}), {3, 2});
  CHECK(b.at({2, 1}) == 9.0);
}

TEST_CASE("slice backward scatters into original positions, zeros elsewhere") {
  auto rng = substream(3, "slice-grad");
  Tensor x = rand_tensor({2, 6}, rng);
  Tensor w = loss_weights({2, 2});
  auto res = gradcheck({x}, [&] { return weighted_loss(slice(x, 1, 1, 6, 3), w); });
  CHECK(res.max_rel_err < 1e-6);
  {
    Tape tape;
    Tensor loss = weighted_loss(slice(x, 1, 1, 6, 3), w);
    tape.backward(loss);
  }
  // untouched columns keep zero gradient
  for (int64_t r = 0; r < 2; ++r)
    for (int64_t col : {0, 2, 3, 5}) CHECK(x.grad()[r * 6 + col] == 0.0);
  x.zero_grad();
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  {
    Tape tape;
    Tensor loss = sum(mul(x, x));
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));
  x.zero_grad();

  // loss independent of x leaves a zero gradient
  Tensor y = Tensor::from({1}, {1.0}, true);
  {
    Tape tape;
    Tensor fx = mul(x, x);  // recorded but not part of the loss
    Tensor loss = sum(mul(y, y));
    tape.backward(loss);
    (void)fx;
  }
  CHECK(x.grad()[0] == 0.0);
  CHECK(y.grad()[0] == 2.0);
  x.zero_grad();
  y.zero_grad();

  // non-scalar loss rejected
  {
    Tape tape;
    Tensor v = mul(x, x);
    Tensor vv = add(v, v);
    CHECK_THROWS_AS(tape.backward(concat({vv, vv}, 0)), Error);
  }
  x.zero_grad();
}

TEST_CASE("gradients accumulate additively across multiple uses") {
  Tensor x = Tensor::from({1}, {1.5}, true);
  {
    Tape tape;
    Tensor loss = sum(add(mul(x, x), mul(x, x)));
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));  // 2 * 2x
  x.zero_grad();
}

TEST_CASE("composite pipeline matches finite differences") {
  auto rng = substream(4, "composite");
  Tensor a = rand_tensor({2, 3}, rng);
  Tensor b = rand_tensor({3, 2}, rng);
  auto res = gradcheck({a, b}, [&] { return sum(softplus(matmul(a, b))); });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("every differentiable primitive passes the gradient check") {
  auto rng = substream(5, "all-ops");
  const double tol = 1e-4;

  auto check_unary = [&](const char* name, auto op, double lo = -2.0, double hi = 2.0) {
    INFO(name);
    Tensor x = rand_tensor({3, 4}, rng, lo, hi);
    Tensor w = loss_weights({3, 4});
    auto res = gradcheck({x}, [&] { return weighted_loss(op(x), w); });
    CHECK(res.max_rel_err < tol);
  };
  check_unary("neg", [](const Tensor& x) { return neg(x); });
  check_unary("exp", [](const Tensor& x) { return exp(x); });
  check_unary("log", [](const Tensor& x) { return log(x); }, 0.2, 3.0);
  check_unary("sqrt", [](const Tensor& x) { return sqrt(x); }, 0.2, 3.0);
  check_unary("reciprocal", [](const Tensor& x) { return reciprocal(x); }, 0.3, 3.0);
  check_unary("tanh", [](const Tensor& x) { return tanh(x); });
  check_unary("sigmoid", [](const Tensor& x) { return sigmoid(x); });
  check_unary("relu", [](const Tensor& x) { return relu(x); });
  check_unary("softplus", [](const Tensor& x) { return softplus(x); });
  check_unary("silu", [](const Tensor& x) { return silu(x); });
  check_unary("gelu", [](const Tensor& x) { return gelu(x); });
  check_unary("log_softmax", [](const Tensor& x) { return log_softmax(x); });
  check_unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.7); });
  check_unary("mul_scalar", [](const Tensor& x) { return mul_scalar(x, -1.3); });

  SECTION("binary ops with broadcasting") {
    Tensor a = rand_tensor({2, 3, 4}, rng);
    Tensor b = rand_tensor({4}, rng);
    Tensor w = loss_weights({2, 3, 4});
    for (auto op : {add, sub, mul}) {
      auto res = gradcheck({a, b}, [&] { return weighted_loss(op(a, b), w); });
      CHECK(res.max_rel_err < tol);
      // grad shape equals leaf shape by construction of the buffers
    }
  }
  SECTION("reductions and shape ops") {
    Tensor x = rand_tensor({2, 3, 4}, rng);
    CHECK(gradcheck({x}, [&] { return sum(x); }).max_rel_err < tol);
    CHECK(gradcheck({x}, [&] {
            return weighted_loss(mean(x, {1}), loss_weights({2, 4}));
          }).max_rel_err < tol);
    CHECK(gradcheck({x}, [&] {
            return weighted_loss(transpose(reshape(x, {3, 2, 4}), 0, 1), loss_weights({2, 3, 4}));
          }).max_rel_err < tol);
    CHECK(gradcheck({x}, [&] {
            return weighted_loss(broadcast_to(slice(x, 2, 0, 4, 2), {2, 2, 3, 2}),
                                 loss_weights({2, 2, 3, 2}));
          }).max_rel_err < tol);
    CHECK(gradcheck({x}, [&] {
            return weighted_loss(concat({x, x}, 1), loss_weights({2, 6, 4}));
          }).max_rel_err < tol);
  }
  SECTION("gather_index") {
    Tensor x = rand_tensor({3, 5}, rng);
    ITensor ids({3}, {4, 0, 2});
    Tensor w = loss_weights({3});
    CHECK(gradcheck({x}, [&] { return weighted_loss(gather_index(x, ids), w); }).max_rel_err <
          tol);
  }
}

TEST_CASE("outputs stay finite on finite inputs") {
  auto rng = substream(6, "finite");
  Tensor a = rand_tensor({4, 4}, rng, -50, 50, false);
  for (const Tensor& y : {exp(mul_scalar(a, 0.1)), softplus(a), silu(a), gelu(a), tanh(a),
                          log_softmax(a), matmul(a, a)})
    CHECK(testsupport::all_finite(y));
}

TEST_CASE("two identical forward passes are bit-identical") {
  auto rng = substream(7, "determinism");
  Tensor a = rand_tensor({5, 6}, rng, -2, 2, false);
  Tensor b = rand_tensor({6, 3}, rng, -2, 2, false);
  Tensor y1 = silu(matmul(softplus(a), b));
  Tensor y2 = silu(matmul(softplus(a), b));
  for (int64_t i = 0; i < y1.numel(); ++i) {
    REQUIRE(y1.data()[i] == y2.data()[i]);
  }
}

TEST_CASE("gradient buffers always match leaf shapes") {
  auto rng = substream(8, "grad-shape");
  Tensor a = rand_tensor({2, 1, 3}, rng);
  Tensor b = rand_tensor({4, 3}, rng);
  {
    Tape tape;
    Tensor loss = sum(mul(a, b));  // broadcast to [2,4,3]
    tape.backward(loss);
  }
  Tensor ga = a.grad_tensor(), gb = b.grad_tensor();
  CHECK(ga.shape() == a.shape());
  CHECK(gb.shape() == b.shape());
  // each a element participates in 4 products
  CHECK(ga.numel() == 6);
  a.zero_grad();
  b.zero_grad();
}
