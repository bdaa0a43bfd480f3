#include <doctest.h>

#include <cmath>

#include "angio/autodiff.hpp"
#include "helpers.hpp"

using namespace angio;
using nn::Tape;
using nn::Tensor;
using nn::Var;
using testutil::random_tensor;
using testutil::random_unit_tensor;

namespace {
// central differences in double land around 1e-8 relative error for well
// conditioned ops; the acceptance gate for loss gradients is 1e-4
constexpr double kTol = 1e-5;

double check(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
             const std::vector<Tensor>& inputs) {
  return nn::gradcheck(f, inputs);
}
}  // namespace

TEST_CASE("elementwise op gradients") {
  const Tensor a = random_tensor({2, 3, 3}, 1);
  const Tensor b = random_tensor({2, 3, 3}, 2);

  CHECK(check([](Tape&, const std::vector<Var>& v) { return nn::mean_all(nn::mul(v[0], v[1])); },
              {a, b}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::sum_all(nn::square(nn::sub(v[0], v[1])));
        },
              {a, b}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::sadd(nn::smul(v[0], -2.5), 0.7));
        },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) { return nn::mean_all(nn::vabs(v[0])); },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::leaky_relu(v[0], 0.2));
        },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::sigmoid(v[0]));
        },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) { return nn::mean_all(nn::vtanh(v[0])); },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::scale_by(v[0], nn::sum_all(v[1])));
        },
              {a, b}) < kTol);
}

TEST_CASE("structure op gradients") {
  const Tensor a = random_tensor({2, 4, 4}, 3);
  const Tensor b = random_tensor({3, 4, 4}, 4);

  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::concat_channels({v[0], v[1]})));
        },
              {a, b}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::sum_all(nn::square(nn::global_avg_pool(v[0])));
        },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::upsample_nearest2x(v[0])));
        },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::avg_pool2x(v[0])));
        },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::gather_locations(v[0], {0, 5, 11, 3})));
        },
              {a}) < kTol);
}

TEST_CASE("linear algebra gradients") {
  const Tensor a = random_tensor({3, 4}, 5);
  const Tensor b = random_tensor({4, 2}, 6);
  const Tensor c = random_tensor({5, 4}, 7);
  const Tensor bias = random_tensor({2}, 8);
  const Tensor vec = random_tensor({5}, 9);

  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::matmul(v[0], v[1])));
        },
              {a, b}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::matmul_nt(v[0], v[1])));
        },
              {a, c}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::add_bias_rows(nn::matmul(v[0], v[1]), v[2])));
        },
              {a, b, bias}) < kTol);
  const Tensor rt = random_tensor({3, 4}, 90);
  CHECK(check([&](Tape& t, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::sub(nn::l2_normalize_rows(v[0]), t.constant(rt))));
        },
              {a}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::softmax(v[0])));
        },
              {vec}) < kTol);
}

TEST_CASE("conv2d gradients across strides and pads") {
  const Tensor x = random_tensor({2, 6, 6}, 10);
  const Tensor w3 = random_tensor({3, 2, 3, 3}, 11, 0.5);
  const Tensor b3 = random_tensor({3}, 12);
  const Tensor w4 = random_tensor({2, 2, 4, 4}, 13, 0.5);
  const Tensor b4 = random_tensor({2}, 14);

  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::conv2d(v[0], v[1], v[2], 1, 1)));
        },
              {x, w3, b3}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::conv2d(v[0], v[1], v[2], 2, 1)));
        },
              {x, w3, b3}) < kTol);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::conv2d(v[0], v[1], v[2], 2, 1)));
        },
              {x, w4, b4}) < kTol);
  // 7x7 stem-style kernel
  const Tensor w7 = random_tensor({1, 2, 7, 7}, 15, 0.3);
  const Tensor b7 = random_tensor({1}, 16);
  CHECK(check([](Tape&, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::conv2d(v[0], v[1], v[2], 1, 3)));
        },
              {x, w7, b7}) < kTol);
}

TEST_CASE("instance_norm gradient") {
  // regress the normalized map onto a random target so the gradient does not
  // vanish by the normalization identity
  const Tensor x = random_tensor({3, 5, 5}, 17);
  const Tensor target = random_tensor({3, 5, 5}, 170);
  CHECK(check([&](Tape& t, const std::vector<Var>& v) {
          return nn::mean_all(nn::square(nn::sub(nn::instance_norm(v[0]), t.constant(target))));
        },
              {x}) < kTol);
}

TEST_CASE("fused loss gradients") {
  // cosine-range similarities, as produced by normalized features
  Tensor sims = random_tensor({5, 5}, 18);
  for (auto& v : sims.v) v = std::tanh(v);
  Tensor weights({5});
  for (int i = 0; i < 5; ++i) weights.v[static_cast<std::size_t>(i)] = 1.0 + 0.3 * i;

  CHECK(check([&](Tape& t, const std::vector<Var>& v) {
          return nn::info_nce(v[0], 0.07, t.constant(weights));
        },
              {sims}) < kTol);

  const Tensor logits = random_tensor({4, 3}, 19);
  Tensor targets({4, 3});
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c)
      targets.v[static_cast<std::size_t>(i * 3 + c)] = (c == i % 3 ? 0.9 : 0.05);
  CHECK(check([&](Tape& t, const std::vector<Var>& v) {
          return nn::softmax_cross_entropy(v[0], t.constant(targets));
        },
              {logits}) < kTol);

  const Tensor z = random_tensor({2, 4, 4}, 20);
  Tensor y = random_unit_tensor({2, 4, 4}, 21);
  for (auto& v : y.v) v = v > 0.5 ? 1.0 : 0.0;
  CHECK(check([&](Tape& t, const std::vector<Var>& v) {
          return nn::bce_with_logits(v[0], t.constant(y));
        },
              {z}) < kTol);
  Tensor w = random_unit_tensor({2, 4, 4}, 22);
  for (auto& v : w.v) v += 1.0;
  CHECK(check([&](Tape& t, const std::vector<Var>& v) {
          return nn::bce_with_logits_weighted(v[0], t.constant(y), t.constant(w));
        },
              {z}) < kTol);
}

TEST_CASE("backward accumulates across shared subexpressions") {
  // f = mean(x*x) + mean(x) uses x twice
  Tape tape;
  Tensor x = random_tensor({3, 3}, 23);
  Var vx = tape.leaf(x, true);
  Var loss = nn::add(nn::mean_all(nn::mul(vx, vx)), nn::mean_all(vx));
  tape.backward(loss);
  const Tensor& g = tape.grad(vx);
  for (std::size_t i = 0; i < x.v.size(); ++i)
    CHECK(g.v[i] == doctest::Approx(2.0 * x.v[i] / 9.0 + 1.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("no-grad tape skips gradient work") {
  Tape tape(false);
  Var a = tape.leaf(random_tensor({2, 2}, 24), true);
  Var out = nn::mean_all(nn::square(a));
  CHECK(tape.val(out).numel() == 1);
  CHECK_THROWS_AS(tape.backward(out), Error);
}

TEST_CASE("param binding collects gradients by name") {
  nn::ParamStore ps;
  ps.create("w", random_tensor({2, 2}, 25));
  Tape tape;
  Var w = tape.param(ps, "w");
  tape.backward(nn::sum_all(nn::square(w)));
  nn::GradMap grads;
  tape.accumulate_param_grads(grads);
  REQUIRE(grads.count("w") == 1);
  for (std::size_t i = 0; i < grads["w"].v.size(); ++i)
    CHECK(grads["w"].v[i] == doctest::Approx(2.0 * ps.get("w").v[i]).epsilon(1e-12));
}
