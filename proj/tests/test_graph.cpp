#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "ndcr/graph.hpp"

using namespace ndcr;

namespace {

using BuildOp = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

Tensor<double> random_tensor(Rng& rng, int r, int c, double scale = 1.0) {
  Tensor<double> t(r, c);
  for (auto& v : t.data) v = scale * rng.next_gaussian();
  return t;
}

// Central finite-difference check of d(sum(W .* op(inputs)))/d(inputs) over
// every input coordinate. Returns the max relative error.
double fd_check(const std::vector<std::pair<int, int>>& shapes, const BuildOp& op, uint64_t seed,
                double input_scale = 1.0) {
  Rng rng(seed);
  std::vector<Tensor<double>> inputs;
  for (auto [r, c] : shapes) inputs.push_back(random_tensor(rng, r, c, input_scale));

  Tensor<double> weight;  // fixed projection to a scalar, sized after one dry run
  auto build = [&](const std::vector<Tensor<double>>& xs, Graph<double>& g) {
    std::vector<Var> vars;
    for (size_t i = 0; i < xs.size(); ++i) vars.push_back(g.param("x" + std::to_string(i), xs[i]));
    Var y = op(g, vars);
    if (weight.size() == 0) weight = random_tensor(rng, g.value(y).rows, g.value(y).cols);
    return g.sum_all(g.mul(y, g.input(weight)));
  };

  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    Var loss = build(inputs, g);
    g.backward(loss);
    for (const auto& [name, var] : g.params()) analytic.push_back(g.grad(var));
  }
  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Graph<double> g;
    return g.value(build(xs, g)).data[0];
  };

  double worst = 0.0;
  const double eps = 1e-6;
  for (size_t t = 0; t < inputs.size(); ++t) {
    for (size_t i = 0; i < inputs[t].size(); ++i) {
      const double saved = inputs[t].data[i];
      inputs[t].data[i] = saved + eps;
      const double up = eval(inputs);
      inputs[t].data[i] = saved - eps;
      const double dn = eval(inputs);
      inputs[t].data[i] = saved;
      const double fd = (up - dn) / (2 * eps);
      const double an = analytic[t].data[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}));
    }
  }
  return worst;
}

void check_op(const char* name, const std::vector<std::pair<int, int>>& shapes, const BuildOp& op,
              double input_scale = 1.0, int seeds = 5) {
  for (int s = 0; s < seeds; ++s) {
    double err = fd_check(shapes, op, 1000 + static_cast<uint64_t>(s), input_scale);
    CHECK_MESSAGE(err <= 1e-6, name << " seed " << s << " max rel err " << err);
  }
}

}  // namespace

TEST_CASE("gradients: elementwise and affine ops") {
  check_op("add", {{3, 4}, {3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.add(v[0], v[1]);
  });
  check_op("sub", {{3, 4}, {3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.sub(v[0], v[1]);
  });
  check_op("mul", {{3, 4}, {3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.mul(v[0], v[1]);
  });
  check_op("add_row", {{5, 3}, {1, 3}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.add_row(v[0], v[1]);
  });
  check_op("scale", {{3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.scale(v[0], -2.5);
  });
  check_op("add_const", {{3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.add_const(v[0], 0.7);
  });
  check_op("scalar_mul", {{3, 4}, {1, 1}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.scalar_mul(v[0], v[1]);
  });
}

TEST_CASE("gradients: matmul variants") {
  check_op("matmul", {{3, 4}, {4, 5}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.matmul(v[0], v[1]);
  });
  check_op("matmul_tA", {{4, 3}, {4, 5}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.matmul(v[0], v[1], true, false);
  });
  check_op("matmul_tB", {{3, 4}, {5, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.matmul(v[0], v[1], false, true);
  });
}

TEST_CASE("gradients: nonlinearities") {
  // inputs scaled up so no coordinate sits within fd-eps of the ReLU kink
  check_op("relu", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.relu(v[0]);
  }, 3.0);
  check_op("sigmoid", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.sigmoid(v[0]);
  });
  check_op("tanh", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.tanh(v[0]);
  });
  check_op("softmax_rows", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.softmax(v[0], 1);
  });
  check_op("softmax_cols", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.softmax(v[0], 0);
  });
  check_op("log_softmax", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.log_softmax(v[0]);
  });
  check_op("layer_norm", {{4, 6}, {1, 6}, {1, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.layer_norm(v[0], v[1], v[2]);
  });
  check_op("l2_normalize_rows", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.l2_normalize_rows(v[0]);
  });
}

TEST_CASE("gradients: shape ops") {
  check_op("concat_cols", {{3, 4}, {3, 2}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.concat_cols(v[0], v[1]);
  });
  check_op("concat_rows", {{3, 4}, {2, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.concat_rows(v[0], v[1]);
  });
  check_op("slice_rows", {{5, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.slice_rows(v[0], 1, 4);
  });
  check_op("repeat_block", {{3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.repeat_block(v[0], 3);
  });
  check_op("repeat_interleave", {{3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.repeat_interleave(v[0], 2);
  });
  check_op("permute_rows", {{5, 3}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.permute_rows(v[0], {4, 2, 0, 1, 3});
  });
  check_op("transpose", {{3, 5}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.transpose(v[0]);
  });
  check_op("reshape", {{4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.reshape(v[0], 3, 8);
  });
}

TEST_CASE("gradients: composite ops") {
  check_op("grouped_weighted_sum", {{2, 3}, {6, 4}},
           [](Graph<double>& g, const std::vector<Var>& v) {
             return g.grouped_weighted_sum(v[0], v[1]);
           });
  check_op("pairwise_hadamard", {{2, 5}, {3, 5}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.pairwise_hadamard(v[0], v[1]);
  });
  check_op("sdpa", {{4, 6}, {4, 6}, {4, 6}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.sdpa(v[0], v[1], v[2], 2, 1);
  });
  check_op("sdpa_grouped", {{3, 6}, {6, 6}, {6, 6}},
           [](Graph<double>& g, const std::vector<Var>& v) {
             return g.sdpa(v[0], v[1], v[2], 2, 3);
           });
  check_op("pick", {{3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.pick(v[0], 1, 2);
  });
  check_op("sum_all", {{3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.sum_all(v[0]);
  });
  check_op("mean_all", {{3, 4}}, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.mean_all(v[0]);
  });
}

TEST_CASE("softmax rows sum to one and match a hand computation") {
  Graph<double> g;
  Tensor<double> x(2, 3);
  x.data = {0.0, 1.0, 2.0, -1.0, 0.0, 1.0};
  Var s = g.softmax(g.input(x), 1);
  const Tensor<double>& v = g.value(s);
  for (int r = 0; r < 2; ++r) {
    double sum = 0;
    for (int c = 0; c < 3; ++c) sum += v.at(r, c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  const double z = std::exp(0.0) + std::exp(1.0) + std::exp(2.0);
  CHECK(v.at(0, 0) == doctest::Approx(std::exp(0.0) / z));
  CHECK(v.at(0, 2) == doctest::Approx(std::exp(2.0) / z));
  // shift invariance: rows 0 and 1 differ by a constant shift
  for (int c = 0; c < 3; ++c) CHECK(v.at(0, c) == doctest::Approx(v.at(1, c)).epsilon(1e-12));
}

TEST_CASE("sdpa matches a brute-force attention reference") {
  Rng rng(7);
  const int n = 4, d = 6, heads = 2, hd = d / heads;
  Tensor<double> q = random_tensor(rng, n, d), k = random_tensor(rng, n, d),
                 v = random_tensor(rng, n, d);
  Graph<double> g;
  Var out = g.sdpa(g.input(q), g.input(k), g.input(v), heads, 1);
  const Tensor<double>& got = g.value(out);

  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<size_t>(n));
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int c = 0; c < hd; ++c) s += q.at(i, h * hd + c) * k.at(j, h * hd + c);
        logits[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(hd));
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
      }
      for (int c = 0; c < hd; ++c) {
        double expect = 0;
        for (int j = 0; j < n; ++j)
          expect += logits[static_cast<size_t>(j)] / z * v.at(j, h * hd + c);
        CHECK(got.at(i, h * hd + c) == doctest::Approx(expect).epsilon(1e-10));
      }
    }
  }
  // cached attention weights normalize
  const Tensor<double>& w = g.attention_weights(out);
  for (int r = 0; r < w.rows; ++r) {
    double sum = 0;
    for (int c = 0; c < w.cols; ++c) sum += w.at(r, c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("grouped sdpa restricts attention to its group") {
  Rng rng(9);
  const int groups = 3, rows_per_group = 2, d = 4;
  Tensor<double> q = random_tensor(rng, groups, d);
  Tensor<double> kv = random_tensor(rng, groups * rows_per_group, d);
  Graph<double> g;
  Var out = g.sdpa(g.input(q), g.input(kv), g.input(kv), 1, groups);
  // Changing another group's keys/values must not change this group's output.
  Tensor<double> kv2 = kv;
  for (int c = 0; c < d; ++c) kv2.at(4, c) += 10.0;  // rows 4,5 belong to group 2
  Graph<double> g2;
  Var out2 = g2.sdpa(g2.input(q), g2.input(kv2), g2.input(kv2), 1, groups);
  for (int c = 0; c < d; ++c) {
    CHECK(g.value(out).at(0, c) == doctest::Approx(g2.value(out2).at(0, c)).epsilon(1e-12));
    CHECK(g.value(out).at(1, c) == doctest::Approx(g2.value(out2).at(1, c)).epsilon(1e-12));
    CHECK(g.value(out).at(2, c) != doctest::Approx(g2.value(out2).at(2, c)).epsilon(1e-12));
  }
}

TEST_CASE("grouped_weighted_sum matches brute force") {
  Rng rng(11);
  Tensor<double> w = random_tensor(rng, 2, 3);
  Tensor<double> x = random_tensor(rng, 6, 4);
  Graph<double> g;
  const Tensor<double>& got = g.value(g.grouped_weighted_sum(g.input(w), g.input(x)));
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c) {
      double expect = 0;
      for (int j = 0; j < 3; ++j) expect += w.at(i, j) * x.at(i * 3 + j, c);
      CHECK(got.at(i, c) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("pairwise_hadamard row layout is proposition-major") {
  Rng rng(13);
  Tensor<double> a = random_tensor(rng, 2, 3);
  Tensor<double> b = random_tensor(rng, 4, 3);
  Graph<double> g;
  const Tensor<double>& got = g.value(g.pairwise_hadamard(g.input(a), g.input(b)));
  REQUIRE(got.rows == 8);
  for (int i = 0; i < 2; ++i)
    for (int l = 0; l < 4; ++l)
      for (int c = 0; c < 3; ++c)
        CHECK(got.at(i * 4 + l, c) == doctest::Approx(a.at(i, c) * b.at(l, c)).epsilon(1e-12));
}

TEST_CASE("l2_normalize_rows produces unit rows and rejects zero rows") {
  Rng rng(15);
  Tensor<double> x = random_tensor(rng, 3, 5);
  Graph<double> g;
  const Tensor<double>& got = g.value(g.l2_normalize_rows(g.input(x)));
  for (int r = 0; r < 3; ++r) {
    double n = 0;
    for (int c = 0; c < 5; ++c) n += got.at(r, c) * got.at(r, c);
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
  }
  Graph<double> g2;
  Tensor<double> zero(2, 5);
  CHECK_THROWS_AS(g2.l2_normalize_rows(g2.input(zero)), NumericError);
}

TEST_CASE("stop_gradient blocks the backward pass") {
  Graph<double> g;
  Tensor<double> x(1, 3);
  x.data = {1.0, 2.0, 3.0};
  Var p = g.param("x", x);
  Var loss = g.add(g.sum_all(g.stop_gradient(g.scale(p, 5.0))), g.sum_all(p));
  g.backward(loss);
  const Tensor<double>& grad = g.grad(p);
  for (size_t i = 0; i < 3; ++i) CHECK(grad.data[i] == doctest::Approx(1.0));  // only direct path
}

TEST_CASE("dropout: identity at eval, inverted scaling in training") {
  Tensor<double> x(8, 8);
  x.fill(1.0);
  Graph<double> ge;
  CHECK(ge.value(ge.dropout(ge.input(x))).at(3, 3) == 1.0);

  Graph<double>::Options opt;
  opt.training = true;
  opt.dropout_rate = 0.5;
  opt.seed = 21;
  Graph<double> gt(opt);
  const Tensor<double>& v = gt.value(gt.dropout(gt.input(x)));
  int kept = 0;
  for (const auto& e : v.data) {
    CHECK((e == 0.0 || e == doctest::Approx(2.0)));  // 1 / (1 - rate)
    if (e != 0.0) ++kept;
  }
  CHECK(kept > 8);
  CHECK(kept < 56);
}

TEST_CASE("non-finite propagation raises NumericError naming the op") {
  Graph<double> g;
  Tensor<double> x(1, 2);
  x.data = {1.0, 0.0};
  Var v = g.input(x);
  Tensor<double> huge(1, 2);
  huge.data = {1e308, 1e308};
  CHECK_THROWS_AS(g.mul(g.input(huge), g.add_const(g.input(huge), 1e308)), NumericError);
  CHECK_NOTHROW(g.add(v, v));
}

TEST_CASE("shape errors are rejected") {
  Graph<double> g;
  Tensor<double> a(2, 3), b(3, 2);
  a.fill(1.0);
  b.fill(1.0);
  Var va = g.input(a), vb = g.input(b);
  CHECK_THROWS_AS(g.add(va, vb), ShapeError);
  CHECK_THROWS_AS(g.matmul(va, va), ShapeError);
  CHECK_THROWS_AS(g.reshape(va, 4, 2), ShapeError);
  CHECK_THROWS_AS(g.sdpa(va, vb, vb, 2, 1), ShapeError);
}
