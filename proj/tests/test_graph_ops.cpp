#include <doctest.h>

#include <memory>
#include <vector>

#include "gradcheck.hpp"
#include "rtflow/ops.hpp"
#include "rtflow/rng.hpp"

using namespace rtflow;
using rtflow::testing::max_gradcheck_error;

namespace {

Mat<double> random_mat(int r, int c, RngStream& rng, double lo = -1.0,
                       double hi = 1.0) {
  Mat<double> m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

constexpr double kGradTol = 1e-6;

}  // namespace

TEST_CASE("arithmetic and matmul gradients match finite differences") {
  RngStream rng(101);
  auto A = random_mat(3, 4, rng);
  auto B = random_mat(3, 4, rng);
  auto C = random_mat(4, 2, rng);

  double err = max_gradcheck_error(
      [](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
        Var<double> s = add(v[0], v[1]);
        Var<double> d = sub(v[0], v[1]);
        Var<double> p = cmul(s, d);
        Var<double> q = cdiv(p, add_scalar(square(v[1]), 2.0));
        Var<double> m = matmul(q, v[2]);
        return sum_all(cmul(m, m));
      },
      {A, B, C});
  CHECK(err < kGradTol);
}

TEST_CASE("elementwise maps have correct gradients") {
  RngStream rng(102);
  // Keep away from the relu/abs kink at zero and keep log/sqrt inputs positive.
  auto X = random_mat(4, 3, rng, 0.2, 1.5);

  for (int which = 0; which < 8; ++which) {
    double err = max_gradcheck_error(
        [which](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
          Var<double> x = v[0];
          Var<double> y;
          switch (which) {
            case 0: y = relu(add_scalar(x, -0.7)); break;
            case 1: y = gelu(x); break;
            case 2: y = sigmoid(x); break;
            case 3: y = tanh_op(x); break;
            case 4: y = exp_op(x); break;
            case 5: y = log_op(x); break;
            case 6: y = sqrt_op(x); break;
            default: y = pow_scalar(x, -1.5); break;
          }
          return sum_all(cmul(y, y));
        },
        {X});
    CAPTURE(which);
    CHECK(err < kGradTol);
  }
}

TEST_CASE("reductions and broadcasts have correct gradients") {
  RngStream rng(103);
  auto X = random_mat(4, 5, rng);
  auto cv = random_mat(4, 1, rng, 0.5, 1.5);
  auto rv = random_mat(1, 5, rng, 0.5, 1.5);

  double err = max_gradcheck_error(
      [](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
        Var<double> a = add_colvec(v[0], v[1]);
        a = mul_colvec(a, v[1]);
        a = add_rowvec(a, v[2]);
        a = mul_rowvec(a, v[2]);
        Var<double> r = rowwise_mean(square(a));
        Var<double> c = colwise_sum(a);
        return add(mean_all(r), add(sum_all(c), dot_all(a, a)));
      },
      {X, cv, rv});
  CHECK(err < kGradTol);
}

TEST_CASE("slicing, concatenation and gathers have correct gradients") {
  RngStream rng(104);
  auto X = random_mat(5, 4, rng);
  auto Y = random_mat(3, 4, rng);

  double err = max_gradcheck_error(
      [](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
        Var<double> top = slice_rows(v[0], 0, 3);
        Var<double> cat = concat_rows<double>({top, v[1]});
        Var<double> wide = concat_cols<double>({slice_cols(cat, 0, 2), slice_cols(cat, 2, 2)});
        auto ridx = std::make_shared<const std::vector<int>>(
            std::vector<int>{4, 0, 0, -1, 2});
        Var<double> gr = gather_rows(wide, ridx);
        auto cidx = std::make_shared<const std::vector<int>>(
            std::vector<int>{3, 3, -1, 1});
        Var<double> gc = gather_cols(gr, cidx);
        return sum_all(square(gc));
      },
      {X, Y});
  CHECK(err < kGradTol);
}

TEST_CASE("softmax_rows: values and gradients") {
  RngStream rng(105);
  auto X = random_mat(4, 4, rng, -2.0, 2.0);

  SUBCASE("rows sum to one; causal masks the upper triangle to exactly zero") {
    Graph<double> g;
    Var<double> x = g.leaf(X, false);
    Var<double> y = softmax_rows(x, /*causal=*/true);
    for (int r = 0; r < 4; ++r) {
      CHECK(y.val().row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
      for (int c = r + 1; c < 4; ++c) CHECK(y.val()(r, c) == 0.0);
    }
  }

  SUBCASE("gradients, plain and causal") {
    for (bool causal : {false, true}) {
      double err = max_gradcheck_error(
          [causal](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
            Var<double> y = softmax_rows(v[0], causal);
            // Weighted sum so every row contributes asymmetrically.
            Mat<double> w = Mat<double>::Constant(4, 4, 0.3);
            w(0, 0) = 1.7;
            w(2, 1) = -0.9;
            return dot_all(y, g.constant(w));
          },
          {X});
      CAPTURE(causal);
      CHECK(err < kGradTol);
    }
  }
}

TEST_CASE("masked_ce_sum: value equals manual cross-entropy and grads check out") {
  RngStream rng(106);
  auto L = random_mat(5, 7, rng, -2.0, 2.0);
  auto ids = std::make_shared<const std::vector<int>>(std::vector<int>{2, 6, 0, 3, 1});
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{1, 0, 1, 1, 0});

  SUBCASE("value") {
    Graph<double> g;
    Var<double> logits = g.leaf(L, false);
    Var<double> ce = masked_ce_sum(logits, ids, mask);
    double expect = 0.0;
    for (int t = 0; t < 5; ++t) {
      if (!(*mask)[t]) continue;
      Eigen::ArrayXd e = (L.row(t).array() - L.row(t).maxCoeff()).exp();
      expect -= std::log(e((*ids)[t]) / e.sum());
    }
    CHECK(ce.item() == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("gradient") {
    double err = max_gradcheck_error(
        [&](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
          return masked_ce_sum(v[0], ids, mask);
        },
        {L});
    CHECK(err < kGradTol);
  }
}

TEST_CASE("gather_patches matches direct indexing and its gradient") {
  RngStream rng(107);
  auto X = random_mat(2, 6, rng);

  auto map = std::make_shared<PatchIndexMap>();
  map->k_taps = 3;
  map->n_in = 6;
  map->n_out = 4;
  map->idx.resize(3, 4);
  map->idx << -1, 0, 1, 2,
               0, 1, 2, 3,
               1, 2, 3, -1;

  SUBCASE("value") {
    Graph<double> g;
    Var<double> x = g.leaf(X, false);
    Var<double> p = gather_patches<double>(x, map);
    REQUIRE(p.rows() == 6);
    REQUIRE(p.cols() == 4);
    CHECK(p.val().block(0, 0, 2, 1).isZero());
    CHECK(p.val().block(2, 0, 2, 1) == X.col(0));
    CHECK(p.val().block(4, 3, 2, 1).isZero());
    CHECK(p.val().block(0, 2, 2, 1) == X.col(1));
  }

  SUBCASE("gradient") {
    double err = max_gradcheck_error(
        [&](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
          Var<double> p = gather_patches<double>(v[0], map);
          return sum_all(square(p));
        },
        {X});
    CHECK(err < kGradTol);
  }
}

TEST_CASE("fused bce-with-logits and composition helpers") {
  RngStream rng(108);
  auto Z = random_mat(2, 9, rng, -3.0, 3.0);
  Mat<double> targets = (random_mat(2, 9, rng, 0.0, 1.0).array() > 0.5)
                            .cast<double>()
                            .matrix();

  SUBCASE("bce value matches naive formula on moderate logits") {
    Graph<double> g;
    Var<double> z = g.leaf(Z, false);
    Var<double> loss = bce_with_logits_mean(z, targets);
    double expect = 0.0;
    for (int i = 0; i < Z.rows(); ++i)
      for (int j = 0; j < Z.cols(); ++j) {
        const double p = 1.0 / (1.0 + std::exp(-Z(i, j)));
        expect -= targets(i, j) * std::log(p) + (1 - targets(i, j)) * std::log(1 - p);
      }
    expect /= Z.size();
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-10));
  }

  SUBCASE("bce is finite at extreme logits") {
    Graph<double> g;
    Mat<double> extreme(1, 2);
    extreme << 500.0, -500.0;
    Mat<double> y(1, 2);
    y << 1.0, 0.0;
    Var<double> loss = bce_with_logits_mean(g.leaf(extreme, false), y);
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() < 1e-6);
  }

  SUBCASE("gradients of bce, rmsnorm, standardize, cosine") {
    double err = max_gradcheck_error(
        [&](Graph<double>& g [[maybe_unused]], std::vector<Var<double>>& v) {
          Var<double> l1 = bce_with_logits_mean(v[0], targets);
          Var<double> n = rmsnorm_rows(v[0]);
          Var<double> s = standardize_rows(v[0]);
          Var<double> c = cosine_sim_flat(slice_rows(v[0], 0, 1),
                                          slice_rows(v[0], 1, 1));
          return add(l1, add(mean_all(n), add(mean_all(s), c)));
        },
        {Z});
    CHECK(err < kGradTol);
  }
}

TEST_CASE("stop_gradient blocks flow; non-recording graphs store no closures") {
  RngStream rng(109);
  auto X = random_mat(2, 2, rng);

  SUBCASE("stop_gradient") {
    Graph<double> g;
    Var<double> x = g.leaf(X, true);
    Var<double> frozen = stop_gradient(x);
    Var<double> loss = sum_all(cmul(x, frozen));
    g.backward(loss);
    // d/dx of x * const(x) is just const(x), not 2x.
    CHECK(g.grad(x) == frozen.val());
    CHECK_FALSE(frozen.requires_grad());
  }

  SUBCASE("recording off") {
    Graph<double> g;
    g.recording = false;
    Var<double> x = g.leaf(X, true);
    Var<double> y = sum_all(square(x));
    CHECK_FALSE(x.requires_grad());
    CHECK_FALSE(y.requires_grad());
  }

  SUBCASE("backward rejects non-scalar roots and foreign vars") {
    Graph<double> g;
    Var<double> x = g.leaf(X, true);
    CHECK_THROWS_AS(g.backward(x), InvalidInput);
    Graph<double> g2;
    Var<double> y = g2.leaf(X, true);
    CHECK_THROWS_AS(g.backward(y), InvalidInput);
  }
}

TEST_CASE("gradients accumulate only along grad-requiring paths") {
  Graph<double> g;
  Mat<double> a(1, 1), b(1, 1);
  a << 3.0;
  b << 4.0;
  Var<double> x = g.leaf(a, true);
  Var<double> w = g.leaf(b, false);  // frozen leaf
  Var<double> loss = sum_all(cmul(x, w));
  g.backward(loss);
  CHECK(g.grad(x)(0, 0) == 4.0);
  // Frozen leaves never get a gradient buffer.
  CHECK_FALSE(g.has_grad(w.id));
}
