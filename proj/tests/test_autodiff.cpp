#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "delg/autodiff.hpp"
#include "oracles.hpp"

using namespace delg;
using oracle::fd_max_rel_err;
using oracle::random_tensor;

TEST_CASE("conv2d identity and hand cases") {
  Graph g;

  SECTION("1x1 identity kernel reproduces the input") {
    Rng rng(1);
    Tensor x = random_tensor(rng, {4, 4, 3}, -1.0, 1.0);
    Tensor k({1, 1, 3, 3});
    for (int c = 0; c < 3; ++c) k.at(0, 0, c, c) = 1.0;
    Node* out = g.conv2d(g.leaf(x), g.leaf(k), 1, Padding::same);
    REQUIRE(out->value.shape == x.shape);
    for (int64_t i = 0; i < x.numel(); ++i)
      REQUIRE(out->value[i] == Catch::Approx(x[i]).margin(1e-15));
  }

  SECTION("2x2 all-ones valid kernel sums the map") {
    Tensor x = Tensor::from({2, 2, 1}, {1, 2, 3, 4});
    Tensor k({2, 2, 1, 1}, 1.0);
    Node* out = g.conv2d(g.leaf(x), g.leaf(k), 1, Padding::valid);
    REQUIRE(out->value.shape == std::vector<int>{1, 1, 1});
    REQUIRE(out->value[0] == 10.0);
  }

  SECTION("shape mismatch names both shapes") {
    Tensor x({4, 4, 2});
    Tensor k({3, 3, 5, 4});
    try {
      g.conv2d(g.leaf(x), g.leaf(k), 1, Padding::same);
      FAIL("expected throw");
    } catch (const Error& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find("[4,4,2]") != std::string::npos);
      REQUIRE(msg.find("[3,3,5,4]") != std::string::npos);
    }
  }
}

TEST_CASE("conv2d agrees with the sliding-window reference") {
  Rng rng(7);
  for (int stride : {1, 2}) {
    for (Padding pad : {Padding::same, Padding::valid}) {
      Tensor x = random_tensor(rng, {4, 4, 2}, -2.0, 2.0);
      Tensor k = random_tensor(rng, {3, 3, 2, 3}, -1.0, 1.0);
      Graph g;
      Node* out = g.conv2d(g.leaf(x), g.leaf(k), stride, pad);
      Tensor ref = oracle::conv2d_reference(x, k, stride, pad);
      REQUIRE(out->value.shape == ref.shape);
      for (int64_t i = 0; i < ref.numel(); ++i)
        REQUIRE(std::abs(out->value[i] - ref[i]) < 1e-12);
    }
  }

  SECTION("batched input matches per-image results") {
    Tensor x = random_tensor(rng, {2, 5, 5, 2}, -1.0, 1.0);
    Tensor k = random_tensor(rng, {3, 3, 2, 4}, -1.0, 1.0);
    Graph g;
    Node* out = g.conv2d(g.leaf(x), g.leaf(k), 2, Padding::same);
    Tensor ref = oracle::conv2d_reference(x, k, 2, Padding::same);
    for (int64_t i = 0; i < ref.numel(); ++i)
      REQUIRE(std::abs(out->value[i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("relu and softplus values") {
  Graph g;
  Node* x = g.leaf(Tensor::from({4}, {-3.0, 2.0, 0.0, 50.0}));

  Node* r = g.relu(x);
  REQUIRE(r->value[0] == 0.0);
  REQUIRE(r->value[1] == 2.0);
  REQUIRE(r->value[2] == 0.0);

  Node* s = g.softplus(x);
  REQUIRE(s->value[2] == Catch::Approx(0.6931471805599453).epsilon(1e-14));
  // softplus(50) = 50 + e^-50; the nearest double is exactly 50
  REQUIRE(s->value[3] == 50.0);
  REQUIRE(std::isfinite(s->value[3]));
  // softplus(-50) = e^-50 to double precision (value from a 50-digit oracle)
  Node* neg = g.softplus(g.leaf(Tensor::from({1}, {-50.0})));
  REQUIRE(neg->value[0] == Catch::Approx(1.9287498479639178e-22).epsilon(1e-12));
}

TEST_CASE("gem_pool identities and closed form") {
  SECTION("constant map pools to the constant for any power") {
    for (double p : {1.0, 2.5, 3.0, 100.0}) {
      Graph g;
      Tensor x({3, 3, 2}, 0.7);
      Node* out = g.gem_pool(g.leaf(x), p);
      REQUIRE(out->value.shape == std::vector<int>{2});
      REQUIRE(out->value[0] == Catch::Approx(0.7).epsilon(1e-12));
      REQUIRE(out->value[1] == Catch::Approx(0.7).epsilon(1e-12));
    }
  }

  SECTION("p=1 is bitwise mean pooling") {
    Rng rng(3);
    Tensor x = random_tensor(rng, {4, 5, 3}, 0.0, 2.0);
    Graph g;
    Node* out = g.gem_pool(g.leaf(x), 1.0);
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int s = 0; s < 20; ++s) acc += x[int64_t(s) * 3 + c];
      const double mean = acc / 20;
      REQUIRE(out->value[c] == mean);  // exact, not approximate
    }
  }

  SECTION("values {1,2} with p=3 (50-digit oracle: 4.5^(1/3))") {
    Graph g;
    Tensor x = Tensor::from({2, 1, 1}, {1.0, 2.0});
    Node* out = g.gem_pool(g.leaf(x), 3.0);
    REQUIRE(out->value[0] == Catch::Approx(1.6509636244473133).epsilon(1e-14));
  }

  SECTION("negative entries are a hard precondition error") {
    Graph g;
    Tensor x = Tensor::from({1, 2, 1}, {0.5, -0.1});
    REQUIRE_THROWS_AS(g.gem_pool(g.leaf(x), 3.0), Error);
  }

  SECTION("p=100 approaches the channel max within 1%") {
    // GeM satisfies max*(HW)^(-1/p) <= out <= max, so the 1% window is
    // guaranteed once (HW)^(1/100) <= 1.01, i.e. for 2-position maps.
    Rng rng(11);
    Tensor x = random_tensor(rng, {2, 1, 4}, 0.05, 2.0);
    Graph g;
    Node* out = g.gem_pool(g.leaf(x), 100.0);
    for (int c = 0; c < 4; ++c) {
      const double mx = std::max(x[c], x[4 + c]);
      REQUIRE(std::abs(out->value[c] - mx) / mx < 0.01);
    }
  }

  SECTION("p=100 sandwich bound on larger maps") {
    Rng rng(12);
    Tensor x = random_tensor(rng, {6, 6, 4}, 0.05, 2.0);
    Graph g;
    Node* out = g.gem_pool(g.leaf(x), 100.0);
    const double floor_factor = std::pow(1.0 / 36.0, 1.0 / 100.0);
    for (int c = 0; c < 4; ++c) {
      double mx = 0.0;
      for (int s = 0; s < 36; ++s) mx = std::max(mx, x[int64_t(s) * 4 + c]);
      REQUIRE(out->value[c] <= mx * (1.0 + 1e-12));
      REQUIRE(out->value[c] >= mx * floor_factor * (1.0 - 1e-12));
    }
  }
}

TEST_CASE("fully_connected hand cases and reference") {
  SECTION("identity") {
    Graph g;
    Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5});
    Tensor w({3, 3});
    for (int i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    Node* out = g.fully_connected(g.leaf(x), g.leaf(w), g.leaf(Tensor({3})));
    for (int i = 0; i < 3; ++i) REQUIRE(out->value[i] == x[i]);
  }

  SECTION("hand arithmetic") {
    Graph g;
    Node* out = g.fully_connected(g.leaf(Tensor::from({2}, {1.0, 1.0})),
                                  g.leaf(Tensor::from({1, 2}, {2.0, 3.0})),
                                  g.leaf(Tensor::from({1}, {1.0})));
    REQUIRE(out->value[0] == 6.0);
  }

  SECTION("random case against the loop reference") {
    Rng rng(5);
    Tensor x = random_tensor(rng, {17}, -2.0, 2.0);
    Tensor w = random_tensor(rng, {9, 17}, -1.0, 1.0);
    Tensor b = random_tensor(rng, {9}, -1.0, 1.0);
    Graph g;
    Node* out = g.fully_connected(g.leaf(x), g.leaf(w), g.leaf(b));
    auto ref = oracle::matvec_reference(w, x, &b);
    for (int i = 0; i < 9; ++i) REQUIRE(std::abs(out->value[i] - ref[size_t(i)]) < 1e-12);
  }

  SECTION("shape mismatch") {
    Graph g;
    REQUIRE_THROWS_AS(
        g.fully_connected(g.leaf(Tensor({4})), g.leaf(Tensor({2, 3})),
                          g.leaf(Tensor({2}))),
        Error);
  }
}

TEST_CASE("l2_normalize") {
  SECTION("3-4-5 triangle") {
    Graph g;
    Node* out = g.l2_normalize(g.leaf(Tensor::from({2}, {3.0, 4.0})));
    REQUIRE(out->value[0] == Catch::Approx(0.6).epsilon(1e-14));
    REQUIRE(out->value[1] == Catch::Approx(0.8).epsilon(1e-14));
  }

  SECTION("unit vector is a fixed point") {
    Graph g;
    Node* out = g.l2_normalize(g.leaf(Tensor::from({2}, {1.0, 0.0})));
    REQUIRE(out->value[0] == 1.0);
    REQUIRE(out->value[1] == 0.0);
  }

  SECTION("random 128-dim vector normalizes to unit") {
    Rng rng(9);
    Tensor x = random_tensor(rng, {128}, -2.0, 2.0);
    Graph g;
    Node* out = g.l2_normalize(g.leaf(x));
    REQUIRE(std::abs(out->value.l2_norm() - 1.0) < 1e-9);
  }

  SECTION("near-zero vector is a structured error") {
    Graph g;
    REQUIRE_THROWS_AS(g.l2_normalize(g.leaf(Tensor({4}, 1e-14))), Error);
  }
}

TEST_CASE("stop_gradient is an exact barrier") {
  SECTION("squared barrier contributes exactly zero") {
    Graph g;
    Node* x = g.leaf(Tensor::from({1}, {1.7}));
    Node* zero = g.leaf(Tensor({1}));
    Node* y = g.mse(g.stop_gradient(x), zero);  // (stop(x))^2
    REQUIRE(y->value[0] == Catch::Approx(1.7 * 1.7));
    g.backward(y);
    REQUIRE(x->grad[0] == 0.0);  // bitwise zero
  }

  SECTION("only the unbarred path counts") {
    Graph g;
    Node* x = g.leaf(Tensor::from({1}, {1.7}));
    Node* y = g.add(x, g.stop_gradient(x));
    g.backward(y);
    REQUIRE(x->grad[0] == 1.0);
  }
}

TEST_CASE("backward basics") {
  SECTION("sum of squares at [1,2]") {
    Graph g;
    Node* x = g.leaf(Tensor::from({2}, {1.0, 2.0}));
    Node* zero = g.leaf(Tensor({2}));
    Node* loss = g.weighted_sum({{2.0, g.mse(x, zero)}});  // = sum x^2
    REQUIRE(loss->value[0] == 5.0);
    g.backward(loss);
    REQUIRE(x->grad[0] == Catch::Approx(2.0).epsilon(1e-14));
    REQUIRE(x->grad[1] == Catch::Approx(4.0).epsilon(1e-14));
  }

  SECTION("non-scalar loss is rejected") {
    Graph g;
    Node* x = g.leaf(Tensor({3}, 1.0));
    REQUIRE_THROWS_AS(g.backward(x), Error);
  }

  SECTION("gem_pool gradient at a constant map is uniform 1/(HW)") {
    Graph g;
    Node* x = g.leaf(Tensor({4, 4, 1}, 0.9));
    Node* pooled = g.gem_pool(x, 3.0);
    g.backward(pooled);
    for (int64_t i = 0; i < 16; ++i)
      REQUIRE(x->grad[i] == Catch::Approx(1.0 / 16.0).epsilon(1e-12));
  }
}

// Finite-difference sweep over every differentiable op. The same harness is
// reused by the acceptance suite across many seeds; here one seed guards each
// op during development.
TEST_CASE("finite differences validate analytic gradients") {
  Rng rng(21);

  SECTION("conv2d w.r.t. input and kernel") {
    Tensor x = random_tensor(rng, {4, 4, 2}, -2.0, 2.0);
    Tensor k = random_tensor(rng, {3, 3, 2, 3}, -1.0, 1.0);
    auto eval = [](const std::vector<Tensor>& in) {
      Graph g;
      Node* out = g.conv2d(g.leaf(in[0]), g.leaf(in[1]), 2, Padding::same);
      Node* zero = g.leaf(Tensor(out->value.shape));
      return g.mse(out, zero)->value[0];
    };
    Graph g;
    Node* xn = g.leaf(x);
    Node* kn = g.leaf(k);
    Node* out = g.conv2d(xn, kn, 2, Padding::same);
    Node* loss = g.mse(out, g.leaf(Tensor(out->value.shape)));
    g.backward(loss);
    REQUIRE(fd_max_rel_err(eval, {x, k}, {xn->grad, kn->grad}) < 1e-4);
  }

  SECTION("relu away from the kink") {
    Tensor x = random_tensor(rng, {12}, 0.1, 2.0);
    for (int64_t i = 0; i < 12; i += 2) x[i] = -x[i];
    auto eval = [](const std::vector<Tensor>& in) {
      Graph g;
      Node* out = g.relu(g.leaf(in[0]));
      return g.mse(out, g.leaf(Tensor({12}, 0.5)))->value[0];
    };
    Graph g;
    Node* xn = g.leaf(x);
    Node* loss = g.mse(g.relu(xn), g.leaf(Tensor({12}, 0.5)));
    g.backward(loss);
    REQUIRE(fd_max_rel_err(eval, {x}, {xn->grad}) < 1e-4);
  }

  SECTION("softplus") {
    Tensor x = random_tensor(rng, {12}, -3.0, 3.0);
    auto eval = [](const std::vector<Tensor>& in) {
      Graph g;
      Node* out = g.softplus(g.leaf(in[0]));
      return g.mse(out, g.leaf(Tensor({12}, 0.5)))->value[0];
    };
    Graph g;
    Node* xn = g.leaf(x);
    Node* loss = g.mse(g.softplus(xn), g.leaf(Tensor({12}, 0.5)));
    g.backward(loss);
    REQUIRE(fd_max_rel_err(eval, {x}, {xn->grad}) < 1e-4);
  }

  SECTION("gem_pool at several powers") {
    for (double p : {1.0, 2.0, 3.0}) {
      Tensor x = random_tensor(rng, {3, 3, 2}, 0.1, 2.0);
      auto eval = [p](const std::vector<Tensor>& in) {
        Graph g;
        Node* out = g.gem_pool(g.leaf(in[0]), p);
        return g.mse(out, g.leaf(Tensor({2}, 0.3)))->value[0];
      };
      Graph g;
      Node* xn = g.leaf(x);
      Node* loss = g.mse(g.gem_pool(xn, p), g.leaf(Tensor({2}, 0.3)));
      g.backward(loss);
      REQUIRE(fd_max_rel_err(eval, {x}, {xn->grad}) < 1e-4);
    }
  }

  SECTION("fully_connected w.r.t. all three inputs") {
    Tensor x = random_tensor(rng, {5}, -2.0, 2.0);
    Tensor w = random_tensor(rng, {4, 5}, -1.0, 1.0);
    Tensor b = random_tensor(rng, {4}, -1.0, 1.0);
    auto eval = [](const std::vector<Tensor>& in) {
      Graph g;
      Node* out =
          g.fully_connected(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]));
      return g.mse(out, g.leaf(Tensor({4}, 0.1)))->value[0];
    };
    Graph g;
    Node* xn = g.leaf(x);
    Node* wn = g.leaf(w);
    Node* bn = g.leaf(b);
    Node* loss =
        g.mse(g.fully_connected(xn, wn, bn), g.leaf(Tensor({4}, 0.1)));
    g.backward(loss);
    REQUIRE(fd_max_rel_err(eval, {x, w, b},
                           {xn->grad, wn->grad, bn->grad}) < 1e-4);
  }

  SECTION("l2_normalize") {
    Tensor x = random_tensor(rng, {6}, 0.5, 2.0);
    auto eval = [](const std::vector<Tensor>& in) {
      Graph g;
      Node* out = g.l2_normalize(g.leaf(in[0]));
      return g.mse(out, g.leaf(Tensor({6}, 0.2)))->value[0];
    };
    Graph g;
    Node* xn = g.leaf(x);
    Node* loss = g.mse(g.l2_normalize(xn), g.leaf(Tensor({6}, 0.2)));
    g.backward(loss);
    REQUIRE(fd_max_rel_err(eval, {x}, {xn->grad}) < 1e-4);
  }

  SECTION("arcface_adjust and cross_entropy through scale_by") {
    Tensor u = random_tensor(rng, {5}, -0.9, 0.9);
    Tensor gamma = Tensor::from({1}, {7.0});
    auto eval = [](const std::vector<Tensor>& in) {
      Graph g;
      Node* adj = g.arcface_adjust(g.leaf(in[0]), 2, 0.1);
      Node* scaled = g.scale_by(adj, g.leaf(in[1]));
      return g.cross_entropy(scaled, 2)->value[0];
    };
    Graph g;
    Node* un = g.leaf(u);
    Node* gn = g.leaf(gamma);
    Node* loss = g.cross_entropy(g.scale_by(g.arcface_adjust(un, 2, 0.1), gn), 2);
    g.backward(loss);
    REQUIRE(fd_max_rel_err(eval, {u, gamma}, {un->grad, gn->grad}) < 1e-4);
  }

  SECTION("attention_pool, bias_add, slice_batch, reshape") {
    Tensor f = random_tensor(rng, {2, 3, 3, 2}, -1.0, 1.0);
    Tensor w = random_tensor(rng, {3, 3}, 0.1, 1.0);
    Tensor b = random_tensor(rng, {2}, -0.5, 0.5);
    auto eval = [](const std::vector<Tensor>& in) {
      Graph g;
      Node* sample = g.slice_batch(g.leaf(in[0]), 1);
      Node* biased = g.bias_add(sample, g.leaf(in[2]));
      Node* weights = g.reshape(g.leaf(in[1]), {3, 3});
      Node* pooled = g.attention_pool(biased, weights);
      return g.mse(pooled, g.leaf(Tensor({2}, 0.25)))->value[0];
    };
    Graph g;
    Node* fn = g.leaf(f);
    Node* wn = g.leaf(w);
    Node* bn = g.leaf(b);
    Node* pooled = g.attention_pool(g.bias_add(g.slice_batch(fn, 1), bn),
                                    g.reshape(wn, {3, 3}));
    Node* loss = g.mse(pooled, g.leaf(Tensor({2}, 0.25)));
    g.backward(loss);
    REQUIRE(fd_max_rel_err(eval, {f, w, b},
                           {fn->grad, wn->grad, bn->grad}) < 1e-4);
  }
}

TEST_CASE("graph forward passes are bitwise deterministic") {
  Rng rng(13);
  Tensor x = random_tensor(rng, {6, 6, 3}, -1.0, 1.0);
  Tensor k = random_tensor(rng, {3, 3, 3, 4}, -1.0, 1.0);
  Tensor first, second;
  for (int run = 0; run < 2; ++run) {
    Graph g;
    Node* out = g.relu(g.conv2d(g.leaf(x), g.leaf(k), 2, Padding::same));
    (run == 0 ? first : second) = out->value;
  }
  REQUIRE(first.data == second.data);
}
