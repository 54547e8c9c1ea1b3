#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>

#include "tpm/autodiff.hpp"
#include "tpm/error.hpp"
#include "tpm/random.hpp"

using namespace tpm;
using ad::Graph;
using ad::Var;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

NamedTensors<double> random_params(const std::vector<std::pair<std::string, Shape>>& shapes,
                                   std::uint64_t seed) {
  Rng rng(seed);
  NamedTensors<double> p;
  for (const auto& [name, shape] : shapes) p.add(name, random_tensor(shape, rng));
  return p;
}

/// Wraps y = build(g) into a generic scalar loss sum(y * R) and grad-checks every parameter.
ad::GradCheckReport check_op(NamedTensors<double> params,
                             const std::function<Var(Graph<double>&)>& build,
                             std::uint64_t seed = 7) {
  Graph<double> g(params);
  const Var y = build(g);
  Rng rng(seed);
  const Var r = g.constant(random_tensor(g.shape(y), rng));
  const Var loss = g.sum(g.multiply(y, r));
  return ad::grad_check(g, params, loss, {}, 1e-5, 1e-6, 64, seed);
}

void expect_exact(const ad::GradCheckReport& report, double tol = 1e-6) {
  for (const auto& e : report.entries) {
    INFO(e.name << " max rel " << e.max_relative_error);
    CHECK(e.max_relative_error < tol);
    CHECK(e.coordinates_checked > 0);
  }
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("forward examples") {
    NamedTensors<double> none;
    Graph<double> g(none);
    auto x = g.input("x", {3});
    g.output("sm", g.softmax(x));
    auto c = g.input("c", {4});
    g.output("ln", g.layer_norm(c));
    auto a = g.input("a", {2, 2});
    g.output("mm", g.matmul(a, g.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}))));
    ad::Inputs<double> in;
    in["x"] = Tensor<double>({3}, {0, 0, 0});
    in["c"] = Tensor<double>({4}, {2.5, 2.5, 2.5, 2.5});
    in["a"] = Tensor<double>({2, 2}, {1, 2, 3, 4});
    const auto out = g.forward(in);
    for (double v : out.at("sm").values()) CHECK(v == doctest::Approx(1.0 / 3.0));
    for (double v : out.at("ln").values()) CHECK(v == 0.0);
    CHECK(out.at("mm").storage() == std::vector<double>{1, 2, 3, 4});
  }

  TEST_CASE("softmax is stable for large logits") {
    NamedTensors<double> none;
    Graph<double> g(none);
    auto x = g.input("x", {2, 3});
    g.output("sm", g.softmax(x));
    ad::Inputs<double> in;
    in["x"] = Tensor<double>({2, 3}, {1000, 1000, 1000, -1000, 0, 1000});
    const auto out = g.forward(in).at("sm");
    CHECK(out[0] == doctest::Approx(1.0 / 3.0));
    CHECK(out[5] == doctest::Approx(1.0));
  }

  TEST_CASE("backward examples") {
    NamedTensors<double> p;
    p.add("p", Tensor<double>({2}, {1, 2}));
    p.add("unused", Tensor<double>({3}, {1, 1, 1}));
    {
      Graph<double> g(p);
      auto loss = g.sum(g.param("p"));
      g.forward({});
      const auto grads = g.backward(loss);
      CHECK(grads.at("p").storage() == std::vector<double>{1, 1});
      CHECK(grads.at("unused").storage() == std::vector<double>{0, 0, 0});
    }
    {
      Graph<double> g(p);
      auto pp = g.param("p");
      auto loss = g.sum(g.multiply(pp, pp));
      g.forward({});
      const auto grads = g.backward(loss);
      CHECK(grads.at("p").storage() == std::vector<double>{2, 4});
    }
  }

  TEST_CASE("lifecycle and shape errors") {
    NamedTensors<double> p;
    p.add("w", Tensor<double>({2, 3}));
    Graph<double> g(p);
    auto w = g.param("w");
    auto loss = g.sum(w);
    CHECK_THROWS_AS(g.backward(loss), StateError);
    CHECK_THROWS_AS(g.matmul(w, w), ShapeError);
    CHECK_THROWS_AS(g.add(w, g.constant(Tensor<double>({2}))), ShapeError);
    g.forward({});
    CHECK_THROWS_AS(g.backward(w), ShapeError);

    Graph<double> h(p);
    auto x = h.input("x", {2});
    h.output("y", h.scale(x, 2.0));
    ad::Inputs<double> bad;
    bad["x"] = Tensor<double>({3});
    CHECK_THROWS_AS(h.forward(bad), ShapeError);
    CHECK_THROWS(h.forward({}));
  }

  TEST_CASE("non-finite values are reported with the node") {
    NamedTensors<double> p;
    Graph<double> g(p);
    auto x = g.input("x", {2});
    g.output("y", g.scale(x, 1e300));
    g.output("z", g.multiply(g.scale(x, 1e300), g.scale(x, 1e300)));
    ad::Inputs<double> in;
    in["x"] = Tensor<double>({2}, {1e10, 1});
    try {
      g.forward(in);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("scale") != std::string::npos);
    }
  }

  TEST_CASE("grad_check rejects a zero step") {
    NamedTensors<double> p;
    p.add("w", Tensor<double>({2}, {1, 2}));
    Graph<double> g(p);
    auto loss = g.sum(g.param("w"));
    CHECK_THROWS_AS(ad::grad_check(g, p, loss, {}, 0.0), ParameterError);
  }

  TEST_CASE("affine graph is exact to roundoff") {
    // Central differences carry no truncation error on an affine map, so only roundoff is
    // left and it shrinks as the step grows.
    NamedTensors<double> p = random_params({{"w", {4, 3}}, {"b", {3}}}, 1);
    Rng rng(2);
    Graph<double> g(p);
    auto x = g.constant(random_tensor({5, 4}, rng));
    auto y = g.add(g.matmul(x, g.param("w")), g.param("b"));
    auto loss = g.sum(g.multiply(y, g.constant(random_tensor({5, 3}, rng))));
    const auto fine = ad::grad_check(g, p, loss, {}, 1e-5, 1e-6);
    CHECK(fine.max_relative_error < 1e-7);
    const auto coarse = ad::grad_check(g, p, loss, {}, 1e-2, 1e-6);
    CHECK(coarse.max_relative_error < 1e-9);
  }

  TEST_CASE("per-op finite differences") {
    SUBCASE("matmul shared") {
      expect_exact(check_op(random_params({{"a", {2, 3, 4}}, {"b", {4, 5}}}, 2),
                            [](Graph<double>& g) { return g.matmul(g.param("a"), g.param("b")); }));
    }
    SUBCASE("matmul batched") {
      expect_exact(check_op(random_params({{"a", {2, 3, 4}}, {"b", {2, 4, 5}}}, 3),
                            [](Graph<double>& g) { return g.matmul(g.param("a"), g.param("b")); }));
    }
    SUBCASE("add and multiply broadcast") {
      expect_exact(check_op(random_params({{"a", {2, 3, 4}}, {"b", {4}}, {"c", {3, 4}}}, 4),
                            [](Graph<double>& g) {
                              return g.multiply(g.add(g.param("a"), g.param("b")), g.param("c"));
                            }));
    }
    SUBCASE("scale transpose reshape") {
      expect_exact(check_op(random_params({{"a", {2, 3, 4}}}, 5), [](Graph<double>& g) {
        return g.reshape(g.transpose(g.scale(g.param("a"), -1.7), 0, 2), {6, 4});
      }));
    }
    SUBCASE("concat and gather") {
      expect_exact(check_op(random_params({{"a", {2, 3}}, {"b", {2, 2}}}, 6), [](Graph<double>& g) {
        const std::array<Var, 2> parts = {g.param("a"), g.param("b")};
        auto c = g.concat(parts, 1);
        return g.gather(c, {1, 0, 1});
      }));
    }
    SUBCASE("softmax") {
      expect_exact(check_op(random_params({{"a", {3, 5}}}, 7),
                            [](Graph<double>& g) { return g.softmax(g.scale(g.param("a"), 3.0)); }));
    }
    SUBCASE("layer norm") {
      expect_exact(check_op(random_params({{"a", {4, 6}}}, 8),
                            [](Graph<double>& g) { return g.layer_norm(g.param("a")); }));
    }
    SUBCASE("gelu") {
      expect_exact(check_op(random_params({{"a", {3, 7}}}, 9),
                            [](Graph<double>& g) { return g.gelu(g.scale(g.param("a"), 3.0)); }));
    }
    SUBCASE("relu away from the kink") {
      NamedTensors<double> p;
      Rng rng(10);
      Tensor<double> a({20});
      for (auto& v : a.values()) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 1.0);
      p.add("a", a);
      expect_exact(check_op(p, [](Graph<double>& g) { return g.relu(g.param("a")); }));
    }
    SUBCASE("reductions") {
      expect_exact(check_op(random_params({{"a", {3, 4, 5}}}, 11), [](Graph<double>& g) {
        auto a = g.param("a");
        const std::array<Var, 3> parts = {g.reduce_sum(a, 1), g.reduce_mean(a, 0),
                                          g.reduce_max(a, 2)};
        auto s = g.add(g.add(g.reshape(parts[0], {15}), g.reshape(g.sum(parts[1]), {})),
                       g.reshape(g.mean(parts[2]), {}));
        return s;
      }));
    }
    SUBCASE("chamfer") {
      expect_exact(check_op(random_params({{"a", {3, 6, 3}}, {"b", {3, 5, 3}}}, 12),
                            [](Graph<double>& g) { return g.chamfer(g.param("a"), g.param("b")); }));
    }
    SUBCASE("cross entropy") {
      expect_exact(check_op(random_params({{"a", {4, 3}}}, 13), [](Graph<double>& g) {
        return g.reshape(g.cross_entropy(g.param("a"), {0, 2, 1, 2}), {1});
      }));
    }
    SUBCASE("weighted sum") {
      expect_exact(check_op(random_params({{"a", {2, 2}}, {"b", {2, 2}}}, 14), [](Graph<double>& g) {
        const std::array<Var, 2> terms = {g.param("a"), g.multiply(g.param("b"), g.param("b"))};
        const std::array<double, 2> w = {0.3, 1.7};
        return g.weighted_sum(terms, w);
      }));
    }
    SUBCASE("attention") {
      expect_exact(check_op(random_params({{"q", {2, 5, 8}}, {"k", {2, 5, 8}}, {"v", {2, 5, 8}}}, 15),
                            [](Graph<double>& g) {
                              return ad::scaled_dot_product_attention(g, g.param("q"), g.param("k"),
                                                                      g.param("v"), 2);
                            }));
    }
  }

  TEST_CASE("gradients are bitwise deterministic") {
    auto p = random_params({{"a", {3, 4}}, {"b", {4, 4}}}, 20);
    auto run = [&] {
      Graph<double> g(p);
      auto h = g.gelu(g.matmul(g.param("a"), g.param("b")));
      auto loss = g.sum(g.softmax(g.multiply(h, h)));
      loss = g.mean(g.layer_norm(g.multiply(h, g.softmax(h))));
      g.forward({});
      return g.backward(loss);
    };
    const auto a = run();
    const auto b = run();
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::memcmp(a[i].value.data(), b[i].value.data(), a[i].value.numel() * sizeof(double)) == 0);
    }
  }

  TEST_CASE("float graphs run") {
    NamedTensors<float> p;
    p.add("w", Tensor<float>({2, 2}, {1, 2, 3, 4}));
    Graph<float> g(p);
    auto loss = g.sum(g.multiply(g.param("w"), g.param("w")));
    g.forward({});
    CHECK(g.backward(loss).at("w").storage() == std::vector<float>{2, 4, 6, 8});
  }
}
