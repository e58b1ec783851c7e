#include "doctest.h"

#include <cmath>

#include "smoltolk/gradcheck.hpp"
#include "smoltolk/rng.hpp"
#include "smoltolk/tensor.hpp"

using namespace smoltolk;

namespace {

Tensor<double> randn(Shape shape, Rng& rng, bool rg = true) {
  auto t = Tensor<double>::zeros(std::move(shape), rg);
  for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * 0.7;
  return t;
}

}  // namespace

TEST_CASE("softmax of an all-equal row is uniform") {
  const i64 L = 7;
  auto x = Tensor<double>::full({2, L}, 3.25);
  auto p = softmax_lastdim(x);
  for (i64 i = 0; i < p.numel(); ++i) CHECK(p.data()[i] == doctest::Approx(1.0 / L).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(11);
  auto x = randn({9, 23}, rng, false);
  auto p = softmax_lastdim(x);
  for (i64 r = 0; r < 9; ++r) {
    double s = 0;
    for (i64 c = 0; c < 23; ++c) s += p.data()[r * 23 + c];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  // float path within its own tolerance
  auto xf = Tensor<float>::zeros({4, 33});
  Rng rf(5);
  for (i64 i = 0; i < xf.numel(); ++i) xf.data()[i] = static_cast<float>(rf.normal());
  auto pf = softmax_lastdim(xf);
  for (i64 r = 0; r < 4; ++r) {
    float s = 0;
    for (i64 c = 0; c < 33; ++c) s += pf.data()[r * 33 + c];
    CHECK(std::abs(s - 1.0f) < 1e-6f);
  }
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  const i64 V = 41;
  auto logits = Tensor<double>::full({3, V}, 0.0);
  auto nll = cross_entropy_rows(logits, {0, 7, 40});
  for (i64 r = 0; r < 3; ++r) CHECK(nll.data()[r] == doctest::Approx(std::log(double(V))).epsilon(1e-12));
}

TEST_CASE("cross entropy of near-one-hot logits approaches zero") {
  const i64 V = 11;
  auto logits = Tensor<double>::zeros({1, V});
  logits.data()[3] = 50.0;
  auto nll = cross_entropy_rows(logits, {3});
  CHECK(nll.item() < 1e-12);
}

TEST_CASE("matmul against identity returns the input") {
  Rng rng(2);
  auto a = randn({5, 5}, rng, false);
  auto eye = Tensor<double>::zeros({5, 5});
  for (i64 i = 0; i < 5; ++i) eye.data()[i * 5 + i] = 1.0;
  auto out = matmul(eye, a);
  for (i64 i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == a.data()[i]);
}

TEST_CASE("rmsnorm pre-gain rows have unit mean square") {
  Rng rng(3);
  auto x = randn({6, 32}, rng, false);
  auto gain = Tensor<double>::full({32}, 1.0);
  auto y = rmsnorm(x, gain, 1e-12);
  for (i64 r = 0; r < 6; ++r) {
    double ms = 0;
    for (i64 c = 0; c < 32; ++c) ms += y.data()[r * 32 + c] * y.data()[r * 32 + c];
    ms /= 32.0;
    CHECK(ms == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("quadratic toy gradient is exact") {
  auto x = Tensor<double>::from_data({1}, {3.0}, true);
  auto f = [&] { return mul(x, x); };
  auto rep = grad_check<double>([&] { return sum_all(f()); }, {x}, 1, 1e-5, 0);
  CHECK(rep.ok(1e-8));
  x.zero_grad();
  auto loss = sum_all(f());
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("frozen tensors keep an exactly zero gradient buffer") {
  Rng rng(4);
  auto a = randn({4, 4}, rng, true);
  auto b = randn({4, 4}, rng, false);  // frozen
  auto loss = sum_all(matmul(a, b));
  loss.backward();
  CHECK(a.has_grad());
  for (i64 i = 0; i < b.numel(); ++i) CHECK(b.grad()[i] == 0.0);
}

TEST_CASE("gradients match central differences for every op") {
  Rng rng(7);

  SUBCASE("add same-shape, broadcast row, scalar") {
    auto a = randn({3, 5}, rng);
    auto b = randn({3, 5}, rng);
    auto row = randn({5}, rng);
    auto c = randn({1}, rng);
    auto loss = [&] { return sum_all(mul(add(add(a, b), row), add(a, c))); };
    CHECK(grad_check<double>(loss, {a, b, row, c}, 64, 1e-5, 1).ok(1e-6));
  }

  SUBCASE("matmul chain") {
    auto a = randn({4, 6}, rng);
    auto b = randn({6, 3}, rng);
    auto loss = [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); };
    CHECK(grad_check<double>(loss, {a, b}, 42, 1e-5, 2).ok(1e-6));
  }

  SUBCASE("silu, xlogx, scale") {
    auto a = randn({2, 9}, rng);
    auto p = softmax_lastdim(randn({2, 9}, rng));
    auto loss = [&] { return sum_all(add(silu(a), scale(xlogx(softmax_lastdim(a)), 0.3))); };
    CHECK(grad_check<double>(loss, {a}, 18, 1e-5, 3).ok(1e-6));
    (void)p;
  }

  SUBCASE("softmax and cross entropy") {
    auto a = randn({5, 7}, rng);
    std::vector<i32> t = {0, 3, 6, 2, 2};
    auto loss = [&] { return mean_all(cross_entropy_rows(a, t)); };
    CHECK(grad_check<double>(loss, {a}, 35, 1e-5, 4).ok(1e-6));
    auto loss2 = [&] { return sum_all(mul(softmax_lastdim(a), a)); };
    CHECK(grad_check<double>(loss2, {a}, 35, 1e-5, 5).ok(1e-6));
  }

  SUBCASE("rmsnorm") {
    auto x = randn({4, 8}, rng);
    auto g = randn({8}, rng);
    auto loss = [&] { return sum_all(mul(rmsnorm(x, g), rmsnorm(x, g))); };
    CHECK(grad_check<double>(loss, {x, g}, 40, 1e-5, 6).ok(1e-6));
  }

  SUBCASE("embedding lookup across both tables") {
    auto lo = randn({5, 4}, rng);
    auto hi = randn({3, 4}, rng);
    std::vector<i32> ids = {0, 4, 5, 7, 1, 4};
    auto loss = [&] {
      auto e = embedding_lookup(lo, hi, ids);
      return sum_all(mul(e, e));
    };
    CHECK(grad_check<double>(loss, {lo, hi}, 32, 1e-5, 7).ok(1e-6));
  }

  SUBCASE("gather and overwrite rows") {
    auto x = randn({6, 3}, rng);
    auto y = randn({2, 3}, rng);
    std::vector<i64> gi = {1, 4, 4, 0};
    std::vector<i64> oi = {2, 5};
    auto loss = [&] {
      auto g = gather_rows(x, gi);
      auto o = overwrite_rows(x, y, oi);
      return add(sum_all(mul(g, g)), sum_all(mul(o, o)));
    };
    CHECK(grad_check<double>(loss, {x, y}, 24, 1e-5, 8).ok(1e-6));
  }

  SUBCASE("rotary apply") {
    auto x = randn({5, 8}, rng);  // two heads of dim 4
    std::vector<i32> pos = {0, 1, 2, 5, 9};
    auto loss = [&] {
      auto r = rotary_apply(x, pos, 4, 100.0);
      return sum_all(mul(r, r));
    };
    CHECK(grad_check<double>(loss, {x}, 40, 1e-5, 9).ok(1e-6));
  }

  SUBCASE("segmented causal attention incl. grouped kv heads") {
    const i64 n = 7;
    auto q = randn({n, 8}, rng);  // 4 heads of dim 2
    auto k = randn({n, 4}, rng);  // 2 kv heads
    auto v = randn({n, 4}, rng);
    Segments segs = {{0, 3}, {3, 7}};
    auto loss = [&] {
      auto o = segmented_causal_attention(q, k, v, segs, 4, 2);
      return sum_all(mul(o, o));
    };
    CHECK(grad_check<double>(loss, {q, k, v}, 100, 1e-5, 10).ok(1e-6));
  }

  SUBCASE("weighted layer sum, static and dynamic weights") {
    std::vector<Tensor<double>> layers = {randn({4, 5}, rng), randn({4, 5}, rng), randn({4, 5}, rng)};
    auto ws = randn({3}, rng);
    auto wd = randn({4, 3}, rng);
    auto loss = [&] {
      auto a = weighted_layer_sum(layers, ws);
      auto b = weighted_layer_sum(layers, softmax_lastdim(wd));
      return sum_all(mul(add(a, b), add(a, b)));
    };
    CHECK(grad_check<double>(loss, {layers[0], layers[1], layers[2], ws, wd}, 97, 1e-5, 11).ok(1e-6));
  }

  SUBCASE("concat cols") {
    auto a = randn({3, 2}, rng);
    auto b = randn({3, 4}, rng);
    auto loss = [&] {
      auto c = concat_cols(a, b);
      return sum_all(mul(c, c));
    };
    CHECK(grad_check<double>(loss, {a, b}, 18, 1e-5, 12).ok(1e-6));
  }
}

TEST_CASE("weighted layer sum matches a direct summation oracle") {
  Rng rng(21);
  const i64 L = 4, n = 6, d = 5;
  std::vector<Tensor<double>> layers;
  for (i64 l = 0; l < L; ++l) layers.push_back(randn({n, d}, rng, false));
  auto w = softmax_lastdim(randn({n, L}, rng, false));
  auto out = weighted_layer_sum(layers, w);
  for (i64 i = 0; i < n; ++i)
    for (i64 c = 0; c < d; ++c) {
      double acc = 0;
      for (i64 l = 0; l < L; ++l) acc += w.data()[i * L + l] * layers[size_t(l)].data()[i * d + c];
      CHECK(out.data()[i * d + c] == doctest::Approx(acc).epsilon(1e-9));
    }
}

TEST_CASE("attention with a single position reduces to the value path") {
  Rng rng(9);
  auto q = randn({1, 6}, rng, false);
  auto k = randn({1, 6}, rng, false);
  auto v = randn({1, 6}, rng, false);
  auto o = segmented_causal_attention(q, k, v, {{0, 1}}, 2, 2);
  for (i64 i = 0; i < 6; ++i) CHECK(o.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-12));
}

TEST_CASE("rows outside every attention segment produce zero output") {
  Rng rng(10);
  auto q = randn({5, 4}, rng, false);
  auto k = randn({5, 4}, rng, false);
  auto v = randn({5, 4}, rng, false);
  auto o = segmented_causal_attention(q, k, v, {{0, 2}, {3, 5}}, 2, 2);
  for (i64 c = 0; c < 4; ++c) CHECK(o.data()[2 * 4 + c] == 0.0);
}

TEST_CASE("shape errors report both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 5});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("(2,3)"), ShapeError);
  CHECK_THROWS_WITH_AS(mul(a, b), doctest::Contains("(4,5)"), ShapeError);
}

TEST_CASE("no-grad mode builds no graph") {
  Rng rng(12);
  auto a = randn({3, 3}, rng, true);
  NoGradGuard ng;
  auto out = matmul(a, a);
  CHECK_FALSE(out.requires_grad());
  CHECK(out.node()->parents.empty());
}

TEST_CASE("results are bit-identical across thread counts") {
  Rng rng(13);
  auto build = [&](int threads) {
    set_thread_count(threads);
    Rng r(99);
    auto q = Tensor<float>::zeros({64, 32}, true);
    auto k = Tensor<float>::zeros({64, 32});
    auto v = Tensor<float>::zeros({64, 32});
    auto w = Tensor<float>::zeros({32, 48});
    for (auto* t : {&q, &k, &v, &w})
      for (i64 i = 0; i < t->numel(); ++i) t->data()[i] = static_cast<float>(r.normal());
    auto att = segmented_causal_attention(q, k, v, {{0, 40}, {40, 64}}, 4, 4);
    auto y = matmul(att, w);
    auto loss = mean_all(mul(y, y));
    loss.backward();
    std::vector<float> bits(y.data(), y.data() + y.numel());
    bits.insert(bits.end(), q.grad(), q.grad() + q.numel());
    bits.push_back(loss.item());
    return bits;
  };
  auto a = build(1);
  auto b = build(2);
  auto c = build(4);
  set_thread_count(0);
  CHECK(a == b);
  CHECK(a == c);
}
