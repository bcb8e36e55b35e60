#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fovea/image_ops.hpp"
#include "fovea/ops.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace fovea;
using testutil::grad_check;
using testutil::random_tensor;
using testutil::weighted_sum;

TEST_CASE("tensor invariants") {
  Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  CHECK(t.all_finite());
  t[0] = std::nanf("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  Rng rng(1);
  auto x = random_tensor<float>({2, 1, 5, 5}, rng);
  Tape<float> tape(false);
  Var<float> xv = tape.input(x);
  Tensor<float> w({1, 1, 1, 1});
  w[0] = 1.0f;
  Var<float> y = conv2d(xv, tape.constant(std::move(w)), 1L, 0L);
  for (long i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);
}

TEST_CASE("conv2d: 3x3 ones on 3x3 ones, padding 1 -> center 9") {
  Tape<float> tape(false);
  Var<float> x = tape.input(Tensor<float>({1, 1, 3, 3}, 1.0f));
  Var<float> w = tape.constant(Tensor<float>({1, 1, 3, 3}, 1.0f));
  Var<float> y = conv2d(x, w, 1L, 1L);
  CHECK(y.value().at(0, 0, 1, 1) == doctest::Approx(9.0f));
  CHECK(y.value().at(0, 0, 0, 0) == doctest::Approx(4.0f));
}

TEST_CASE("conv2d matches the nested-loop oracle on random shapes") {
  Rng rng(42);
  for (int trial = 0; trial < 8; ++trial) {
    Rng r = rng.substream(static_cast<uint64_t>(trial));
    const long B = r.uniform_int(1, 2), C = r.uniform_int(1, 3), Cout = r.uniform_int(1, 4);
    const long k = 2 * r.uniform_int(0, 1) + 1;
    const long stride = r.uniform_int(1, 2);
    long H = r.uniform_int(4, 9), W = r.uniform_int(4, 9);
    const long pad = (k - 1) / 2;
    // make the output size exact for the drawn stride
    H = ((H + 2 * pad - k) / stride) * stride + k - 2 * pad;
    W = ((W + 2 * pad - k) / stride) * stride + k - 2 * pad;
    auto x = random_tensor<double>({B, C, H, W}, r);
    auto w = random_tensor<double>({Cout, C, k, k}, r);
    Tape<double> tape(false);
    Var<double> y = conv2d(tape.input(x), tape.input(w), stride, pad);
    std::vector<double> ref = oracle::conv2d_ref(x.data, B, C, H, W, w.data, Cout, k, k, stride, pad);
    REQUIRE(static_cast<long>(ref.size()) == y.value().numel());
    for (size_t i = 0; i < ref.size(); ++i)
      CHECK(y.value()[static_cast<long>(i)] == doctest::Approx(ref[i]).epsilon(1e-10));
  }
}

TEST_CASE("conv2d rejects mismatched shapes") {
  Tape<float> tape(false);
  Var<float> x = tape.input(Tensor<float>({1, 2, 4, 4}));
  Var<float> w = tape.constant(Tensor<float>({1, 3, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, w, 1L, 1L), ShapeError);
  Var<float> weven = tape.constant(Tensor<float>({1, 2, 2, 2}));
  CHECK_THROWS_AS(conv2d(x, weven, 1L, 1L), ShapeError);
}

TEST_CASE("conv2d input gradient matches finite differences") {
  // 32-bit at h=1e-3 and 64-bit at h=1e-6, the declared tolerances
  Rng rng(7);
  auto xf = random_tensor<float>({1, 2, 8, 8}, rng);
  auto build_f = [](Tape<float>& t, Var<float> x) {
    Rng wr(3);
    auto w = random_tensor<float>({3, 2, 3, 3}, wr, -0.5, 0.5);
    return weighted_sum(t, conv2d(x, t.constant(std::move(w)), 1L, 1L));
  };
  CHECK(grad_check<float>(build_f, xf, 1e-3, 40, rng) < 1e-3);

  auto xd = random_tensor<double>({1, 2, 8, 8}, rng);
  auto build_d = [](Tape<double>& t, Var<double> x) {
    Rng wr(3);
    auto w = random_tensor<double>({3, 2, 3, 3}, wr, -0.5, 0.5);
    return weighted_sum(t, conv2d(x, t.constant(std::move(w)), 1L, 1L));
  };
  CHECK(grad_check<double>(build_d, xd, 1e-6, 40, rng) < 1e-6);
}

TEST_CASE("conv2d weight gradient matches finite differences") {
  Rng rng(9);
  auto x0 = random_tensor<double>({2, 2, 6, 6}, rng);
  auto w0 = random_tensor<double>({3, 2, 3, 3}, rng);
  Tape<double> tape;
  Var<double> x = tape.input(x0);
  Var<double> w = tape.input(w0, /*needs_grad=*/true);
  Var<double> loss = weighted_sum(tape, conv2d(x, w, 2L, 1L));
  tape.backward(loss);
  const Tensor<double>& analytic = tape.grad(w);
  auto f = [&](const std::vector<double>& wv) {
    Tensor<double> wt(w0.shape);
    for (long i = 0; i < wt.numel(); ++i) wt[i] = wv[static_cast<size_t>(i)];
    Tape<double> t2(false);
    return weighted_sum(t2, conv2d(t2.input(x0), t2.input(std::move(wt)), 2L, 1L)).value()[0];
  };
  std::vector<long> coords;
  for (long i = 0; i < w0.numel(); ++i) coords.push_back(i);
  auto fd = oracle::finite_diff(f, w0.data, coords, 1e-6);
  for (size_t i = 0; i < coords.size(); ++i)
    CHECK(fd[i] == doctest::Approx(analytic[coords[i]]).epsilon(1e-6));
}

TEST_CASE("relu values and backward") {
  Tape<float> tape;
  Var<float> x = tape.input(Tensor<float>({4}, {-1.5f, 2.0f, 0.0f, -0.1f}), true);
  Var<float> y = relu(x);
  CHECK(y.value()[0] == 0.0f);
  CHECK(y.value()[1] == 2.0f);
  Var<float> loss = weighted_sum(tape, y, 99);
  tape.backward(loss);
  CHECK(tape.grad(x)[0] == 0.0f);
  CHECK(tape.grad(x)[1] != 0.0f);
}

TEST_CASE("mean over logit tensors") {
  Tape<float> tape(false);
  Var<float> a = tape.input(Tensor<float>({1, 2}, {1.0f, 0.0f}));
  Var<float> b = tape.input(Tensor<float>({1, 2}, {0.0f, 1.0f}));
  Var<float> m = mean_of<float>({a, b});
  CHECK(m.value()[0] == doctest::Approx(0.5f));
  CHECK(m.value()[1] == doctest::Approx(0.5f));
}

TEST_CASE("dropout zeroes about rate fraction and scales survivors") {
  Rng rng(2024);
  Tape<float> tape(false);
  Tensor<float> ones({1000}, 1.0f);
  Var<float> x = tape.input(ones);
  Var<float> y = dropout(x, 0.75, rng);
  long zeroed = 0;
  for (long i = 0; i < 1000; ++i) {
    if (y.value()[i] == 0.0f)
      ++zeroed;
    else
      CHECK(y.value()[i] == doctest::Approx(4.0f));
  }
  CHECK(oracle::binomial_within(zeroed, 1000, 0.75, 50.0));
}

TEST_CASE("concat rejects mismatched non-concat dims") {
  Tape<float> tape(false);
  Var<float> a = tape.input(Tensor<float>({2, 3, 4, 4}));
  Var<float> b = tape.input(Tensor<float>({2, 5, 4, 4}));
  Var<float> c = tape.input(Tensor<float>({2, 3, 5, 4}));
  CHECK(concat<float>({a, b}).value().dim(1) == 8);
  CHECK_THROWS_AS(concat<float>({a, c}), ShapeError);
}

TEST_CASE("batch_norm eval mode is a deterministic affine map") {
  Rng rng(5);
  auto x = random_tensor<float>({2, 3, 4, 4}, rng);
  BnStats<float> stats(3);
  stats.mean = Tensor<float>({3}, {0.1f, -0.2f, 0.3f});
  stats.var = Tensor<float>({3}, {1.0f, 0.5f, 2.0f});
  Param<float> gamma("g", Tensor<float>({3}, 1.5f));
  Param<float> beta("b", Tensor<float>({3}, 0.25f));
  Tape<float> t1(false), t2(false);
  Var<float> y1 = batch_norm(t1.input(x), t1.param(gamma), t1.param(beta), stats, false);
  Var<float> y2 = batch_norm(t2.input(x), t2.param(gamma), t2.param(beta), stats, false);
  for (long i = 0; i < y1.value().numel(); ++i) CHECK(y1.value()[i] == y2.value()[i]);
  const float inv = 1.0f / std::sqrt(1.0f + 1e-5f);
  CHECK(y1.value().at(0, 0, 0, 0) ==
        doctest::Approx(1.5f * (x.at(0, 0, 0, 0) - 0.1f) * inv + 0.25f));
}

TEST_CASE("batch_norm training-mode gradient matches finite differences") {
  Rng rng(11);
  auto x0 = random_tensor<double>({3, 2, 4, 4}, rng);
  auto build = [](Tape<double>& t, Var<double> x) {
    static Param<double> gamma("g", Tensor<double>({2}, {1.2, 0.8}));
    static Param<double> beta("b", Tensor<double>({2}, {0.1, -0.1}));
    BnStats<double> stats(2);  // fresh stats; updates don't affect the output
    return weighted_sum(t, batch_norm(x, t.constant(gamma.value), t.constant(beta.value), stats,
                                      /*training=*/true));
  };
  CHECK(grad_check<double>(build, x0, 1e-6, 64, rng) < 1e-6);
}

TEST_CASE("dense gradient matches finite differences") {
  Rng rng(13);
  auto x0 = random_tensor<double>({4, 6}, rng);
  auto build = [](Tape<double>& t, Var<double> x) {
    Rng wr(5);
    auto w = random_tensor<double>({3, 6}, wr);
    auto b = random_tensor<double>({3}, wr);
    return weighted_sum(t, dense(x, t.constant(std::move(w)), t.constant(std::move(b))));
  };
  CHECK(grad_check<double>(build, x0, 1e-6, 24, rng) < 1e-6);
}

TEST_CASE("softmax_cross_entropy values") {
  Tape<float> tape(false);
  Var<float> uniform = tape.input(Tensor<float>({1, 10}, 0.0f));
  CHECK(softmax_cross_entropy(uniform, std::vector<long>{3}).value()[0] ==
        doctest::Approx(std::log(10.0)).epsilon(1e-6));
  Tensor<float> sat({1, 4}, 0.0f);
  sat[2] = 1000.0f;
  Var<float> satv = tape.input(sat);
  CHECK(softmax_cross_entropy(satv, std::vector<long>{2}).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-6));
  CHECK_THROWS_AS(softmax_cross_entropy(satv, std::vector<long>{4}), ShapeError);
}

TEST_CASE("softmax_cross_entropy gradient matches finite differences") {
  Rng rng(17);
  auto x0 = random_tensor<double>({4, 10}, rng);
  auto build = [](Tape<double>& t, Var<double> x) {
    return softmax_cross_entropy(x, std::vector<long>{1, 4, 9, 0});
  };
  CHECK(grad_check<double>(build, x0, 1e-6, 40, rng) < 1e-6);
  auto xf = random_tensor<float>({4, 10}, rng);
  auto build_f = [](Tape<float>& t, Var<float> x) {
    return softmax_cross_entropy(x, std::vector<long>{1, 4, 9, 0});
  };
  CHECK(grad_check<float>(build_f, xf, 1e-3, 40, rng) < 1e-3);
}

TEST_CASE("backward: sum gives ones, half sum of squares gives x") {
  Tape<double> tape;
  Var<double> x = tape.input(Tensor<double>({3}, {1.0, 2.0, 3.0}), true);
  const int xid = x.id;
  // loss = sum(x)
  double s = 0;
  for (long i = 0; i < 3; ++i) s += x.value()[i];
  Var<double> loss = tape.emit(Tensor<double>::scalar(s), true, [xid](Tape<double>& tp, int out) {
    for (long i = 0; i < 3; ++i) tp.grad_slot(xid)[i] += tp.grad_slot(out)[0];
  });
  tape.backward(loss);
  for (long i = 0; i < 3; ++i) CHECK(tape.grad(x)[i] == 1.0);

  Tape<double> tape2;
  Var<double> x2 = tape2.input(Tensor<double>({3}, {1.0, 2.0, 3.0}), true);
  const int x2id = x2.id;
  double q = 0;
  for (long i = 0; i < 3; ++i) q += 0.5 * x2.value()[i] * x2.value()[i];
  Var<double> loss2 =
      tape2.emit(Tensor<double>::scalar(q), true, [x2id](Tape<double>& tp, int out) {
        const Tensor<double>& xv = tp.value(x2id);
        for (long i = 0; i < 3; ++i) tp.grad_slot(x2id)[i] += tp.grad_slot(out)[0] * xv[i];
      });
  tape2.backward(loss2);
  CHECK(tape2.grad(x2)[0] == 1.0);
  CHECK(tape2.grad(x2)[1] == 2.0);
  CHECK(tape2.grad(x2)[2] == 3.0);

  CHECK_THROWS_AS(tape2.backward(x2), ShapeError);  // non-scalar loss rejected
}

TEST_CASE("grid_sample: identity grid is the identity map") {
  Rng rng(23);
  auto x = random_tensor<float>({2, 3, 6, 7}, rng);
  Tape<float> tape(false);
  auto grid = std::make_shared<SamplingGrid>(SamplingGrid::identity(6, 7));
  Var<float> y = grid_sample_bilinear(tape.input(x), grid);
  for (long i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);
}

TEST_CASE("grid_sample: out-of-range coordinates clamp to the border") {
  Rng rng(29);
  auto x = random_tensor<float>({1, 1, 4, 4}, rng);
  Tape<float> tape(false);
  auto grid = std::make_shared<SamplingGrid>(4, 4);
  for (auto& v : grid->row) v = -5.0;
  for (auto& v : grid->col) v = -5.0;
  Var<float> y = grid_sample_bilinear(tape.input(x), grid);
  for (long i = 0; i < 16; ++i) CHECK(y.value()[i] == x.at(0, 0, 0, 0));
}

TEST_CASE("grid_sample: half-pixel sample interpolates the 4 neighbors") {
  Tape<float> tape(false);
  Tensor<float> img({1, 1, 2, 2}, {0.0f, 1.0f, 2.0f, 3.0f});
  auto grid = std::make_shared<SamplingGrid>(1, 1);
  grid->row[0] = 0.5;
  grid->col[0] = 0.5;
  Var<float> y = grid_sample_bilinear(tape.input(img), grid);
  CHECK(y.value()[0] == doctest::Approx(1.5f));
}

TEST_CASE("grid_sample gradient matches finite differences") {
  Rng rng(31);
  auto x0 = random_tensor<double>({1, 2, 6, 6}, rng);
  auto build = [](Tape<double>& t, Var<double> x) {
    auto g = std::make_shared<SamplingGrid>(5, 5);
    Rng gr(77);
    for (long i = 0; i < 25; ++i) {
      g->row[static_cast<size_t>(i)] = gr.uniform(-1.0, 6.5);
      g->col[static_cast<size_t>(i)] = gr.uniform(-1.0, 6.5);
    }
    return weighted_sum(t, grid_sample_bilinear(x, g));
  };
  CHECK(grad_check<double>(build, x0, 1e-6, 72, rng) < 1e-6);
}

TEST_CASE("gaussian blur: constant image unchanged, impulse matches dense oracle") {
  Tape<float> tape(false);
  Var<float> c = tape.input(Tensor<float>({1, 1, 9, 9}, 0.6f));
  Var<float> cb = gaussian_blur(c, 1.7);
  for (long i = 0; i < 81; ++i) CHECK(cb.value()[i] == doctest::Approx(0.6f).epsilon(1e-6));

  Tensor<double> impulse({1, 1, 15, 15}, 0.0);
  impulse.at(0, 0, 7, 7) = 1.0;
  Tape<double> dtape(false);
  Var<double> y = gaussian_blur(dtape.input(impulse), 1.0);
  auto ref = oracle::gaussian_blur_ref(impulse.data, 15, 15, 1.0);
  double sum = 0.0;
  for (long i = 0; i < 225; ++i) {
    CHECK(y.value()[i] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-9));
    sum += y.value()[i];
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-4));  // interior-supported impulse
}

TEST_CASE("gaussian blur gradient matches finite differences") {
  Rng rng(37);
  auto x0 = random_tensor<double>({1, 1, 8, 8}, rng);
  auto build = [](Tape<double>& t, Var<double> x) {
    return weighted_sum(t, gaussian_blur(x, 1.3));
  };
  CHECK(grad_check<double>(build, x0, 1e-6, 64, rng) < 1e-6);
}

TEST_CASE("avg_pool, crop, gap gradients match finite differences") {
  Rng rng(41);
  auto x0 = random_tensor<double>({2, 2, 8, 8}, rng);
  auto build_pool = [](Tape<double>& t, Var<double> x) {
    return weighted_sum(t, avg_pool(x, 2L));
  };
  CHECK(grad_check<double>(build_pool, x0, 1e-6, 48, rng) < 1e-6);
  auto build_crop = [](Tape<double>& t, Var<double> x) {
    return weighted_sum(t, crop(x, 1L, 2L, 4L, 5L));
  };
  CHECK(grad_check<double>(build_crop, x0, 1e-6, 48, rng) < 1e-6);
  auto build_gap = [](Tape<double>& t, Var<double> x) {
    return weighted_sum(t, global_average_pool(x));
  };
  CHECK(grad_check<double>(build_gap, x0, 1e-6, 48, rng) < 1e-6);
}

TEST_CASE("softmax, mean_of, max_of gradients match finite differences") {
  Rng rng(43);
  auto x0 = random_tensor<double>({3, 7}, rng);
  auto build_sm = [](Tape<double>& t, Var<double> x) { return weighted_sum(t, softmax(x)); };
  CHECK(grad_check<double>(build_sm, x0, 1e-6, 21, rng) < 1e-6);

  auto build_mean = [](Tape<double>& t, Var<double> x) {
    Rng or_(91);
    auto o = testutil::random_tensor<double>({3, 7}, or_);
    return weighted_sum(t, mean_of<double>({x, t.constant(std::move(o)), x}));
  };
  CHECK(grad_check<double>(build_mean, x0, 1e-6, 21, rng) < 1e-6);

  auto build_max = [](Tape<double>& t, Var<double> x) {
    Rng or_(92);
    auto o = testutil::random_tensor<double>({3, 7}, or_);
    return weighted_sum(t, max_of<double>({x, t.constant(std::move(o))}));
  };
  CHECK(grad_check<double>(build_max, x0, 1e-6, 21, rng) < 1e-6);
}

TEST_CASE("per-op float gradients across 20 seeds stay within 1e-3") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 1000);
    auto x0 = random_tensor<float>({1, 2, 6, 6}, rng);
    auto build = [seed](Tape<float>& t, Var<float> x) {
      Rng wr(seed);
      auto w = testutil::random_tensor<float>({2, 2, 3, 3}, wr, -0.4, 0.4);
      Var<float> y = conv2d(x, t.constant(std::move(w)), 1L, 1L);
      y = avg_pool(y, 2L);
      return weighted_sum(t, y, seed);
    };
    CHECK(grad_check<float>(build, x0, 1e-3, 24, rng) < 1e-3);
  }
}

TEST_CASE("forward evaluation is bit-deterministic") {
  Rng rng(59);
  auto x = random_tensor<float>({2, 3, 8, 8}, rng);
  auto w = random_tensor<float>({4, 3, 3, 3}, rng);
  std::vector<float> first;
  for (int run = 0; run < 2; ++run) {
    Tape<float> tape(false);
    Var<float> y = conv2d(tape.input(x), tape.input(w), 1L, 1L);
    y = relu(y);
    y = global_average_pool(y);
    if (run == 0) {
      first.assign(y.value().data.begin(), y.value().data.end());
    } else {
      for (long i = 0; i < y.value().numel(); ++i) CHECK(y.value()[i] == first[static_cast<size_t>(i)]);
    }
  }
}
