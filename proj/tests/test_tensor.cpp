#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "sstn/checkpoint.hpp"
#include "sstn/tensor.hpp"
#include "testutil.hpp"

using namespace sstn;
using DT = TensorT<double>;

TEST_CASE("matmul identity and hand arithmetic") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  for (long i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

  auto a = Tensor::from_data({1, 2}, {1, 2});
  auto b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Tensor::zeros({3, 4});
  auto b = Tensor::zeros({5, 2});
  CHECK_THROWS_MATCHES(matmul(a, b), DimensionError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("[3,4]") &&
                           Catch::Matchers::ContainsSubstring("[5,2]")));
}

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(7);
  auto a = DT::uniform({3, 4}, -1, 1, rng, true);
  auto b = DT::uniform({4, 2}, -1, 1, rng, true);
  auto w = DT::uniform({3, 2}, -1, 1, rng);  // weights make the loss generic

  auto loss = [&] { return sum(mul(matmul(a, b), w)).item(); };
  {
    auto l = sum(mul(matmul(a, b), w));
    l.backward();
  }
  CHECK(testutil::max_rel_err(testutil::finite_diff(a, loss),
                              testutil::grad_as_double(a)) < 1e-5);
  CHECK(testutil::max_rel_err(testutil::finite_diff(b, loss),
                              testutil::grad_as_double(b)) < 1e-5);
}

TEST_CASE("conv2d identity kernel and hand arithmetic") {
  auto img = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = Tensor::from_data({1, 1, 1, 1}, {1});
  auto bias = Tensor::zeros({1});
  auto out = conv2d(img, k, bias);
  REQUIRE(out.shape() == Shape{1, 1, 3, 3});
  for (long i = 0; i < 9; ++i) CHECK(out.data()[i] == img.data()[i]);

  auto ones_img = Tensor::filled({1, 1, 2, 2}, 1.0f);
  auto ones_k = Tensor::filled({1, 1, 2, 2}, 1.0f);
  CHECK(conv2d(ones_img, ones_k, bias).item() == 4.0f);
}

TEST_CASE("conv2d rejects oversized kernels") {
  auto img = Tensor::zeros({1, 1, 3, 3});
  auto k = Tensor::zeros({1, 1, 4, 4});
  auto bias = Tensor::zeros({1});
  CHECK_THROWS_AS(conv2d(img, k, bias), DimensionError);
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(11);
  auto img = DT::uniform({2, 3, 8, 8}, -1, 1, rng, true);
  auto k = DT::uniform({4, 3, 3, 3}, -0.5, 0.5, rng, true);
  auto bias = DT::uniform({4}, -0.5, 0.5, rng, true);
  auto w = DT::uniform({2, 4, 6, 6}, -1, 1, rng);

  auto loss = [&] { return sum(mul(conv2d(img, k, bias), w)).item(); };
  {
    auto l = sum(mul(conv2d(img, k, bias), w));
    l.backward();
  }
  CHECK(testutil::max_rel_err(testutil::finite_diff(img, loss),
                              testutil::grad_as_double(img)) < 1e-4);
  CHECK(testutil::max_rel_err(testutil::finite_diff(k, loss),
                              testutil::grad_as_double(k)) < 1e-4);
  CHECK(testutil::max_rel_err(testutil::finite_diff(bias, loss),
                              testutil::grad_as_double(bias)) < 1e-4);
}

TEST_CASE("maxpool2 basics and tie-breaking") {
  auto img = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(maxpool2(img).item() == 4.0f);
  CHECK_THROWS_AS(maxpool2(Tensor::zeros({1, 1, 3, 4})), DimensionError);

  // constant image: gradient routed to the first cell of each window
  auto flat = Tensor::filled({1, 1, 4, 4}, 2.0f, true);
  auto out = sum(maxpool2(flat));
  CHECK(out.item() == 8.0f);
  out.backward();
  auto g = flat.grad();
  for (long i = 0; i < 4; ++i)
    for (long j = 0; j < 4; ++j)
      CHECK(g[i * 4 + j] == ((i % 2 == 0 && j % 2 == 0) ? 1.0f : 0.0f));
}

TEST_CASE("maxpool2 gradients match finite differences") {
  std::mt19937_64 rng(3);
  // distinct values keep the probe away from ties
  std::vector<double> vals(16);
  for (int i = 0; i < 16; ++i) vals[i] = i * 0.37 + ((i * 7) % 5) * 0.011;
  auto img = DT::from_data({1, 1, 4, 4}, vals, true);
  auto w = DT::uniform({1, 1, 2, 2}, -1, 1, rng);
  auto loss = [&] { return sum(mul(maxpool2(img), w)).item(); };
  {
    auto l = sum(mul(maxpool2(img), w));
    l.backward();
  }
  CHECK(testutil::max_rel_err(testutil::finite_diff(img, loss, 1e-4),
                              testutil::grad_as_double(img)) < 1e-5);
}

TEST_CASE("activation values") {
  auto x = Tensor::from_data({2}, {-1, 2});
  auto r = relu(x);
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[1] == 2.0f);

  auto z = Tensor::zeros({1, 10});
  auto sm = softmax_lastdim(z);
  for (int i = 0; i < 10; ++i) CHECK_THAT(sm.data()[i], Catch::Matchers::WithinAbs(0.1, 1e-7));
}

TEST_CASE("softmax rows sum to one and stay non-negative") {
  std::mt19937_64 rng(5);
  auto x = Tensor::uniform({7, 10}, -30, 30, rng);
  auto sm = softmax_lastdim(x);
  for (int r = 0; r < 7; ++r) {
    double s = 0;
    for (int j = 0; j < 10; ++j) {
      CHECK(sm.at({r, j}) >= 0.0f);
      s += sm.at({r, j});
    }
    CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }
}

TEST_CASE("activation gradients match finite differences") {
  std::mt19937_64 rng(13);
  for (auto kind : {Activation::Relu, Activation::Sigmoid, Activation::Tanh,
                    Activation::SoftmaxLastDim}) {
    auto x = DT::uniform({3, 6}, -2, 2, rng, true);
    if (kind == Activation::Relu)  // keep probes away from the kink at 0
      for (long i = 0; i < x.size(); ++i)
        if (std::abs(x.data()[i]) < 5e-3) x.data()[i] = 0.1;
    auto w = DT::uniform({3, 6}, -1, 1, rng);
    auto loss = [&] { return sum(mul(activate(x, kind), w)).item(); };
    {
      auto l = sum(mul(activate(x, kind), w));
      l.backward();
    }
    CHECK(testutil::max_rel_err(testutil::finite_diff(x, loss),
                                testutil::grad_as_double(x)) < 1e-5);
  }
}

TEST_CASE("cross entropy values") {
  auto logits = Tensor::zeros({1, 10});
  CHECK_THAT(cross_entropy(logits, {3}).item(),
             Catch::Matchers::WithinAbs(std::log(10.0), 1e-6));

  auto sharp = Tensor::zeros({1, 10});
  sharp.data()[4] = 100.0f;
  CHECK(cross_entropy(sharp, {4}).item() < 1e-6);

  CHECK_THROWS_AS(cross_entropy(logits, {10}), IndexError);
  CHECK_THROWS_AS(cross_entropy(logits, {-1}), IndexError);
}

TEST_CASE("cross entropy gradients match finite differences") {
  std::mt19937_64 rng(17);
  auto logits = DT::uniform({4, 10}, -2, 2, rng, true);
  std::vector<int> labels = {1, 0, 9, 4};
  auto loss = [&] { return cross_entropy(logits, labels).item(); };
  {
    auto l = cross_entropy(logits, labels);
    l.backward();
  }
  CHECK(testutil::max_rel_err(testutil::finite_diff(logits, loss),
                              testutil::grad_as_double(logits)) < 1e-5);
}

TEST_CASE("lstm_step forced values at zero weights") {
  long b = 2, in = 3, hid = 4;
  LstmWeights<float> w{Tensor::zeros({in, 4 * hid}), Tensor::zeros({hid, 4 * hid}),
                       Tensor::zeros({4 * hid})};
  auto x = Tensor::zeros({b, in});
  auto h = Tensor::zeros({b, hid});
  auto c0 = Tensor::zeros({b, hid});
  auto [h1, c1] = lstm_step(x, h, c0, w);
  for (long i = 0; i < b * hid; ++i) {
    CHECK(c1.data()[i] == 0.0f);
    CHECK(h1.data()[i] == 0.0f);
  }

  auto cones = Tensor::filled({b, hid}, 1.0f);
  auto [h2, c2] = lstm_step(x, h, cones, w);
  for (long i = 0; i < b * hid; ++i) {
    CHECK_THAT(c2.data()[i], Catch::Matchers::WithinAbs(0.5, 1e-7));
    CHECK_THAT(h2.data()[i],
               Catch::Matchers::WithinAbs(0.5 * std::tanh(0.5), 1e-6));
  }
}

TEST_CASE("lstm_step unrolled gradients match finite differences") {
  std::mt19937_64 rng(23);
  long b = 2, in = 3, hid = 4;
  LstmWeights<double> w{DT::uniform({in, 4 * hid}, -0.5, 0.5, rng, true),
                        DT::uniform({hid, 4 * hid}, -0.5, 0.5, rng, true),
                        DT::uniform({4 * hid}, -0.5, 0.5, rng, true)};
  std::vector<DT> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(DT::uniform({b, in}, -1, 1, rng, true));
  auto wsum = DT::uniform({b, hid}, -1, 1, rng);

  auto forward = [&] {
    auto h = DT::zeros({b, hid});
    auto c = DT::zeros({b, hid});
    for (int t = 0; t < 3; ++t) {
      auto [hn, cn] = lstm_step(xs[t], h, c, w);
      h = hn;
      c = cn;
    }
    return sum(mul(h, wsum)).item();
  };
  {
    auto h = DT::zeros({b, hid});
    auto c = DT::zeros({b, hid});
    for (int t = 0; t < 3; ++t) {
      auto [hn, cn] = lstm_step(xs[t], h, c, w);
      h = hn;
      c = cn;
    }
    sum(mul(h, wsum)).backward();
  }
  CHECK(testutil::max_rel_err(testutil::finite_diff(w.wx, forward),
                              testutil::grad_as_double(w.wx)) < 1e-4);
  CHECK(testutil::max_rel_err(testutil::finite_diff(w.wh, forward),
                              testutil::grad_as_double(w.wh)) < 1e-4);
  CHECK(testutil::max_rel_err(testutil::finite_diff(w.b, forward),
                              testutil::grad_as_double(w.b)) < 1e-4);
  CHECK(testutil::max_rel_err(testutil::finite_diff(xs[0], forward),
                              testutil::grad_as_double(xs[0])) < 1e-4);
}

TEST_CASE("adam first step moves by about lr against the gradient sign") {
  auto p = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
  auto g = p.grad_mut();
  g[0] = 0.3f;
  g[1] = -4.0f;
  g[2] = 0.001f;
  AdamState<float> st;
  st.learning_rate = 0.01f;
  adam_step(p, st);
  CHECK_THAT(p.data()[0], Catch::Matchers::WithinAbs(1.0 - 0.01, 1e-4));
  CHECK_THAT(p.data()[1], Catch::Matchers::WithinAbs(-2.0 + 0.01, 1e-4));
  CHECK(p.data()[2] < 0.5f);  // sign follows -sign(g)
  CHECK(st.step_count == 1);
  // grad buffer zeroed after the step
  for (float v : p.grad()) CHECK(v == 0.0f);
}

TEST_CASE("adam zero gradient leaves fresh parameters unchanged") {
  auto p = Tensor::from_data({2}, {1.5f, -0.5f}, true);
  p.grad_mut();  // populated with zeros
  AdamState<float> st;
  adam_step(p, st);
  CHECK(p.data()[0] == 1.5f);
  CHECK(p.data()[1] == -0.5f);
  CHECK(st.step_count == 1);
}

TEST_CASE("adam requires a populated gradient") {
  auto p = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  AdamState<float> st;
  CHECK_THROWS_AS(adam_step(p, st), StateError);
}

TEST_CASE("adam drives (w-3)^2 toward the minimum") {
  // oracle: the same recurrence run as a plain double loop
  double m = 0, v = 0, w_ref = 0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 100; ++t) {
    double g = 2 * (w_ref - 3);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    double mhat = m / (1 - std::pow(b1, t));
    double vhat = v / (1 - std::pow(b2, t));
    w_ref -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  REQUIRE(std::abs(w_ref - 3) < 0.1);

  auto w = DT::from_data({1}, {0.0}, true);
  AdamState<double> st;
  st.learning_rate = lr;
  for (int t = 1; t <= 100; ++t) {
    auto diff = sub(w, DT::from_data({1}, {3.0}));
    auto loss = sum(mul(diff, diff));
    loss.backward();
    adam_step(w, st);
  }
  CHECK(std::abs(w.item() - 3) < 0.1);
  CHECK_THAT(w.item(), Catch::Matchers::WithinAbs(w_ref, 1e-9));
}

TEST_CASE("backward of a sum of losses equals the sum of backwards") {
  std::mt19937_64 rng(31);
  auto make_losses = [&](DT& x, DT& w1, DT& w2) {
    auto l1 = sum(mul(relu(x), w1));
    auto l2 = sum(mul(tanh_op(x), w2));
    return std::pair{l1, l2};
  };
  auto x0 = DT::uniform({4, 4}, -1, 1, rng, true);
  auto w1 = DT::uniform({4, 4}, -1, 1, rng);
  auto w2 = DT::uniform({4, 4}, -1, 1, rng);

  auto xa = x0.clone();
  xa.set_requires_grad(true);
  {
    auto [l1, l2] = make_losses(xa, w1, w2);
    add(l1, l2).backward();
  }
  auto xb = x0.clone();
  xb.set_requires_grad(true);
  {
    auto [l1, l2] = make_losses(xb, w1, w2);
    l1.backward();
    auto [l3, l4] = make_losses(xb, w1, w2);
    l4.backward();
  }
  for (long i = 0; i < x0.size(); ++i)
    CHECK_THAT(xa.grad()[i], Catch::Matchers::WithinAbs(xb.grad()[i], 1e-12));
}

TEST_CASE("tape is freed after backward") {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  auto l = sum(mul(x, x));
  l.backward();
  CHECK_THROWS_AS(l.backward(), StateError);
}

TEST_CASE("no-grad mode skips tape construction") {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  NoGradGuard ng;
  auto y = mul(x, x);
  CHECK(y.is_leaf());
}

TEST_CASE("checkpoint round-trip preserves names, shapes and bits") {
  std::mt19937_64 rng(41);
  NamedParams<float> params;
  params.emplace_back("layer1/weight", Tensor::uniform({3, 5}, -1, 1, rng));
  params.emplace_back("layer1/bias", Tensor::uniform({5}, -1, 1, rng));
  params.emplace_back("head/weight", Tensor::uniform({5, 2}, -1, 1, rng));
  std::string path = "ckpt_test.sstn";
  save_checkpoint(path, params);

  auto loaded = load_checkpoint<float>(path);
  REQUIRE(loaded.size() == params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(loaded[i].first == params[i].first);
    REQUIRE(loaded[i].second.shape() == params[i].second.shape());
    for (long j = 0; j < params[i].second.size(); ++j)
      CHECK(loaded[i].second.data()[j] == params[i].second.data()[j]);
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint magic is validated") {
  std::string path = "ckpt_bad.sstn";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE!junk";
  }
  CHECK_THROWS_AS(load_checkpoint<float>(path), ParseError);
  std::remove(path.c_str());
}
