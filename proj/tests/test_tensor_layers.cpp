#include <doctest.h>

#include <cmath>
#include <vector>

#include "layercache/errors.hpp"
#include "layercache/layers.hpp"
#include "layercache/tensor.hpp"
#include "support.hpp"

using namespace layercache;
using testsup::finite_diff;
using testsup::kink_safe_tensor;
using testsup::random_tensor;
using testsup::rel_l2;

TEST_CASE("tensor shape and row access") {
  tensor t({2, 3});
  for (std::size_t i = 0; i < 6; ++i) t.data()[i] = static_cast<float>(i);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.row_size() == 3);
  CHECK(t.row(1)[0] == doctest::Approx(3.0f));
  CHECK(t.sample_shape() == std::vector<std::size_t>{3});

  const tensor picked = t.select_rows({1, 0, 1});
  CHECK(picked.rows() == 3);
  CHECK(picked.row(0)[2] == doctest::Approx(5.0f));
  CHECK(picked.row(1)[2] == doctest::Approx(2.0f));
}

TEST_CASE("flop costs per layer kind") {
  CHECK(layer_flops(layer_spec::dense(3, 5), {3}) == 30);  // 2 * 3 * 5
  // 2 * k^2 * cin * cout * hout * wout = 2*9*2*4*64
  CHECK(layer_flops(layer_spec::conv2d(2, 4, 3, 1, 1), {2, 8, 8}) == 9216);
  CHECK(layer_flops(layer_spec::relu(), {4, 4}) == 16);
  // out 2x4x4, k^2 = 4 comparisons per cell
  CHECK(layer_flops(layer_spec::maxpool2d(2, 2), {2, 8, 8}) == 128);
  CHECK(layer_flops(layer_spec::flatten(), {2, 8, 8}) == 0);
  CHECK(layer_flops(layer_spec::global_average_pool(), {8, 4, 4}) == 136);  // |in| + |out|
  CHECK(layer_flops(layer_spec::softmax(), {10}) == 50);
  CHECK(layer_flops(layer_spec::log_softmax(), {10}) == 50);
  CHECK(layer_flops(layer_spec::batchnorm_frozen(16), {16}) == 32);

  auto inactive = layer_spec::conv2d(2, 4, 3, 1, 1);
  inactive.inference_active = false;
  CHECK(layer_flops(inactive, {2, 8, 8}) == 0);
}

TEST_CASE("dense forward matches hand computation") {
  const auto spec = layer_spec::dense(2, 2);
  layer_params p;
  p.weight = tensor({2, 2});  // [out, in]
  p.weight.data()[0] = 1.0f; p.weight.data()[1] = 2.0f;   // row 0
  p.weight.data()[2] = -1.0f; p.weight.data()[3] = 0.5f;  // row 1
  p.bias = tensor({2});
  p.bias.data()[0] = 0.1f; p.bias.data()[1] = -0.2f;

  tensor x({1, 2});
  x.data()[0] = 3.0f; x.data()[1] = 4.0f;
  const tensor y = forward(spec, p, x);
  CHECK(y.data()[0] == doctest::Approx(3.0f + 8.0f + 0.1f));
  CHECK(y.data()[1] == doctest::Approx(-3.0f + 2.0f - 0.2f));
}

TEST_CASE("1x1 conv equals a per-pixel dense map") {
  rng gen(3);
  const auto spec = layer_spec::conv2d(3, 2, 1);
  auto p = init_params(spec, gen);
  const tensor x = random_tensor({2, 3, 4, 4}, gen);
  const tensor y = forward(spec, p, x);
  REQUIRE(y.shape() == std::vector<std::size_t>{2, 2, 4, 4});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t co = 0; co < 2; ++co) {
      for (std::size_t px = 0; px < 16; ++px) {
        float want = p.bias.data()[co];
        for (std::size_t ci = 0; ci < 3; ++ci) {
          want += p.weight.data()[co * 3 + ci] * x.data()[(n * 3 + ci) * 16 + px];
        }
        CHECK(y.data()[(n * 2 + co) * 16 + px] == doctest::Approx(want).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("conv2d matches a straightforward reference loop") {
  rng gen(11);
  const auto spec = layer_spec::conv2d(2, 3, 3, 2, 1);
  auto p = init_params(spec, gen);
  const tensor x = random_tensor({2, 2, 5, 5}, gen);
  const tensor y = forward(spec, p, x);
  const std::size_t h_out = (5 + 2 - 3) / 2 + 1;
  REQUIRE(y.shape() == std::vector<std::size_t>{2, 3, h_out, h_out});

  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t co = 0; co < 3; ++co)
      for (std::size_t oy = 0; oy < h_out; ++oy)
        for (std::size_t ox = 0; ox < h_out; ++ox) {
          double acc = p.bias.data()[co];
          for (std::size_t ci = 0; ci < 2; ++ci)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(oy * 2 + ky) - 1;
                const long ix = static_cast<long>(ox * 2 + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
                acc += p.weight.data()[((co * 2 + ci) * 3 + ky) * 3 + kx] *
                       x.data()[((n * 2 + ci) * 5 + iy) * 5 + ix];
              }
          CHECK(y.data()[((n * 3 + co) * h_out + oy) * h_out + ox] ==
                doctest::Approx(acc).epsilon(1e-4));
        }
}

TEST_CASE("maxpool picks window maxima") {
  const auto spec = layer_spec::maxpool2d(2, 2);
  tensor x({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x.data()[i] = static_cast<float>(i);
  const tensor y = forward(spec, {}, x);
  REQUIRE(y.shape() == std::vector<std::size_t>{1, 1, 2, 2});
  CHECK(y.data()[0] == 5.0f);
  CHECK(y.data()[1] == 7.0f);
  CHECK(y.data()[2] == 13.0f);
  CHECK(y.data()[3] == 15.0f);
}

TEST_CASE("global average pool reduces channels to their means") {
  const auto spec = layer_spec::global_average_pool();
  tensor x({1, 2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) x.data()[i] = static_cast<float>(i);
  const tensor y = forward(spec, {}, x);
  REQUIRE(y.shape() == std::vector<std::size_t>{1, 2});
  CHECK(y.data()[0] == doctest::Approx(1.5f));
  CHECK(y.data()[1] == doctest::Approx(5.5f));
}

TEST_CASE("softmax rows are pds and log_softmax is their log") {
  rng gen(5);
  const tensor x = random_tensor({3, 7}, gen, -3.0f, 3.0f);
  const tensor sm = forward(layer_spec::softmax(), {}, x);
  const tensor lsm = forward(layer_spec::log_softmax(), {}, x);
  for (std::size_t r = 0; r < 3; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 7; ++i) {
      CHECK(sm.row(r)[i] > 0.0f);
      sum += sm.row(r)[i];
      CHECK(lsm.row(r)[i] == doctest::Approx(std::log(sm.row(r)[i])).epsilon(1e-4));
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("frozen batchnorm applies the per-feature affine") {
  const auto spec = layer_spec::batchnorm_frozen(2);
  layer_params p;
  p.weight = tensor({2});
  p.weight.data()[0] = 2.0f; p.weight.data()[1] = 0.5f;
  p.bias = tensor({2});
  p.bias.data()[0] = 1.0f; p.bias.data()[1] = -1.0f;

  SUBCASE("vector input") {
    tensor x({1, 2});
    x.data()[0] = 3.0f; x.data()[1] = 4.0f;
    const tensor y = forward(spec, p, x);
    CHECK(y.data()[0] == doctest::Approx(7.0f));
    CHECK(y.data()[1] == doctest::Approx(1.0f));
  }
  SUBCASE("channel maps") {
    tensor x({1, 2, 1, 2});
    for (std::size_t i = 0; i < 4; ++i) x.data()[i] = static_cast<float>(i + 1);
    const tensor y = forward(spec, p, x);
    CHECK(y.data()[0] == doctest::Approx(3.0f));   // 2*1+1
    CHECK(y.data()[1] == doctest::Approx(5.0f));   // 2*2+1
    CHECK(y.data()[2] == doctest::Approx(0.5f));   // .5*3-1
    CHECK(y.data()[3] == doctest::Approx(1.0f));   // .5*4-1
  }
}

TEST_CASE("shape validation names the offending layer") {
  CHECK_THROWS_AS((void)output_shape(layer_spec::dense(3, 5), {4}), shape_error);
  CHECK_THROWS_AS((void)output_shape(layer_spec::conv2d(2, 4, 3), {8, 8}), shape_error);
  CHECK_THROWS_AS((void)output_shape(layer_spec::conv2d(2, 4, 3), {3, 8, 8}), shape_error);
  try {
    (void)output_shape(layer_spec::dense(3, 5), {4});
    FAIL("expected a throw");
  } catch (const shape_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("dense") != std::string::npos);
  }
}

TEST_CASE("kaiming init respects the fan-in bound and zero bias") {
  rng gen(9);
  const auto spec = layer_spec::conv2d(4, 8, 3);
  const auto p = init_params(spec, gen);
  const float bound = std::sqrt(6.0f / (4 * 3 * 3));
  for (std::size_t i = 0; i < p.weight.size(); ++i) {
    CHECK(std::abs(p.weight.data()[i]) <= bound);
  }
  for (std::size_t i = 0; i < p.bias.size(); ++i) CHECK(p.bias.data()[i] == 0.0f);

  rng gen2(9);
  const auto p2 = init_params(spec, gen2);
  CHECK(p2.weight.values() == p.weight.values());
}

namespace {

// scalar probe: sum(output * coef) with fixed random coefs
double probe(const layer_spec& spec, const layer_params& p, const tensor& x,
             const tensor& coef) {
  const tensor y = forward(spec, p, x);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y.data()[i]) * coef.data()[i];
  return s;
}

void check_input_grad(const layer_spec& spec, const layer_params& p, const tensor& x,
                      std::uint32_t coef_seed) {
  rng gen(coef_seed);
  const tensor y = forward(spec, p, x);
  const tensor coef = random_tensor(y.shape(), gen);
  const auto grads = backward(spec, p, x, y, coef);

  auto f = [&](const std::vector<float>& flat) {
    tensor xx(x.shape());
    xx.values() = flat;
    return probe(spec, p, xx, coef);
  };
  const auto fd = finite_diff(f, x.values());
  std::vector<double> an(grads.dinput.values().begin(), grads.dinput.values().end());
  CHECK(rel_l2(an, fd) < 1e-2);
}

void check_weight_grad(const layer_spec& spec, const layer_params& p, const tensor& x,
                       std::uint32_t coef_seed) {
  rng gen(coef_seed);
  const tensor y = forward(spec, p, x);
  const tensor coef = random_tensor(y.shape(), gen);
  const auto grads = backward(spec, p, x, y, coef);

  auto fw = [&](const std::vector<float>& flat) {
    layer_params pp = p;
    pp.weight.values() = flat;
    return probe(spec, pp, x, coef);
  };
  const auto fd_w = finite_diff(fw, p.weight.values());
  std::vector<double> an_w(grads.dparams.weight.values().begin(),
                           grads.dparams.weight.values().end());
  CHECK(rel_l2(an_w, fd_w) < 1e-2);

  auto fb = [&](const std::vector<float>& flat) {
    layer_params pp = p;
    pp.bias.values() = flat;
    return probe(spec, pp, x, coef);
  };
  const auto fd_b = finite_diff(fb, p.bias.values());
  std::vector<double> an_b(grads.dparams.bias.values().begin(),
                           grads.dparams.bias.values().end());
  CHECK(rel_l2(an_b, fd_b) < 1e-2);
}

}  // namespace

TEST_CASE("finite differences confirm layer gradients") {
  rng gen(21);

  SUBCASE("dense") {
    const auto spec = layer_spec::dense(6, 4);
    const auto p = init_params(spec, gen);
    const tensor x = random_tensor({3, 6}, gen);
    check_input_grad(spec, p, x, 100);
    check_weight_grad(spec, p, x, 101);
  }
  SUBCASE("conv2d") {
    const auto spec = layer_spec::conv2d(2, 3, 3, 1, 1);
    const auto p = init_params(spec, gen);
    const tensor x = random_tensor({2, 2, 4, 4}, gen);
    check_input_grad(spec, p, x, 102);
    check_weight_grad(spec, p, x, 103);
  }
  SUBCASE("strided conv2d") {
    const auto spec = layer_spec::conv2d(2, 2, 3, 2, 1);
    const auto p = init_params(spec, gen);
    const tensor x = random_tensor({2, 2, 5, 5}, gen);
    check_input_grad(spec, p, x, 104);
    check_weight_grad(spec, p, x, 105);
  }
  SUBCASE("relu away from the kink") {
    const tensor x = kink_safe_tensor({3, 10}, gen);
    check_input_grad(layer_spec::relu(), {}, x, 106);
  }
  SUBCASE("maxpool with well-separated windows") {
    const tensor x = kink_safe_tensor({2, 2, 4, 4}, gen);
    check_input_grad(layer_spec::maxpool2d(2, 2), {}, x, 107);
  }
  SUBCASE("global average pool") {
    const tensor x = random_tensor({2, 3, 4, 4}, gen);
    check_input_grad(layer_spec::global_average_pool(), {}, x, 108);
  }
  SUBCASE("softmax") {
    const tensor x = random_tensor({3, 8}, gen, -2.0f, 2.0f);
    check_input_grad(layer_spec::softmax(), {}, x, 109);
  }
  SUBCASE("log_softmax") {
    const tensor x = random_tensor({3, 8}, gen, -2.0f, 2.0f);
    check_input_grad(layer_spec::log_softmax(), {}, x, 110);
  }
  SUBCASE("batchnorm") {
    const auto spec = layer_spec::batchnorm_frozen(3);
    layer_params p;
    p.weight = random_tensor({3}, gen, 0.5f, 2.0f);
    p.bias = random_tensor({3}, gen);
    const tensor x = random_tensor({2, 3, 3, 3}, gen);
    check_input_grad(spec, p, x, 111);
    check_weight_grad(spec, p, x, 112);
  }
  SUBCASE("flatten") {
    const tensor x = random_tensor({2, 2, 3, 3}, gen);
    check_input_grad(layer_spec::flatten(), {}, x, 113);
  }
}

TEST_CASE("maxpool ties send the gradient to the first maximum") {
  const auto spec = layer_spec::maxpool2d(2, 2);
  tensor x({1, 1, 2, 2});
  x.data()[0] = 1.0f; x.data()[1] = 1.0f;  // tie
  x.data()[2] = 0.0f; x.data()[3] = 0.0f;
  const tensor y = forward(spec, {}, x);
  tensor dy({1, 1, 1, 1});
  dy.data()[0] = 1.0f;
  const auto g = backward(spec, {}, x, y, dy);
  CHECK(g.dinput.data()[0] == 1.0f);
  CHECK(g.dinput.data()[1] == 0.0f);
}

TEST_CASE("layer kind names round-trip") {
  for (auto k : {layer_kind::dense, layer_kind::conv2d, layer_kind::relu,
                 layer_kind::maxpool2d, layer_kind::flatten, layer_kind::global_average_pool,
                 layer_kind::softmax, layer_kind::log_softmax, layer_kind::batchnorm_frozen}) {
    CHECK(layer_kind_from_name(layer_kind_name(k)) == k);
  }
  CHECK_THROWS_AS((void)layer_kind_from_name("avgpool9000"), parse_error);
}
