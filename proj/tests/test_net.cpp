#include <catch_amalgamated.hpp>

#include <cmath>

#include "opd/autodiff.hpp"
#include "opd/net.hpp"
#include "test_util.hpp"

using Catch::Approx;
using namespace opd;
using namespace opd::testing;

TEST_CASE("zero parameters give zero velocity", "[net]") {
  VelocityField vf(small_arch());
  const auto v = vf.forward(std::vector<double>{0.3, -1.2}, 0.4, 1);
  CHECK(v == std::vector<double>{0.0, 0.0});
}

TEST_CASE("forward is pure and batch independent", "[net]") {
  const auto vf = small_field(3);
  const std::vector<double> x{0.5, -0.25};
  const auto a = vf.forward(x, 0.3, 2);
  const auto b = vf.forward(x, 0.3, 2);
  CHECK(a == b);
  CHECK(a.size() == 2);

  Batch xb(2, 5);
  Rng rng(9);
  for (double& v : xb.data) v = rng.normal();
  xb(0, 3) = x[0];
  xb(1, 3) = x[1];
  const double t[1] = {0.3};
  const int c[1] = {2};
  const Batch out = vf.forward(xb, t, c);
  CHECK(out(0, 3) == a[0]);
  CHECK(out(1, 3) == a[1]);
}

TEST_CASE("condition out of range is rejected", "[net]") {
  const auto vf = small_field(1);
  CHECK_THROWS_AS(vf.forward(std::vector<double>{0.0, 0.0}, 0.5, 3), InvalidArgument);
  CHECK_THROWS_AS(vf.forward(std::vector<double>{0.0, 0.0}, 0.5, -1), InvalidArgument);
}

TEST_CASE("parameter perturbation matches a first-order expansion", "[net]") {
  const auto vf = small_field(4);
  const std::vector<double> x{0.7, 0.1};
  const double t = 0.6;
  const int c = 0;
  Rng rng(11);
  std::vector<double> dir(vf.n_params());
  for (double& d : dir) d = rng.normal();
  // J . dir through the tape: gradient of <w, v> for each output coordinate
  for (int i = 0; i < 2; ++i) {
    const auto g = grad_scalar_loss(vf, [&](Tape& tape) {
      Batch xb(2, 1);
      xb.data = x;
      const double ts[1] = {t};
      const int cs[1] = {c};
      return tape.call(xb, ts, cs)(i, 0);
    });
    double jvp = 0.0;
    for (std::size_t k = 0; k < dir.size(); ++k) jvp += g.grad[k] * dir[k];
    const double h = 1e-5;
    VelocityField up = vf, down = vf;
    for (std::size_t k = 0; k < dir.size(); ++k) {
      up.params()[k] += h * dir[k];
      down.params()[k] -= h * dir[k];
    }
    const double fd = (up.forward(x, t, c)[i] - down.forward(x, t, c)[i]) / (2 * h);
    CHECK(jvp == Approx(fd).epsilon(1e-6).margin(1e-9));
  }
}

TEST_CASE("reverse-mode gradient matches central finite differences", "[net]") {
  Rng rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    auto arch = small_arch();
    arch.activation = trial % 2 ? Activation::kTanh : Activation::kSilu;
    const auto vf = VelocityField::initialized(arch, rng.substream("net", trial), 1.0);
    const std::vector<double> x{rng.normal(), rng.normal()};
    const double t = rng.uniform();
    const int c = static_cast<int>(rng.below(3));
    auto loss_of = [&](const VelocityField& f) {
      const auto v = f.forward(x, t, c);
      return 0.5 * (v[0] * v[0] + v[1] * v[1]);
    };
    const auto g = grad_scalar_loss(vf, [&](Tape& tape) {
      Batch xb(2, 1);
      xb.data = x;
      const double ts[1] = {t};
      const int cs[1] = {c};
      const auto v = tape.call(xb, ts, cs);
      return (square(v(0, 0)) + square(v(1, 0))) * 0.5;
    });
    CHECK(g.loss == Approx(loss_of(vf)));
    const auto fd = finite_difference_grad(vf, loss_of);
    CHECK(max_relative_error(g.grad, fd, 1e-3) < 1e-4);
  }
}

TEST_CASE("gradient of a constant loss is zero and gradients add", "[net]") {
  const auto vf = small_field(5);
  const auto g0 = grad_scalar_loss(vf, [](Tape& tape) { return tape.constant(3.0); });
  CHECK(g0.loss == 3.0);
  for (double v : g0.grad) CHECK(v == 0.0);

  Batch xb(2, 1);
  xb.data = {0.2, 0.9};
  const double ts[1] = {0.4};
  const int cs[1] = {1};
  auto la = [&](Tape& tape) { return square(tape.call(xb, ts, cs)(0, 0)); };
  auto lb = [&](Tape& tape) { return tape.call(xb, ts, cs)(1, 0) * 3.0; };
  const auto ga = grad_scalar_loss(vf, la);
  const auto gb = grad_scalar_loss(vf, lb);
  const auto gab = grad_scalar_loss(vf, [&](Tape& tape) { return la(tape) + lb(tape); });
  for (std::size_t k = 0; k < gab.grad.size(); ++k) CHECK(gab.grad[k] == Approx(ga.grad[k] + gb.grad[k]).margin(1e-14));
}

TEST_CASE("non-finite loss raises a numeric error", "[net]") {
  const auto vf = small_field(6);
  CHECK_THROWS_AS(grad_scalar_loss(vf, [](Tape& tape) { return log(tape.constant(-1.0)); }), NumericError);
}

TEST_CASE("checkpoint round trip", "[net][checkpoint]") {
  auto vf = small_field(7);
  const auto bytes = encode_checkpoint(vf);
  REQUIRE(bytes.size() > 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "OPDF");
  const auto back = decode_checkpoint(bytes);
  CHECK(back.arch() == vf.arch());
  CHECK(encode_checkpoint(back) == bytes);

  quantize_to_f32(vf);
  CHECK(decode_checkpoint(encode_checkpoint(vf)) == vf);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(truncated), InvalidArgument);
  auto wrong_magic = bytes;
  wrong_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(wrong_magic), InvalidArgument);
}

TEST_CASE("checkpoint header layout is little-endian", "[net][checkpoint]") {
  const auto vf = small_field(8);
  const auto bytes = encode_checkpoint(vf);
  auto u32 = [&](std::size_t off) {
    return static_cast<std::uint32_t>(bytes[off]) | static_cast<std::uint32_t>(bytes[off + 1]) << 8 |
           static_cast<std::uint32_t>(bytes[off + 2]) << 16 | static_cast<std::uint32_t>(bytes[off + 3]) << 24;
  };
  CHECK(u32(4) == kCheckpointVersion);
  CHECK(u32(8) == 2);   // dim
  CHECK(u32(12) == 3);  // cond_vocab
  CHECK(u32(28) == 3);  // layers: two hidden + head
  CHECK(bytes.size() == 32 + 3 * 8 + 8 + 4 * vf.n_params());
}
