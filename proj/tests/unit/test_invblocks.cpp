#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numbers>

#include "idm/diffusion.hpp"
#include "idm/invblocks.hpp"
#include "idm/ops.hpp"
#include "test_support.hpp"

using namespace idm;
using idm::testing::fd_rel;
using idm::testing::max_rel;
using idm::testing::random_tensor;

namespace {

void randomize(const std::vector<Param*>& params, std::uint64_t seed, double bound = 0.3) {
  Prng prng(seed);
  for (Param* p : params) p->value = ops::rand_uniform(prng, p->value.shape(), -bound, bound, p->value.dtype());
}

double bijectivity_tol(DType dt) { return dt == DType::F32 ? 1e-5 : 1e-10; }

}  // namespace

// ---------------------------------------------------------------------------
// Orthogonal resampling
// ---------------------------------------------------------------------------

TEST(OrthoResample, ZeroSkewIsPixelUnshuffle) {
  OrthoResample down("d", OrthoResample::Direction::Down, DType::F32);
  const Tensor q = down.q();
  EXPECT_TRUE(identical(q, Tensor::from_values({8, 8}, [] {
    std::vector<double> eye(64, 0.0);
    for (int i = 0; i < 8; ++i) eye[i * 9] = 1.0;
    return eye;
  }())));
  const Tensor x = random_tensor(1, {1, 2, 4, 4, 4}, DType::F32);
  const Tensor y = ortho_down(x, q);
  EXPECT_EQ(y.shape(), (Shape{1, 16, 2, 2, 2}));
  // channel c*8 + j holds block entry j = 4dz + 2dy + dx
  for (std::int64_t c = 0; c < 2; ++c)
    for (int j = 0; j < 8; ++j)
      for (int z = 0; z < 2; ++z)
        for (int yy = 0; yy < 2; ++yy)
          for (int xx = 0; xx < 2; ++xx) {
            const std::int64_t src = (((c * 4) + 2 * z + (j >> 2)) * 4 + 2 * yy + ((j >> 1) & 1)) * 4 + 2 * xx + (j & 1);
            const std::int64_t dst = (((c * 8 + j) * 2 + z) * 2 + yy) * 2 + xx;
            EXPECT_EQ(y.get(dst), x.get(src));
          }
  EXPECT_TRUE(identical(ortho_up(y, q), x));
}

TEST(OrthoResample, RandomRoundTripAndIsometry) {
  OrthoResample down("d", OrthoResample::Direction::Down, DType::F32);
  randomize(down.params(), 2, 1.0);
  const Tensor q = down.q();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor(100 + seed, {1, 2, 4, 4, 4}, DType::F32);
    const Tensor y = ortho_down(x, q);
    EXPECT_LE(ops::max_abs_diff(ortho_up(y, q), x), 1e-5);
    EXPECT_NEAR(ops::l2_norm(y) / ops::l2_norm(x), 1.0, 1e-5);
  }
}

TEST(OrthoResample, UpIsInverseDirection) {
  OrthoResample up("u", OrthoResample::Direction::Up, DType::F64);
  randomize(up.params(), 3, 1.0);
  const Tensor y = random_tensor(4, {2, 16, 2, 2, 2});
  const Tensor x = up.forward({y}, RunContext{}).at(0);
  EXPECT_EQ(x.shape(), (Shape{2, 2, 4, 4, 4}));
  EXPECT_LE(max_rel(up.inverse({x}, RunContext{}).at(0), y), 1e-12);
}

TEST(OrthoResample, ShapeErrors) {
  const Tensor q = cayley_orthogonal(Tensor({8, 8}, DType::F32));
  EXPECT_THROW(ortho_down(Tensor({1, 1, 3, 4, 4}), q), ShapeError);
  EXPECT_THROW(ortho_down(Tensor({1, 4, 4, 4}), q), ShapeError);
  EXPECT_THROW(ortho_up(Tensor({1, 12, 2, 2, 2}), q), ShapeError);
  EXPECT_THROW(ortho_down(Tensor({1, 1, 2, 2, 2}), Tensor({4, 4})), ShapeError);
}

TEST(Cayley, OrthogonalForRandomParams) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor p = random_tensor(seed, {8, 8});
    EXPECT_LE(orthogonality_error(cayley_orthogonal(p)), 1e-12);
  }
}

TEST(Cayley, GradientMatchesFiniteDifferences) {
  const Tensor p = ops::scale(random_tensor(5, {8, 8}), 0.5);
  const Tensor g = random_tensor(6, {8, 8});
  const Tensor grad = cayley_backward(p, g);
  const double h = 1e-6;
  for (std::int64_t k = 0; k < 64; ++k) {
    Tensor pp = p, pm = p;
    pp.set(k, p.get(k) + h);
    pm.set(k, p.get(k) - h);
    const double fd = (ops::dot(cayley_orthogonal(pp), g) - ops::dot(cayley_orthogonal(pm), g)) / (2 * h);
    EXPECT_LE(fd_rel(grad.get(k), fd), 1e-6) << k;
  }
}

TEST(Cayley, OrthogonalityAfterOptimizerSteps) {
  OrthoResample down("d", OrthoResample::Direction::Down, DType::F32);
  TrainConfig cfg;
  AdamW opt(down.params(), cfg);
  Prng prng(7);
  for (int step = 0; step < 100; ++step) {
    down.skew().grad = ops::randn(prng, {8, 8}, DType::F32);
    opt.step(0.05);
  }
  EXPECT_GT(ops::max_abs(down.skew().value), 0.5);
  EXPECT_LE(orthogonality_error(down.q()), 1e-6);
}

// ---------------------------------------------------------------------------
// Additive coupling
// ---------------------------------------------------------------------------

TEST(Coupling, ZeroConditionerIsIdentity) {
  Prng init(8);
  AdditiveCoupling c("c", 4, 4, 8, false, DType::F32, init);
  const Tensor emb = random_tensor(9, {8}, DType::F32);
  const Tensor x = random_tensor(10, {1, 4, 8, 8, 8}, DType::F32);
  EXPECT_TRUE(identical(c.forward({x}, RunContext{&emb, nullptr}).at(0), x));
}

TEST(Coupling, RoundTripAndConditioning) {
  for (bool swap : {false, true}) {
    Prng init(11);
    AdditiveCoupling c("c", 4, 4, 8, swap, DType::F32, init);
    randomize(c.params(), 12);
    const Tensor x = random_tensor(13, {1, 4, 8, 8, 8}, DType::F32);
    const Tensor e1 = random_tensor(14, {8}, DType::F32);
    const Tensor e2 = random_tensor(15, {8}, DType::F32);
    const RunContext c1{&e1, nullptr}, c2{&e2, nullptr};
    const Tensor y1 = c.forward({x}, c1).at(0);
    const Tensor y2 = c.forward({x}, c2).at(0);
    EXPECT_GT(ops::max_abs_diff(y1, y2), 1e-3);
    EXPECT_LE(max_rel(c.inverse({y1}, c1).at(0), x), 1e-5);
    EXPECT_LE(max_rel(c.inverse({y2}, c2).at(0), x), 1e-5);
    // one half passes through untouched
    const auto [a0, b0] = ops::split_channels(x, 2);
    const auto [a1, b1] = ops::split_channels(y1, 2);
    EXPECT_TRUE(identical(swap ? b1 : a1, swap ? b0 : a0));
  }
}

TEST(Coupling, OddChannelsRejected) {
  Prng init(16);
  EXPECT_THROW(AdditiveCoupling("c", 3, 4, 8, false, DType::F32, init), ShapeError);
  AdditiveCoupling c("c", 4, 4, 8, false, DType::F32, init);
  EXPECT_THROW(c.forward({Tensor({1, 6, 2, 2, 2})}, RunContext{}), ShapeError);
}

TEST(Coupling, NullEmbeddingDiffersFromZeroTime) {
  Prng init(17);
  AdditiveCoupling c("c", 4, 4, 8, false, DType::F64, init);
  randomize(c.params(), 18);
  const Tensor x = random_tensor(19, {1, 4, 4, 4, 4});
  const Tensor zero({8}, DType::F64);
  EXPECT_TRUE(identical(c.forward({x}, RunContext{}).at(0), c.forward({x}, RunContext{&zero, nullptr}).at(0)));
}

TEST(Coupling, GradientsMatchFiniteDifferences) {
  Prng init(20);
  AdditiveCoupling c("c", 4, 4, 6, true, DType::F64, init);
  randomize(c.params(), 21);
  const Tensor x = random_tensor(22, {1, 4, 3, 3, 3});
  const Tensor g = random_tensor(23, x.shape());
  const Tensor emb = random_tensor(24, {6});
  Tensor emb_grad({6}, DType::F64);
  for (Param* p : c.params()) p->zero_grad();
  const Tensor gx = c.backward({x}, {g}, RunContext{&emb, &emb_grad}).at(0);
  auto loss = [&](const Tensor& xi, const Tensor& ei) { return ops::dot(c.forward({xi}, RunContext{&ei, nullptr}).at(0), g); };
  const double h = 1e-6;
  Prng pick(25);
  for (Param* p : c.params()) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto k = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(p->value.numel())));
      const double orig = p->value.get(k);
      p->value.set(k, orig + h);
      const double up = loss(x, emb);
      p->value.set(k, orig - h);
      const double down = loss(x, emb);
      p->value.set(k, orig);
      EXPECT_LE(fd_rel(p->grad.get(k), (up - down) / (2 * h)), 1e-5) << p->name;
    }
  }
  for (std::int64_t k = 0; k < 6; ++k) {
    Tensor ep = emb, em = emb;
    ep.set(k, emb.get(k) + h);
    em.set(k, emb.get(k) - h);
    EXPECT_LE(fd_rel(emb_grad.get(k), (loss(x, ep) - loss(x, em)) / (2 * h)), 1e-5);
  }
  for (int trial = 0; trial < 10; ++trial) {
    const auto k = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(x.numel())));
    Tensor xp = x, xm = x;
    xp.set(k, x.get(k) + h);
    xm.set(k, x.get(k) - h);
    EXPECT_LE(fd_rel(gx.get(k), (loss(xp, emb) - loss(xm, emb)) / (2 * h)), 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Attention coupling
// ---------------------------------------------------------------------------

TEST(Attention, ZeroProjectionIsConcat) {
  Prng init(26);
  AttentionCoupling a("a", 4, 4, DType::F32, init);
  const Tensor y = random_tensor(27, {1, 4, 4, 4, 4}, DType::F32);
  const Tensor c = random_tensor(28, {1, 4, 4, 4, 4}, DType::F32);
  EXPECT_TRUE(identical(a.apply(y, c), ops::concat_channels(y, c)));
}

TEST(Attention, ScaleBounded) {
  Prng init(29);
  AttentionCoupling a("a", 4, 4, DType::F64, init);
  randomize(a.params(), 30, 3.0);
  double lo = 1e300, hi = -1e300;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor y1 = ops::scale(random_tensor(200 + seed, {1, 32, 4}), 5.0);
    const Tensor f = a.scale(y1);
    lo = std::min(lo, ops::min_value(f));
    hi = std::max(hi, ops::max_value(f));
  }
  EXPECT_GE(lo, std::exp(-1.0) - 1e-6);
  EXPECT_LE(hi, std::numbers::e + 1e-6);
  EXPECT_LT(lo, 0.9);
  EXPECT_GT(hi, 1.1);
}

TEST(Attention, RoundTripAndParityPartition) {
  for (DType dt : {DType::F32, DType::F64}) {
    Prng init(31);
    AttentionCoupling a("a", 4, 4, dt, init);
    randomize(a.params(), 32, 1.0);
    const Tensor y = random_tensor(33, {1, 4, 4, 4, 4}, dt);
    const Tensor c = random_tensor(34, {1, 4, 4, 4, 4}, dt);
    const Tensor out = a.apply(y, c);
    const auto [yr, cr] = a.invert(out);
    EXPECT_LE(max_rel(yr, y), dt == DType::F32 ? 1e-5 : 1e-12);
    EXPECT_TRUE(identical(cr, c));
    const auto [y_out, c_out] = ops::split_channels(out, 4);
    EXPECT_TRUE(identical(c_out, c));
    const auto [even_in, odd_in] = parity_split(y);
    const auto [even_out, odd_out] = parity_split(y_out);
    EXPECT_TRUE(identical(even_out, even_in));
    EXPECT_GT(ops::max_abs_diff(odd_out, odd_in), 1e-3);
  }
}

TEST(Attention, ParitySplitMergeRoundTrip) {
  const Tensor x = random_tensor(35, {2, 3, 2, 3, 4});
  const auto [even, odd] = parity_split(x);
  EXPECT_EQ(even.shape(), (Shape{2, 12, 3}));
  // first even site is the origin, first odd site is (0,0,1)
  EXPECT_EQ(even.get(0), x.get(0));
  EXPECT_EQ(odd.get(0), x.get(1));
  EXPECT_TRUE(identical(parity_merge(even, odd, x.shape()), x));
  EXPECT_THROW(parity_split(Tensor({1, 1, 1, 1, 3})), ShapeError);
}

TEST(Attention, ChannelMismatchRejected) {
  Prng init(36);
  AttentionCoupling a("a", 4, 4, DType::F32, init);
  EXPECT_THROW(a.apply(Tensor({1, 2, 4, 4, 4}), Tensor({1, 4, 4, 4, 4})), ShapeError);
  EXPECT_THROW(a.apply(Tensor({1, 4, 4, 4, 4}), Tensor({1, 4, 2, 2, 2})), ShapeError);
  EXPECT_THROW(a.invert(Tensor({1, 6, 4, 4, 4})), ShapeError);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  Prng init(37);
  AttentionCoupling a("a", 2, 2, DType::F64, init);
  randomize(a.params(), 38, 0.8);
  const Tensor y = random_tensor(39, {1, 2, 2, 2, 4});
  const Tensor c = random_tensor(40, {1, 2, 2, 2, 4});
  const Tensor g = random_tensor(41, {1, 4, 2, 2, 4});
  for (Param* p : a.params()) p->zero_grad();
  const TensorList gin = a.backward({y, c}, {g}, RunContext{});
  auto loss = [&](const Tensor& yi) { return ops::dot(a.apply(yi, c), g); };
  const double h = 1e-6;
  for (Param* p : a.params()) {
    for (std::int64_t k = 0; k < p->value.numel(); ++k) {
      const double orig = p->value.get(k);
      p->value.set(k, orig + h);
      const double up = loss(y);
      p->value.set(k, orig - h);
      const double down = loss(y);
      p->value.set(k, orig);
      const double fd = (up - down) / (2 * h);
      if (p->name.ends_with(".bk"))
        EXPECT_LE(std::abs(p->grad.get(k)), 1e-12);
      else
        EXPECT_LE(fd_rel(p->grad.get(k), fd), 1e-5) << p->name << "[" << k << "]";
    }
  }
  for (std::int64_t k = 0; k < y.numel(); ++k) {
    Tensor yp = y, ym = y;
    yp.set(k, y.get(k) + h);
    ym.set(k, y.get(k) - h);
    EXPECT_LE(fd_rel(gin.at(0).get(k), (loss(yp) - loss(ym)) / (2 * h)), 1e-5);
  }
  EXPECT_TRUE(identical(gin.at(1), ops::split_channels(g, 2).second));
}

// ---------------------------------------------------------------------------
// Bijectivity of every invertible block
// ---------------------------------------------------------------------------

class Bijectivity : public ::testing::TestWithParam<DType> {};

TEST_P(Bijectivity, HundredRandomInputs) {
  const DType dt = GetParam();
  Prng init(42);
  std::vector<std::unique_ptr<Node>> blocks;
  blocks.push_back(std::make_unique<AdditiveCoupling>("coupling", 4, 4, 4, false, dt, init));
  blocks.push_back(std::make_unique<AdditiveCoupling>("coupling.swap", 4, 4, 4, true, dt, init));
  blocks.push_back(std::make_unique<OrthoResample>("down", OrthoResample::Direction::Down, dt));
  blocks.push_back(std::make_unique<OrthoResample>("up", OrthoResample::Direction::Up, dt));
  blocks.push_back(std::make_unique<AttentionCoupling>("attention", 2, 2, dt, init));
  blocks.push_back(std::make_unique<ChannelSplit>("split", 1));
  blocks.push_back(std::make_unique<ChannelMerge>("merge", 1));
  const Tensor emb = random_tensor(43, {4}, dt);
  const RunContext ctx{&emb, nullptr};
  for (auto& b : blocks) randomize(b->params(), 44, 0.5);

  Prng data(45);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    for (auto& b : blocks) {
      TensorList in;
      const std::string& n = b->name();
      if (n == "up")
        in = {ops::randn(data, {1, 8, 2, 2, 2}, dt)};
      else if (n == "attention" || n == "merge")
        in = {ops::randn(data, {1, n == "merge" ? 1 : 2, 4, 4, 4}, dt), ops::randn(data, {1, 2, 4, 4, 4}, dt)};
      else
        in = {ops::randn(data, {1, 4, 4, 4, 4}, dt)};
      const TensorList back = b->inverse(b->forward(in, ctx), ctx);
      ASSERT_EQ(back.size(), in.size()) << n;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const double err = max_rel(back[k], in[k]);
        worst = std::max(worst, err);
        EXPECT_LE(err, bijectivity_tol(dt)) << n;
      }
    }
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

INSTANTIATE_TEST_SUITE_P(Dtypes, Bijectivity, ::testing::Values(DType::F32, DType::F64),
                         [](const auto& info) { return dtype_name(info.param); });

// ---------------------------------------------------------------------------
// Conv stack
// ---------------------------------------------------------------------------

TEST(ConvStack, IdentityLanePassesChannelZero) {
  Prng init(46);
  ConvStack head("head", 1, 4, 4, DType::F64, init);
  head.init_identity_lane();
  const Tensor x = ops::scale(random_tensor(47, {2, 1, 4, 4, 4}), 3.0);
  const Tensor y = head.forward({x}, RunContext{}).at(0);
  EXPECT_LE(max_rel(ops::split_channels(y, 1).first, x), 1e-14);

  ConvStack tail("tail", 4, 4, 1, DType::F64, init);
  tail.init_identity_lane();
  EXPECT_LE(max_rel(tail.forward({y}, RunContext{}).at(0), x), 1e-14);

  ConvStack narrow("narrow", 1, 1, 1, DType::F64, init);
  EXPECT_THROW(narrow.init_identity_lane(), ShapeError);
}

TEST(ConvStack, GradientsMatchFiniteDifferences) {
  Prng init(48);
  ConvStack s("s", 2, 3, 2, DType::F64, init);
  const Tensor x = random_tensor(49, {1, 2, 3, 3, 3});
  const Tensor g = random_tensor(50, x.shape());
  for (Param* p : s.params()) p->zero_grad();
  const Tensor gx = s.backward({x}, {g}, RunContext{}).at(0);
  auto loss = [&](const Tensor& xi) { return ops::dot(s.forward({xi}, RunContext{}).at(0), g); };
  const double h = 1e-6;
  Prng pick(51);
  for (Param* p : s.params())
    for (int trial = 0; trial < 10; ++trial) {
      const auto k = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(p->value.numel())));
      const double orig = p->value.get(k);
      p->value.set(k, orig + h);
      const double up = loss(x);
      p->value.set(k, orig - h);
      const double down = loss(x);
      p->value.set(k, orig);
      EXPECT_LE(fd_rel(p->grad.get(k), (up - down) / (2 * h)), 1e-5) << p->name;
    }
  for (int trial = 0; trial < 10; ++trial) {
    const auto k = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(x.numel())));
    Tensor xp = x, xm = x;
    xp.set(k, x.get(k) + h);
    xm.set(k, x.get(k) - h);
    EXPECT_LE(fd_rel(gx.get(k), (loss(xp) - loss(xm)) / (2 * h)), 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

TEST(TimeEmbedding, ZeroTime) {
  const Tensor e = sinusoidal_embedding(0, 32, 2000);
  for (std::int64_t i = 0; i < 16; ++i) {
    EXPECT_EQ(e.get(i), 0.0);
    EXPECT_EQ(e.get(16 + i), 1.0);
  }
}

TEST(TimeEmbedding, InjectiveOverAllSteps) {
  Tensor prev = sinusoidal_embedding(0, 32, 2000);
  for (int t = 1; t <= 2000; ++t) {
    const Tensor cur = sinusoidal_embedding(t, 32, 2000);
    ASSERT_GT(ops::max_abs_diff(cur, prev), 0.0) << t;
    prev = cur;
  }
}

TEST(TimeEmbedding, DirectFormulaDim8) {
  const Tensor e = sinusoidal_embedding(1, 8, 2000);
  for (int i = 0; i < 4; ++i) {
    const double w = std::pow(10000.0, -2.0 * i / 8.0);
    EXPECT_NEAR(e.get(i), std::sin(w), 1e-15);
    EXPECT_NEAR(e.get(4 + i), std::cos(w), 1e-15);
  }
}

TEST(TimeEmbedding, DomainAndShapeErrors) {
  EXPECT_THROW(sinusoidal_embedding(-1, 8, 10), NumericDomainError);
  EXPECT_THROW(sinusoidal_embedding(11, 8, 10), NumericDomainError);
  EXPECT_THROW(sinusoidal_embedding(1, 7, 10), ShapeError);
  Prng init(52);
  TimeEmbedding emb(8, 10, DType::F64, init);
  EXPECT_THROW(emb.forward(11), NumericDomainError);
}

TEST(TimeEmbedding, DeterministicAndGradientChecked) {
  Prng i1(53), i2(53);
  TimeEmbedding a(8, 100, DType::F64, i1), b(8, 100, DType::F64, i2);
  EXPECT_TRUE(identical(a.forward(37), b.forward(37)));
  EXPECT_EQ(TimeEmbedding::parameter_count(8), 144);

  const Tensor g = random_tensor(54, {8});
  TimeEmbedding::Cache cache;
  a.forward(37, &cache);
  for (Param* p : a.params()) p->zero_grad();
  a.backward(cache, g);
  const double h = 1e-6;
  for (Param* p : a.params())
    for (std::int64_t k = 0; k < p->value.numel(); k += 5) {
      const double orig = p->value.get(k);
      p->value.set(k, orig + h);
      const double up = ops::dot(a.forward(37), g);
      p->value.set(k, orig - h);
      const double down = ops::dot(a.forward(37), g);
      p->value.set(k, orig);
      EXPECT_LE(fd_rel(p->grad.get(k), (up - down) / (2 * h)), 1e-6) << p->name;
    }
}
