#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "plunet/blocks.hpp"
#include "test_util.hpp"

using namespace plunet;
using namespace plunet::nn;
using plunet::testing::max_abs_diff;
using plunet::testing::random_tensor;

namespace {

BlockSpec spec_of(BlockKind kind, std::int64_t in, std::int64_t out, std::int64_t r = 16,
                  std::vector<std::int64_t> dil = {}) {
  BlockSpec s;
  s.kind = kind;
  s.in_channels = in;
  s.out_channels = out;
  s.se_reduction = r;
  s.dilations = std::move(dil);
  return s;
}

template <class B>
ParamStore<double> store_for(const B& b, std::uint64_t seed = 7) {
  std::vector<ParamDecl> decls;
  b.declare(decls);
  return init_from_decls<double>(decls, seed);
}

template <class B>
Tensor<double> run_eval(const B& b, ParamStore<double>& store, const Tensor<double>& x) {
  GradTape<double> tape(false);
  Context<double> ctx{tape, store, Mode::eval};
  return b.template forward<double>(ctx, tape.constant(x)).value();
}

void zero_params(ParamStore<double>& store, const std::string& prefix) {
  for (const auto& n : store.param_names())
    if (n.rfind(prefix, 0) == 0) store.param(n).fill(0.0);
}

std::int64_t conv_count(std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k * k + out; }
std::int64_t se_count(std::int64_t c, std::int64_t r) { return 2 * c * (c / r) + c / r + c; }

}  // namespace

TEST(BlockParams, ConvBlockCount) {
  const Block b(spec_of(BlockKind::conv_block, 64, 128), "enc2");
  // conv 3x3 64->128, BN, conv 3x3 128->128, BN; learnable scalars only.
  EXPECT_EQ(store_for(b).param_count(), 221952);
  EXPECT_EQ(store_for(b).param_count(), conv_count(64, 128, 3) + conv_count(128, 128, 3) + 4 * 128);
}

TEST(BlockParams, SECount) {
  const Block b(spec_of(BlockKind::se, 64, 64), "x");
  EXPECT_EQ(store_for(b).param_count(), 580);
}

TEST(BlockParams, LSCountMatchesLayerWalk) {
  for (auto [in, out] : {std::pair<std::int64_t, std::int64_t>{3, 32}, {32, 64}, {128, 64}}) {
    const Block b(spec_of(BlockKind::ls, in, out), "enc");
    const std::int64_t lg = 2 * (conv_count(in, out, 3) + 2 * out) + conv_count(2 * out, out, 1) + 2 * out;
    EXPECT_EQ(store_for(b).param_count(), lg + se_count(out, 16)) << in << "->" << out;
  }
}

TEST(BlockParams, PSCountMatchesLayerWalk) {
  const std::int64_t in = 128, out = 256;
  const Block b(spec_of(BlockKind::ps, in, out), "bottleneck");
  const std::int64_t branch = (in * 9 + in) + (in * out + out) + 2 * out;
  const std::int64_t expect = 4 * branch + conv_count(4 * out, out, 1) + 2 * out + se_count(out, 16);
  EXPECT_EQ(store_for(b).param_count(), expect);
}

TEST(BlockShapes, SpatialExtentPreserved) {
  Rng rng(1);
  const auto x = random_tensor<double>(Shape{2, 16, 8, 10}, rng);
  for (auto kind : {BlockKind::conv_block, BlockKind::se, BlockKind::lg, BlockKind::ls, BlockKind::ps}) {
    const Block b(spec_of(kind, 16, 16), "b");
    auto store = store_for(b);
    const auto y = run_eval(b, store, x);
    EXPECT_EQ(y.shape(), (Shape{2, 16, 8, 10})) << block_kind_name(kind);
    LayerTrace trace;
    EXPECT_EQ(b.trace(x.shape(), trace), y.shape());
  }
  const Block ps(spec_of(BlockKind::ps, 256, 512), "bottleneck");
  auto store = store_for(ps);
  EXPECT_EQ(run_eval(ps, store, random_tensor<double>(Shape{1, 256, 12, 12}, rng)).shape(),
            (Shape{1, 512, 12, 12}));
}

TEST(BlockShapes, ChannelMismatchRejected) {
  const Block b(spec_of(BlockKind::lg, 8, 16), "b");
  auto store = store_for(b);
  EXPECT_THROW(run_eval(b, store, Tensor<double>(Shape{1, 4, 4, 4})), std::invalid_argument);
}

TEST(BlockSpecs, Validation) {
  EXPECT_THROW(spec_of(BlockKind::se, 8, 16).validate(), std::invalid_argument);
  EXPECT_THROW(spec_of(BlockKind::ls, 8, 24, 16).validate(), std::invalid_argument);
  EXPECT_THROW(spec_of(BlockKind::conv_block, 8, 8, 16, {1, 2}).validate(), std::invalid_argument);
  EXPECT_THROW(spec_of(BlockKind::lg, 8, 8, 16, {0, 3}).validate(), std::invalid_argument);
  EXPECT_THROW(spec_of(BlockKind::ps, 8, 16, 16, {1, 1, 6, 12}).validate(), std::invalid_argument);
  EXPECT_EQ(spec_of(BlockKind::lg, 8, 8).effective_dilations(), (std::vector<std::int64_t>{1, 3}));
  EXPECT_EQ(spec_of(BlockKind::ps, 8, 16).effective_dilations(), (std::vector<std::int64_t>{1, 6, 12, 18}));
  EXPECT_EQ(parse_block_kind("ls"), BlockKind::ls);
  EXPECT_THROW(parse_block_kind("aspp"), std::invalid_argument);
}

TEST(ConvBlockBehaviour, ZeroWeightsGiveZeroOutput) {
  Rng rng(2);
  const Block b(spec_of(BlockKind::conv_block, 3, 8), "b");
  auto store = store_for(b);
  zero_params(store, "b.conv");
  const auto y = run_eval(b, store, random_tensor<double>(Shape{1, 3, 6, 6}, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(SEBehaviour, GateIsConstantPerPlaneAndInsideUnitInterval) {
  Rng rng(3);
  const Block b(spec_of(BlockKind::se, 32, 32), "b");
  auto store = store_for(b);
  for (const auto& n : store.param_names()) store.param(n) = random_tensor<double>(store.param(n).shape(), rng);
  const auto x = random_tensor<double>(Shape{2, 32, 5, 5}, rng, 0.5, 1.5);
  const auto y = run_eval(b, store, x);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 32; ++c) {
      const double r0 = y.at(n, c, 0, 0) / x.at(n, c, 0, 0);
      EXPECT_GT(r0, 0.0);
      EXPECT_LT(r0, 1.0);
      for (std::int64_t k = 0; k < 25; ++k) EXPECT_NEAR(y.plane(n, c)[k] / x.plane(n, c)[k], r0, 1e-12);
    }
}

TEST(LSBehaviour, ZeroSEParametersHalveTheLGOutput) {
  Rng rng(4);
  const Block ls(spec_of(BlockKind::ls, 4, 16), "enc1");
  auto store = store_for(ls);
  zero_params(store, "enc1.se.");
  const auto x = random_tensor<double>(Shape{1, 4, 6, 6}, rng);
  const auto y = run_eval(ls, store, x);
  const LGBlock lg("enc1.lg", 4, 16, {1, 3});
  const auto base = run_eval(lg, store, x);
  for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], 0.5 * base[i], 1e-14);
}

TEST(LGBehaviour, ReceptiveFieldIsSeven) {
  const std::int64_t c = 2;
  const Block b(spec_of(BlockKind::lg, c, c), "b");
  auto store = store_for(b);
  for (const auto& n : store.param_names())
    if (n.size() > 2 && n.substr(n.size() - 2) == ".w") store.param(n).fill(0.1);
  Tensor<double> x(Shape{1, c, 15, 15});
  x.at(0, 0, 7, 7) = 1.0;
  const auto y = run_eval(b, store, x);
  std::int64_t lo = 15, hi = -1, nonzero = 0;
  for (std::int64_t i = 0; i < 15; ++i)
    for (std::int64_t j = 0; j < 15; ++j)
      if (y.at(0, 0, i, j) != 0.0) {
        ++nonzero;
        lo = std::min({lo, i, j});
        hi = std::max({hi, i, j});
      }
  EXPECT_EQ(hi - lo + 1, 7);
  EXPECT_EQ(nonzero, 17);
}

TEST(LGBehaviour, IdentityBranchPassesInputThrough) {
  Rng rng(5);
  const std::int64_t c = 3;
  const Block b(spec_of(BlockKind::lg, c, c), "b");
  auto store = store_for(b);
  zero_params(store, "b.lg.branch_d");
  for (const auto& n : store.param_names())
    if (n.find("_bn.gamma") != std::string::npos) store.param(n).fill(1.0);
  auto& w1 = store.param("b.lg.branch_d1.w");
  for (std::int64_t k = 0; k < c; ++k) w1.at(k, k, 1, 1) = 1.0;
  auto& fuse = store.param("b.lg.fuse.w");
  fuse.fill(0.0);
  for (std::int64_t k = 0; k < c; ++k) fuse.at(k, k, 0, 0) = 1.0;
  store.param("b.lg.fuse.b").fill(0.0);
  const auto x = random_tensor<double>(Shape{1, c, 5, 5}, rng);
  const auto y = run_eval(b, store, x);
  const double s = std::sqrt(1.0 + 1e-5);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], std::max(0.0, x[i]) / (s * s), 1e-14);
}

TEST(PSBehaviour, FusionIsLinearInTiedBranches) {
  Rng rng(6);
  const std::int64_t in = 4, out = 16;
  const Block b(spec_of(BlockKind::ps, in, out), "bottleneck");
  auto store = store_for(b);
  // On a 1x1 input only the centre tap of every dilated branch is in range,
  // so branches with copied weights produce identical maps.
  const std::string p = "bottleneck.ps.branch_d";
  for (const char* d : {"6", "12", "18"}) {
    for (const char* t : {".dw.w", ".dw.b", ".pw.w", ".pw.b", "_bn.gamma", "_bn.beta"}) {
      store.param(p + d + t) = store.param(p + "1" + t);
    }
  }
  auto fuse = random_tensor<double>(store.param("bottleneck.ps.fuse.w").shape(), rng);
  store.param("bottleneck.ps.fuse.w") = fuse;
  const auto x = random_tensor<double>(Shape{3, in, 1, 1}, rng);
  const auto y = run_eval(b, store, x);
  Tensor<double> folded(fuse.shape());
  for (std::int64_t o = 0; o < out; ++o)
    for (std::int64_t k = 0; k < out; ++k) {
      double s = 0.0;
      for (int part = 0; part < 4; ++part) s += fuse.at(o, part * out + k, 0, 0);
      folded.at(o, k, 0, 0) = s;
    }
  store.param("bottleneck.ps.fuse.w") = folded;
  const auto y2 = run_eval(b, store, x);
  EXPECT_LT(max_abs_diff(y, y2), 1e-12);
}

TEST(Naming, FollowsPathConvention) {
  const auto names = [](const Block& b) {
    std::vector<ParamDecl> d;
    b.declare(d);
    std::vector<std::string> out;
    for (const auto& p : d) out.push_back(p.name);
    return out;
  };
  const auto has = [](const std::vector<std::string>& v, const std::string& n) {
    return std::find(v.begin(), v.end(), n) != v.end();
  };
  const auto cb = names(Block(spec_of(BlockKind::conv_block, 3, 8), "enc1"));
  EXPECT_TRUE(has(cb, "enc1.conv1.w"));
  EXPECT_TRUE(has(cb, "enc1.bn2.running_var"));
  const auto ls = names(Block(spec_of(BlockKind::ls, 3, 32), "enc1"));
  EXPECT_TRUE(has(ls, "enc1.lg.branch_d3.w"));
  EXPECT_TRUE(has(ls, "enc1.lg.branch_d1_bn.gamma"));
  EXPECT_TRUE(has(ls, "enc1.lg.fuse_bn.beta"));
  EXPECT_TRUE(has(ls, "enc1.se.fc1.w"));
  const auto ps = names(Block(spec_of(BlockKind::ps, 64, 128), "bottleneck"));
  EXPECT_TRUE(has(ps, "bottleneck.ps.branch_d18.dw.w"));
  EXPECT_TRUE(has(ps, "bottleneck.ps.branch_d6.pw.w"));
  EXPECT_TRUE(has(ps, "bottleneck.ps.fuse.w"));
  EXPECT_TRUE(has(ps, "bottleneck.se.fc2.b"));
}

TEST(Init, DeterministicPerSeed) {
  const Block b(spec_of(BlockKind::ls, 3, 32), "enc1");
  EXPECT_EQ(store_for(b, 11), store_for(b, 11));
  EXPECT_FALSE(store_for(b, 11) == store_for(b, 12));
  const auto s = store_for(b, 11);
  for (double v : s.param("enc1.lg.branch_d1_bn.gamma").data()) EXPECT_EQ(v, 1.0);
  for (double v : s.buffer("enc1.lg.fuse_bn.running_mean").data()) EXPECT_EQ(v, 0.0);
  const double bound = std::sqrt(6.0 / 27.0);
  for (double v : s.param("enc1.lg.branch_d3.w").data()) EXPECT_LE(std::abs(v), bound);
}
