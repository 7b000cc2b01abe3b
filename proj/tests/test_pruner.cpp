#include <gtest/gtest.h>

#include <cmath>

#include "dprune/error.hpp"
#include "dprune/pruner.hpp"
#include "helpers.hpp"

namespace dprune {
namespace {

using testing::tiny_config;

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kUndefined;
}

bool same_tensor(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

PrunePlan plan_for(const TransformerModel& model, PruneUnit unit, std::vector<std::size_t> selected) {
  PrunePlan plan;
  plan.unit = unit;
  plan.shape = ArchShape::from_model(model);
  plan.groups = discover_groups(build_graph(plan.shape), unit);
  plan.selected = std::move(selected);
  plan.total_params = model.param_count();
  for (auto id : plan.selected) plan.predicted_delta += group_param_delta(plan.groups[id], plan.shape);
  return plan;
}

std::size_t find_group(const PrunePlan& plan, GroupKind kind, int layer, int index) {
  for (std::size_t i = 0; i < plan.groups.size(); ++i) {
    const auto& g = plan.groups[i];
    if (g.kind == kind && g.layer == layer && g.index == index) return i;
  }
  ADD_FAILURE() << "group not found";
  return 0;
}

TEST(ApplyPlan, EmptyPlanIsBitIdentical) {
  const auto model = init_model(tiny_config(), 1);
  const auto pruned = apply_plan(model, plan_for(model, PruneUnit::kBlock, {}));
  const auto a = model.parameters(), b = pruned.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_tensor(a[i].tensor, b[i].tensor)) << a[i].name;
}

TEST(ApplyPlan, SingleMlpChannelIsLocal) {
  ModelConfig c = tiny_config();
  c.n_layers = 3;
  const auto model = init_model(c, 2);
  auto plan = plan_for(model, PruneUnit::kBlock, {});
  plan.selected = {find_group(plan, GroupKind::kMlpChannel, 2, 4)};
  plan.predicted_delta = group_param_delta(plan.groups[plan.selected[0]], plan.shape);
  const auto pruned = apply_plan(model, plan);
  EXPECT_EQ(pruned.d_ff(2), c.d_ff - 1);
  const std::set<std::string> touched{"layers.2.w_gate", "layers.2.w_up", "layers.2.w_down"};
  for (const auto& p : model.parameters()) {
    if (touched.count(p.name)) continue;
    EXPECT_TRUE(same_tensor(p.tensor, pruned.parameter(p.name))) << p.name;
  }
  // Remaining rows are the original rows minus row 4.
  const auto& before = model.layers[2].w_up;
  const auto& after = pruned.layers[2].w_up;
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  for (std::size_t col = 0; col < d; ++col) {
    EXPECT_EQ(after.data()[3 * d + col], before.data()[3 * d + col]);
    EXPECT_EQ(after.data()[4 * d + col], before.data()[5 * d + col]);
  }
  EXPECT_EQ(pruned.live_ffn[2], (std::vector<int>{0, 1, 2, 3, 5}));
}

TEST(ApplyPlan, SourceModelUntouched) {
  const auto model = init_model(tiny_config(), 3);
  const auto copy = model;
  apply_plan(model, plan_for(model, PruneUnit::kChannel, {0, 5}));
  for (const auto& p : model.parameters()) EXPECT_TRUE(same_tensor(p.tensor, copy.parameter(p.name)));
}

TEST(ApplyPlan, RemovingEveryHeadOfALayerIsRejected) {
  const auto model = init_model(tiny_config(), 4);
  auto plan = plan_for(model, PruneUnit::kBlock, {});
  plan.selected = {find_group(plan, GroupKind::kAttentionHead, 1, 0),
                   find_group(plan, GroupKind::kAttentionHead, 1, 1)};
  EXPECT_EQ(code_of([&] { apply_plan(model, plan); }), ErrorCode::kSelection);
}

TEST(ApplyPlan, OverlappingGroupsAreContractError) {
  const auto model = init_model(tiny_config(), 5);
  EXPECT_EQ(code_of([&] { apply_plan(model, plan_for(model, PruneUnit::kBlock, {3, 3})); }),
            ErrorCode::kContract);
}

TEST(ApplyPlan, StaleShapeIsPlanStale) {
  const auto model = init_model(tiny_config(), 6);
  const auto plan = plan_for(model, PruneUnit::kBlock, {2});
  const auto pruned = apply_plan(model, plan);
  EXPECT_EQ(code_of([&] { apply_plan(pruned, plan); }), ErrorCode::kPlanStale);
}

TEST(ApplyPlan, OutOfRangeSliceIsPlanStale) {
  const auto model = init_model(tiny_config(), 6);
  auto plan = plan_for(model, PruneUnit::kBlock, {0});
  plan.groups[0].members[0].indices = {99};
  EXPECT_EQ(code_of([&] { apply_plan(model, plan); }), ErrorCode::kPlanStale);
}

TEST(ValidateConsistency, FreshModelIsConsistent) {
  EXPECT_TRUE(validate_consistency(init_model(tiny_config(), 7)).empty());
  EXPECT_TRUE(validate_consistency(init_model(ModelConfig{}, 7)).empty());
}

TEST(ValidateConsistency, ExtraColumnInWoIsOneViolation) {
  auto model = init_model(tiny_config(), 8);
  const Tensor& wo = model.layers[1].wo;
  model.layers[1].wo = Tensor::zeros({wo.dim(0), wo.dim(1) + 1});
  const auto v = validate_consistency(model);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("layers.1.wo"), std::string::npos) << v[0];
}

// Random plans: random scores, random feasible ratio, both units.
TEST(ApplyPlan, HundredRandomPlansStayConsistent) {
  const ModelConfig c = tiny_config();
  const auto model = init_model(c, 9);
  const auto shape = ArchShape::from_model(model);
  SplitMix64 rng(10);
  const auto ids = testing::random_ids(6, c.vocab_size, 11);
  for (int trial = 0; trial < 100; ++trial) {
    const PruneUnit unit = trial % 2 == 0 ? PruneUnit::kBlock : PruneUnit::kChannel;
    const auto groups = discover_groups(build_graph(shape), unit);
    const auto scores = score_groups(groups, model, nullptr, {Method::kRandom, Aggregation::kSum,
                                                              FisherMode::kMeanOfSquares,
                                                              static_cast<std::uint64_t>(trial)});
    const double max_ratio = unit == PruneUnit::kBlock ? 0.09 : 0.7;
    const double ratio = max_ratio * rng.next_uniform();
    const auto plan = rank_and_select(groups, scores, shape, unit, ratio, {});
    const auto pruned = apply_plan(model, plan);
    ASSERT_TRUE(validate_consistency(pruned).empty()) << "trial " << trial;
    ASSERT_EQ(model.param_count() - pruned.param_count(), plan.predicted_delta);
    Tape tape(false);
    const auto y = forward(tape, pruned, ids);
    for (double v : y.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(CountStats, ConservationAndExactRatio) {
  const auto model = init_model(ModelConfig{}, 12);
  const auto shape = ArchShape::from_model(model);
  const auto groups = discover_groups(build_graph(shape), PruneUnit::kBlock);
  const auto scores = score_groups(groups, model, nullptr, {Method::kL2});
  const auto plan = rank_and_select(groups, scores, shape, PruneUnit::kBlock, 0.2, {0, 3});
  const auto pruned = apply_plan(model, plan);
  const auto before = count_stats(model);
  const auto after = count_stats(pruned, 64, model.param_count());
  EXPECT_EQ(after.param_count, before.param_count - plan.predicted_delta);
  EXPECT_EQ(after.achieved_ratio, plan.predicted_ratio());
  EXPECT_EQ(after.memory_bytes, after.param_count * 8);
  EXPECT_LT(after.macs, before.macs);
}

TEST(CountStats, DefaultParamCountMatchesFormula) {
  const ModelConfig c;
  EXPECT_EQ(count_stats(init_model(c, 1)).param_count, c.analytic_param_count());
}

TEST(CountStats, Idempotent) {
  const auto model = init_model(tiny_config(), 13);
  const auto a = count_stats(model), b = count_stats(model);
  EXPECT_EQ(a.param_count, b.param_count);
  EXPECT_EQ(a.macs, b.macs);
  EXPECT_EQ(a.memory_bytes, b.memory_bytes);
}

TEST(CountStats, MacsIncludeAttentionMaps) {
  const ModelConfig c = tiny_config();
  const auto model = init_model(c, 14);
  const std::size_t T = 16, d = 8, f = 6, V = 259, L = 2;
  // Projections (q,k,v,o), MLP (gate, up, down), scores + context, lm_head.
  const std::size_t expected = L * (4 * T * d * d + 3 * T * d * f + 2 * T * T * d) + T * d * V;
  EXPECT_EQ(count_macs(model, 16), expected);
}

// Per removed parameter, an MLP channel saves exactly T MACs and a head more
// than T; a residual channel also drops embedding and position weights that
// cost no MACs, so on an embedding-heavy model Block removes more MACs.
TEST(CountStats, MacsPerRemovedParamFollowFormula) {
  const auto model = init_model(ModelConfig{}, 15);
  const auto shape = ArchShape::from_model(model);
  std::size_t macs[2];
  double ratios[2];
  int i = 0;
  for (const auto unit : {PruneUnit::kBlock, PruneUnit::kChannel}) {
    const auto groups = discover_groups(build_graph(shape), unit);
    const auto plan = rank_and_select(groups, score_groups(groups, model, nullptr, {Method::kL2}),
                                      shape, unit, 0.2, {});
    const auto pruned = apply_plan(model, plan);
    macs[i] = count_macs(pruned, 64);
    ratios[i++] = plan.predicted_ratio();
  }
  EXPECT_NEAR(ratios[0], ratios[1], 0.02);
  EXPECT_LT(macs[0], macs[1]);
}

TEST(AchievedRatio, BillionScaleCounts) {
  EXPECT_NEAR(achieved_ratio(6.74, 5.42), 0.1958, 1e-4);
  EXPECT_EQ(achieved_ratio(100, 80), 0.2);
}

}  // namespace
}  // namespace dprune
