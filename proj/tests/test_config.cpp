#include <gtest/gtest.h>

#include <cmath>

#include "topo_nas/config.hpp"

using namespace topo_nas;

namespace {

ErrorCategory category_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const Error& e) {
    return e.category();
  }
  ADD_FAILURE() << "config accepted:\n" << text;
  return ErrorCategory::invalid_argument;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughCanonicalText) {
  const ExperimentConfig c;
  const auto back = parse_config_text(c.canonical());
  EXPECT_EQ(back.canonical(), c.canonical());
  EXPECT_EQ(back.hash(), c.hash());
}

TEST(Config, EmptyTextGivesDefaults) {
  EXPECT_EQ(parse_config_text("").hash(), ExperimentConfig{}.hash());
}

TEST(Config, EditedRoundTrip) {
  const auto c = parse_config_text(
      "[experiment]\nseed = 99\n[space]\nstage_sizes = 3,4\nbase_width = 6\nexpansions = 1,6\nkernels = medium\n"
      "aggregation = sum\n[sgld]\nalpha = 0.003\nnoise_scale = 0.25\n[evolution]\nmutation_rate = 0.2\n"
      "estimator = sgld_acc\nbands = 0:1000;1000:inf\n");
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.space.stage_sizes, (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(c.dataset.width, 6u);
  EXPECT_EQ(c.space.aggregation, Aggregation::sum);
  EXPECT_DOUBLE_EQ(c.sgld_alpha(), 0.003);
  EXPECT_DOUBLE_EQ(c.evolution.mutation_rate, 0.2);
  EXPECT_EQ(c.evolution.estimator, EstimatorTag::sgld_acc);
  ASSERT_EQ(c.evolution.bands.size(), 2u);
  EXPECT_TRUE(std::isinf(c.evolution.bands[1].hi));
  const auto back = parse_config_text(c.canonical());
  EXPECT_EQ(back.canonical(), c.canonical());
}

TEST(Config, AutoAlphaFollowsSupernetFinalRate) {
  const auto c = parse_config_text("[supernet]\nlr_final = 0.02\n[sgld]\nalpha = auto\n");
  EXPECT_DOUBLE_EQ(c.sgld_alpha(), 0.02);
}

TEST(Config, HashTracksEveryField) {
  const auto base = ExperimentConfig{}.hash();
  EXPECT_NE(parse_config_text("[experiment]\nseed = 2\n").hash(), base);
  EXPECT_NE(parse_config_text("[sgld]\nepochs = 21\n").hash(), base);
  EXPECT_NE(parse_config_text("[evolution]\nbands = 0:5\n").hash(), base);
  // Formatting and comments do not matter.
  EXPECT_EQ(parse_config_text("; note\n[experiment]\n  seed   =   1  \n").hash(), base);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_EQ(category_of("[supernet]\nepoch = 3\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[nonsense]\nx = 1\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[supernet]\nepochs = three\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[supernet]\nepochs = -3\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[space]\nkernels = huge\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[evolution]\nbands = 5\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[evolution]\nestimator = ground_truth\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[estimation]\ntail = 0\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[sampler]\np_drop = 1.5\n"), ErrorCategory::parse);
  EXPECT_EQ(category_of("[experiment\nseed = 1\n"), ErrorCategory::parse);
}

TEST(Config, SpaceDefinitionRoundTrip) {
  SpaceDefinition d;
  d.stage_sizes = {2, 3};
  d.base_width = 5;
  const auto text = space_definition_text(d);
  const auto back = parse_space_definition(text);
  EXPECT_EQ(back.build().hash(), d.build().hash());
}

TEST(Config, MissingFileIsIoError) {
  try {
    load_config("/nonexistent/topo-nas.ini");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::io);
  }
}
