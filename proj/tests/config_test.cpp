#include "ilkd/config.hpp"
#include "ilkd/errors.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

namespace ilkd {
namespace {

Json incremental_stage(const std::string& method) {
  return Json{{"method", method},
              {"stage", 2},
              {"task", "accent"},
              {"train_data", {"accent_train.ilad"}},
              {"test_data", {{{"name", "base"}, {"path", "base_test.ilad"}}, {{"name", "accent"}, {"path", "accent_test.ilad"}}}},
              {"input_checkpoint", "pre.ilck"},
              {"output_checkpoint", "out.ilck"}};
}

TEST(ConfigParsing, FillsMethodDefaults) {
  const StageConfig rbkd = stage_config_from_json(incremental_stage("rbkd"));
  EXPECT_EQ(rbkd.method, Method::Rbkd);
  EXPECT_DOUBLE_EQ(rbkd.weights.temperature, 3.0);
  EXPECT_DOUBLE_EQ(rbkd.weights.beta, 0.03);
  EXPECT_DOUBLE_EQ(rbkd.weights.gamma, 0.0);
  EXPECT_EQ(rbkd.optimizer, SequencePlan{}.incremental_optimizer);

  const StageConfig ours = stage_config_from_json(incremental_stage("ebkd_rbkd"));
  EXPECT_DOUBLE_EQ(ours.weights.beta, 0.03);
  EXPECT_DOUBLE_EQ(ours.weights.gamma, 500.0);
  EXPECT_DOUBLE_EQ(ours.weights.lambda_ewc, 0.0);

  const StageConfig ewc = stage_config_from_json(incremental_stage("rbkd_ewc"));
  EXPECT_GT(ewc.weights.lambda_ewc, 0.0);
  EXPECT_DOUBLE_EQ(ewc.weights.gamma, 0.0);

  const StageConfig fine = stage_config_from_json(incremental_stage("finetune"));
  EXPECT_DOUBLE_EQ(fine.weights.beta, 0.0);
  EXPECT_DOUBLE_EQ(fine.weights.gamma, 0.0);
}

TEST(ConfigParsing, RejectsWeightsTheMethodDoesNotUse) {
  Json j = incremental_stage("finetune");
  j["weights"] = {{"beta", 0.03}};
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("rbkd");
  j["weights"] = {{"gamma", 500.0}};
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("rbkd_ewc");
  j["weights"] = {{"lambda_ewc", 0.0}};
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("ebkd_rbkd");
  j["weights"] = {{"beta", 0.0}, {"gamma", 0.0}};
  EXPECT_NO_THROW(stage_config_from_json(j));
}

TEST(ConfigParsing, RejectsUnknownKeysAndWrongTypes) {
  Json j = incremental_stage("rbkd");
  j["learning_rate"] = 0.1;
  try {
    stage_config_from_json(j);
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }

  j = incremental_stage("rbkd");
  j["optimizer"] = {{"peak_lr", "fast"}};
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("rbkd");
  j["weights"] = {{"T", -1.0}};
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("rbkd");
  j["seed"] = -3;
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("rbkd");
  j["method"] = "distill";
  EXPECT_THROW(stage_config_from_json(j), ConfigError);
}

TEST(ConfigParsing, EnforcesStageContracts) {
  Json j = incremental_stage("rbkd");
  j.erase("input_checkpoint");
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("rbkd");
  j["train_data"] = {"accent_train.ilad", "base_train.ilad"};
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("pretrain");
  EXPECT_THROW(stage_config_from_json(j), ConfigError);  // pretrain takes no input checkpoint

  j = incremental_stage("rbkd");
  j.erase("output_checkpoint");
  EXPECT_THROW(stage_config_from_json(j), ConfigError);

  j = incremental_stage("rbkd");
  j["test_data"] = {{{"name", "base"}, {"path", "a"}}, {{"name", "base"}, {"path", "b"}}};
  EXPECT_THROW(stage_config_from_json(j), ConfigError);
}

TEST(ConfigParsing, StageRoundTrip) {
  Json j = incremental_stage("ebkd_rbkd");
  j["weights"] = {{"gamma", 200.0}};
  j["optimizer"] = {{"total_steps", 10}};
  j["seed"] = 42;
  const StageConfig c = stage_config_from_json(j);
  EXPECT_EQ(c.optimizer.total_steps, 10);
  EXPECT_DOUBLE_EQ(c.optimizer.peak_lr, SequencePlan{}.incremental_optimizer.peak_lr);
  const StageConfig again = stage_config_from_json(to_json(c));
  EXPECT_EQ(again, c);
}

TEST(ConfigParsing, ModelRoundTripAndValidation) {
  const ModelConfig tiny = tiny_config(4, 13);
  EXPECT_EQ(model_config_from_json(to_json(tiny)), tiny);
  Json bad = to_json(tiny);
  bad["num_heads"] = 3;  // does not divide d_h = 8
  EXPECT_THROW(model_config_from_json(bad), ConfigError);
  bad = to_json(tiny);
  bad["conv_layers"][0]["dilation"] = 2;
  EXPECT_THROW(model_config_from_json(bad), ConfigError);
}

TEST(ConfigParsing, TaskSpecFamilies) {
  const TaskSpec base = task_spec_from_json(Json{{"family", "base"}, {"num_samples", 10}});
  EXPECT_EQ(base.inventory, (std::vector<Label>{1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_FALSE(base.transform);

  const TaskSpec accent = task_spec_from_json(Json{{"family", "accent"}, {"rotation_strength", 0.5}});
  EXPECT_EQ(accent.task_id, "accent");
  EXPECT_TRUE(accent.transform);
  EXPECT_EQ(accent.prototypes, base.prototypes);

  const TaskSpec words = task_spec_from_json(Json{{"family", "newwords"}, {"new_symbols", {9, 10}}});
  EXPECT_EQ(words.inventory.size(), 10u);

  EXPECT_THROW(task_spec_from_json(Json{{"family", "accent"}}), ConfigError);
  EXPECT_THROW(task_spec_from_json(Json{{"family", "tonal"}}), ConfigError);
  EXPECT_THROW(task_spec_from_json(Json{{"family", "newwords"}, {"new_symbols", {3}}}), ConfigError);
  EXPECT_THROW(task_spec_from_json(Json{{"noise", 0.1}}), ConfigError);
}

TEST(ConfigParsing, SequencePlan) {
  const Json j{{"seed", 5},
               {"output_dir", "runs/x"},
               {"tasks", {{{"name", "base"}, {"train", "b.tr"}, {"test", "b.te"}},
                          {{"name", "accent"}, {"train", "a.tr"}, {"test", "a.te"}}}},
               {"methods", {"finetune", "ebkd_rbkd"}},
               {"weights", {{"ebkd_rbkd", {{"gamma", 100.0}}}}}};
  const SequencePlan p = sequence_plan_from_json(j);
  EXPECT_EQ(p.seed, 5u);
  ASSERT_EQ(p.methods.size(), 2u);
  ASSERT_EQ(p.weights.size(), 1u);
  EXPECT_DOUBLE_EQ(p.weights[0].second.gamma, 100.0);
  EXPECT_DOUBLE_EQ(p.weights[0].second.beta, 0.03);

  Json no_tasks = j;
  no_tasks.erase("tasks");
  EXPECT_THROW(sequence_plan_from_json(no_tasks), ConfigError);
  Json with_pretrain = j;
  with_pretrain["methods"] = {"pretrain"};
  EXPECT_THROW(sequence_plan_from_json(with_pretrain), ConfigError);
}

TEST(ConfigFiles, LoadErrors) {
  testing::TempDir dir("config");
  EXPECT_THROW(load_json_file(dir.file("missing.json")), DataError);
  {
    std::ofstream out(dir.file("broken.json"));
    out << "{\"method\": ";
  }
  EXPECT_THROW(load_json_file(dir.file("broken.json")), ConfigError);
  const Json j{{"a", 1}, {"b", {1, 2}}};
  save_json_file(j, dir.file("ok.json"));
  EXPECT_EQ(load_json_file(dir.file("ok.json")), j);
}

}  // namespace
}  // namespace ilkd
