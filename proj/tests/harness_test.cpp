#include "ilkd/checkpoint_io.hpp"
#include "ilkd/config.hpp"
#include "ilkd/errors.hpp"
#include "ilkd/harness.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace ilkd {
namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TaskSpec small_base() {
  BaseTaskOptions o;
  o.feature_dim = 4;
  o.proto_len = 4;
  o.min_len = 2;
  o.max_len = 3;
  return make_base_task(o);
}

OptimizerSettings quick(std::int64_t steps) {
  OptimizerSettings s;
  s.total_steps = steps;
  s.warmup_steps = 2;
  s.batch_size = 4;
  return s;
}

// Two small tasks on disk plus a briefly pre-trained teacher carrying EWC state.
class HarnessTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("harness");
    const TaskSpec base = small_base();
    const TaskSpec accent = derive_accent_task(base, 0.8, 11);
    write_dataset(generate_task(with_draw(base, 24, 1)), path("base_train.ilad"));
    write_dataset(generate_task(with_draw(base, 8, 2)), path("base_test.ilad"));
    write_dataset(generate_task(with_draw(accent, 24, 3)), path("accent_train.ilad"));
    write_dataset(generate_task(with_draw(accent, 8, 4)), path("accent_test.ilad"));

    StageConfig pre;
    pre.method = Method::Pretrain;
    pre.weights = default_weights(Method::Pretrain);
    pre.train_data = {path("base_train.ilad")};
    pre.test_data = {{"base", path("base_test.ilad")}};
    pre.model = tiny_config(4, 13);
    pre.optimizer = quick(6);
    pre.fisher_samples = 8;
    pre.output_checkpoint = path("pre.ilck");
    train_stage(pre);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static std::string path(const std::string& name) { return dir_->file(name); }

  static StageConfig incremental(Method method, const std::string& out) {
    StageConfig c;
    c.stage = 2;
    c.method = method;
    c.task = "accent";
    c.weights = default_weights(method);
    c.train_data = {path("accent_train.ilad")};
    c.test_data = {{"base", path("base_test.ilad")}, {"accent", path("accent_test.ilad")}};
    c.optimizer = quick(5);
    c.seed = 9;
    c.fisher_samples = 8;
    c.input_checkpoint = path("pre.ilck");
    c.output_checkpoint = path(out + ".ilck");
    return c;
  }

  static TrainingRequest request(Method method, const Dataset& train, const Checkpoint& teacher) {
    TrainingRequest r;
    r.method = method;
    r.train = &train;
    r.teacher = &teacher;
    r.weights = default_weights(method);
    r.optimizer = quick(5);
    r.seed = 3;
    return r;
  }

  static testing::TempDir* dir_;
};

testing::TempDir* HarnessTest::dir_ = nullptr;

TEST(Methods, NamesRoundTrip) {
  for (Method m : {Method::Pretrain, Method::Finetune, Method::Joint, Method::Rbkd, Method::RbkdEwc, Method::EbkdRbkd})
    EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("ewc"), ConfigError);
  EXPECT_TRUE(is_incremental(Method::EbkdRbkd));
  EXPECT_FALSE(is_incremental(Method::Joint));
}

TEST(Methods, DefaultWeights) {
  const LossWeights w = default_weights(Method::EbkdRbkd);
  EXPECT_DOUBLE_EQ(w.temperature, 3.0);
  EXPECT_DOUBLE_EQ(w.beta, 0.03);
  EXPECT_DOUBLE_EQ(w.gamma, 500.0);
  EXPECT_DOUBLE_EQ(w.lambda_ewc, 0.0);
  EXPECT_DOUBLE_EQ(default_weights(Method::Finetune).beta, 0.0);
}

TEST_F(HarnessTest, DegenerateWeightsReproduceFinetuneBitForBit) {
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  const Dataset train = read_dataset(path("accent_train.ilad"));
  const Checkpoint fine = train_model(request(Method::Finetune, train, teacher));

  TrainingRequest ours = request(Method::EbkdRbkd, train, teacher);
  ours.weights.beta = 0.0;
  ours.weights.gamma = 0.0;
  EXPECT_EQ(train_model(ours).params, fine.params);

  TrainingRequest rbkd = request(Method::Rbkd, train, teacher);
  rbkd.weights.beta = 0.0;
  EXPECT_EQ(train_model(rbkd).params, fine.params);
  EXPECT_NE(teacher.params, fine.params);
}

TEST_F(HarnessTest, ZeroGammaReproducesRbkd) {
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  const Dataset train = read_dataset(path("accent_train.ilad"));
  TrainingRequest ours = request(Method::EbkdRbkd, train, teacher);
  ours.weights.gamma = 0.0;
  const Checkpoint rbkd = train_model(request(Method::Rbkd, train, teacher));
  EXPECT_EQ(train_model(ours).params, rbkd.params);
  EXPECT_NE(train_model(request(Method::EbkdRbkd, train, teacher)).params, rbkd.params);
}

TEST_F(HarnessTest, ZeroStepsReturnTheTeacher) {
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  const Dataset train = read_dataset(path("accent_train.ilad"));
  TrainingRequest r = request(Method::EbkdRbkd, train, teacher);
  r.optimizer.total_steps = 0;
  EXPECT_EQ(train_model(r).params, teacher.params);
}

TEST_F(HarnessTest, RequestContracts) {
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  const Dataset train = read_dataset(path("accent_train.ilad"));
  TrainingRequest no_teacher = request(Method::Rbkd, train, teacher);
  no_teacher.teacher = nullptr;
  EXPECT_THROW(train_model(no_teacher), ConfigError);

  Checkpoint plain = teacher;
  plain.ewc.reset();
  EXPECT_THROW(train_model(request(Method::RbkdEwc, train, plain)), ConfigError);
  EXPECT_NO_THROW(train_model(request(Method::RbkdEwc, train, teacher)));

  Dataset empty;
  EXPECT_THROW(train_model(request(Method::Finetune, empty, teacher)), DataError);
}

TEST_F(HarnessTest, NonFiniteLossNamesTheStep) {
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  Dataset train = read_dataset(path("accent_train.ilad"));
  for (auto& s : train.samples) s.x(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    train_model(request(Method::Finetune, train, teacher));
    FAIL() << "NaN features were accepted";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST_F(HarnessTest, TeacherFileIsNotModified) {
  const std::string before = slurp(path("pre.ilck"));
  train_stage(incremental(Method::EbkdRbkd, "teacher_check"));
  EXPECT_EQ(slurp(path("pre.ilck")), before);
}

TEST_F(HarnessTest, IncrementalStageOpensOnlyItsTrainingSet) {
  StageConfig c = incremental(Method::Rbkd, "access");
  c.output_dir = path("access_out");
  const StageResult r = train_stage(c);
  ASSERT_EQ(r.data_access.size(), 3u);
  EXPECT_EQ(r.data_access[0], (DataAccess{"train", path("accent_train.ilad")}));
  EXPECT_EQ(r.data_access[1].phase, "eval");
  EXPECT_EQ(r.data_access[2].phase, "eval");
  for (const auto& a : r.data_access)
    if (a.phase == "train") EXPECT_EQ(a.path, path("accent_train.ilad"));

  const Json logged = load_json_file(c.output_dir + "/data_access.json");
  ASSERT_EQ(logged.size(), 3u);
  EXPECT_EQ(logged[0]["phase"], "train");
  EXPECT_TRUE(fs::exists(c.output_dir + "/eval_base.csv"));
  EXPECT_TRUE(fs::exists(c.output_dir + "/eval_accent.summary.json"));
  EXPECT_EQ(stage_config_from_json(load_json_file(c.output_dir + "/resolved_config.json")), c);
}

TEST_F(HarnessTest, StageIsDeterministic) {
  StageConfig a = incremental(Method::EbkdRbkd, "det");
  a.output_dir = path("det_a");
  StageConfig b = a;
  b.output_dir = path("det_b");
  train_stage(a);
  const std::string first = slurp(a.output_checkpoint);
  train_stage(b);
  EXPECT_EQ(slurp(b.output_checkpoint), first);
  EXPECT_EQ(slurp(a.output_dir + "/eval_base.csv"), slurp(b.output_dir + "/eval_base.csv"));
}

TEST_F(HarnessTest, StageResultsCarryMetadataAndEwc) {
  const StageResult r = train_stage(incremental(Method::Finetune, "meta"));
  EXPECT_EQ(r.checkpoint.stage, 2);
  EXPECT_EQ(r.checkpoint.method, "finetune");
  ASSERT_TRUE(r.checkpoint.ewc);
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  for (const auto& [name, f] : r.checkpoint.ewc->fisher)
    EXPECT_TRUE((f.array() >= teacher.ewc->fisher.at(name).array()).all()) << name;
  ASSERT_EQ(r.reports.size(), 2u);
  EXPECT_EQ(r.reports[1].task, "accent");
}

SequencePlan small_plan(const std::string& root, const std::string& data) {
  SequencePlan p;
  p.seed = 4;
  p.output_dir = root;
  p.model = tiny_config(4, 13);
  p.tasks = {{"base", data + "/base_train.ilad", data + "/base_test.ilad"},
             {"accent", data + "/accent_train.ilad", data + "/accent_test.ilad"}};
  p.methods = {Method::Finetune, Method::EbkdRbkd, Method::Joint};
  p.pretrain_optimizer = quick(4);
  p.incremental_optimizer = quick(3);
  p.fisher_samples = 4;
  return p;
}

TEST_F(HarnessTest, PlanExpansion) {
  SequencePlan p = small_plan(path("plan"), dir_->path().string());
  p.methods = {Method::Finetune, Method::Rbkd, Method::RbkdEwc, Method::EbkdRbkd, Method::Joint};
  p.tasks.push_back({"words", "w.tr", "w.te"});
  const RunManifest m = expand_plan(p);
  ASSERT_EQ(m.stages.size(), 1u + 5u * 2u);
  EXPECT_EQ(m.stages[0].method, Method::Pretrain);
  EXPECT_EQ(m.stages[1].input_checkpoint, m.stages[0].output_checkpoint);
  EXPECT_EQ(m.stages[2].input_checkpoint, m.stages[1].output_checkpoint);
  EXPECT_EQ(m.stages[2].test_data.size(), 3u);
  const StageConfig& joint3 = m.stages.back();
  EXPECT_EQ(joint3.method, Method::Joint);
  EXPECT_EQ(joint3.train_data.size(), 3u);
  EXPECT_FALSE(joint3.input_checkpoint);

  EXPECT_EQ(expand_plan(p).config_hash, m.config_hash);
  SequencePlan other = p;
  other.seed = 5;
  EXPECT_NE(expand_plan(other).config_hash, m.config_hash);

  RunManifest broken = m;
  broken.stages[2].input_checkpoint = "elsewhere.ilck";
  EXPECT_THROW(broken.validate(), ConfigError);
  other.methods = {Method::Pretrain};
  EXPECT_THROW(expand_plan(other), ConfigError);
}

TEST_F(HarnessTest, SequenceRunIsReproducible) {
  const RunManifest m = expand_plan(small_plan(path("seq"), dir_->path().string()));
  const SequenceResult first = run_sequence(m);
  EXPECT_EQ(first.methods, (std::vector<std::string>{"finetune", "ebkd_rbkd", "joint"}));
  const std::string root = path("seq");
  for (const char* f : {"cer_table.csv", "stage_summary.csv", "manifest.resolved.json", "finetune/cer_matrix.csv",
                        "ebkd_rbkd/cer_matrix.csv", "joint/cer_matrix.csv", "finetune/stage2/model.ilck"})
    EXPECT_TRUE(fs::exists(root + "/" + f)) << f;
  const std::string table = slurp(root + "/cer_table.csv");
  const std::string fig = slurp(root + "/stage_summary.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "method,s1_base,s2_base,s2_accent");

  const SequenceResult second = run_sequence(m);
  EXPECT_EQ(slurp(root + "/cer_table.csv"), table);
  EXPECT_EQ(slurp(root + "/stage_summary.csv"), fig);
  EXPECT_EQ(second.cer_table_csv(), first.cer_table_csv());
  EXPECT_DOUBLE_EQ(first.cer("finetune", 1, "base"), first.cer("ebkd_rbkd", 1, "base"));
  EXPECT_DOUBLE_EQ(first.original_task_cer("finetune"), first.cer("finetune", 2, "base"));
  EXPECT_DOUBLE_EQ(first.new_task_cer("joint"), first.cer("joint", 2, "accent"));
}

TEST_F(HarnessTest, SequenceFailureNamesTheStage) {
  SequencePlan p = small_plan(path("broken"), dir_->path().string());
  p.tasks[1].train = path("no_such_file.ilad");
  const RunManifest m = expand_plan(p);
  try {
    run_sequence(m);
    FAIL() << "missing training file accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 2 (finetune): "), std::string::npos) << e.what();
  }
}

TEST(SequenceMetrics, OriginalAndNewTaskAverages) {
  SequenceResult r;
  r.tasks = {"a", "b", "c"};
  r.methods = {"m"};
  r.outcomes = {{1, "pretrain", "a", {{"a", 0.1}}},
                {2, "m", "b", {{"a", 0.2}, {"b", 0.3}}},
                {3, "m", "c", {{"a", 0.4}, {"b", 0.6}, {"c", 0.05}}}};
  EXPECT_NEAR(r.original_task_cer("m"), (0.2 + 0.5) / 2.0, 1e-15);
  EXPECT_NEAR(r.new_task_cer("m"), (0.3 + 0.05) / 2.0, 1e-15);
  EXPECT_EQ(r.cer_matrix_csv("m"), "stage,a,b,c\n1,10.00,,\n2,20.00,30.00,\n3,40.00,60.00,5.00\n");
  EXPECT_EQ(r.stage_summary_csv(), "method,stage,original_cer,new_cer\nm,2,20.00,30.00\nm,3,50.00,5.00\n");
  EXPECT_THROW(r.cer("m", 4, "a"), std::out_of_range);
}

TEST(Sweep, GridsAndAxes) {
  EXPECT_EQ(default_grid(SweepAxis::Temperature), (std::vector<double>{1, 2, 3, 4, 5}));
  EXPECT_EQ(default_grid(SweepAxis::Beta), (std::vector<double>{0.01, 0.02, 0.03, 0.04, 0.05}));
  EXPECT_EQ(default_grid(SweepAxis::Gamma), (std::vector<double>{100, 200, 500, 1000, 2000}));
  EXPECT_EQ(parse_axis("gamma"), SweepAxis::Gamma);
  EXPECT_EQ(parse_axis("T"), SweepAxis::Temperature);
  EXPECT_THROW(parse_axis("lambda"), ConfigError);
}

TEST_F(HarnessTest, SweepEmitsOneRowPerValue) {
  StageConfig base = incremental(Method::EbkdRbkd, "sweep_base");
  base.output_dir = path("sweep");
  const std::vector<double> values{100, 2000};
  const SweepResult r = sweep(base, SweepAxis::Gamma, values);
  ASSERT_EQ(r.points.size(), 2u);
  EXPECT_DOUBLE_EQ(r.points[1].value, 2000);
  EXPECT_NEAR(r.points[0].original_increment, r.points[0].original_cer - r.teacher_original_cer, 1e-15);
  const std::string csv = slurp(path("sweep/sweep_gamma.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const Json series = load_json_file(path("sweep/sweep_gamma.json"));
  EXPECT_EQ(series["values"].size(), 2u);
  EXPECT_TRUE(fs::exists(path("sweep/gamma_2000/model.ilck")));

  EXPECT_THROW(sweep(incremental(Method::Rbkd, "x"), SweepAxis::Gamma, values), ConfigError);
  const std::vector<double> bad{0.0};
  EXPECT_THROW(sweep(base, SweepAxis::Beta, bad), ConfigError);
}

TEST_F(HarnessTest, SingleValueSweepMatchesOneStage) {
  StageConfig base = incremental(Method::Rbkd, "single");
  base.output_dir = path("single_sweep");
  const std::vector<double> values{0.03};
  const SweepResult r = sweep(base, SweepAxis::Beta, values);
  const StageResult direct = train_stage(base);
  EXPECT_EQ(read_checkpoint(path("single_sweep/beta_0.03/model.ilck")).params, direct.checkpoint.params);
  EXPECT_DOUBLE_EQ(r.points[0].new_cer, direct.reports[1].corpus_cer());
}

TEST_F(HarnessTest, CorrelationWithIdenticalModelsIsReportedUndefined) {
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  const Dataset test = read_dataset(path("base_test.ilad"));
  const CorrelationReport r = analyze_correlation(teacher, teacher, test, 8, 1);
  EXPECT_EQ(r.n_samples, 8u);
  for (const auto& s : r.samples.samples) EXPECT_EQ(*s.ebkd_loss, 0.0);
  EXPECT_FALSE(r.r_all);
  EXPECT_NE(r.r_all_note.find("undefined"), std::string::npos) << r.r_all_note;
  const Json summary = Json::parse(r.summary_json());
  EXPECT_TRUE(summary["r_all"].is_null());
  EXPECT_TRUE(summary.contains("r_all_note"));

  EXPECT_THROW(analyze_correlation(teacher, teacher, test, 9, 1), ConfigError);
  EXPECT_THROW(analyze_correlation(teacher, teacher, test, 0, 1), ConfigError);
  Checkpoint other = init_model(tiny_config(4, 13), 99);
  other.config.d_h = 16;
  EXPECT_THROW(analyze_correlation(other, teacher, test, 4, 1), ConfigError);
}

TEST_F(HarnessTest, CorrelationSamplingIsSeeded) {
  const Checkpoint teacher = read_checkpoint(path("pre.ilck"));
  const StageResult student = train_stage(incremental(Method::Finetune, "corr"));
  const Dataset test = read_dataset(path("base_test.ilad"));
  const CorrelationReport a = analyze_correlation(student.checkpoint, teacher, test, 5, 7);
  const CorrelationReport b = analyze_correlation(student.checkpoint, teacher, test, 5, 7);
  ASSERT_EQ(a.samples.samples.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.samples.samples[i].sample_id, b.samples.samples[i].sample_id);
    EXPECT_GT(*a.samples.samples[i].ebkd_loss, 0.0);
  }
}

}  // namespace
}  // namespace ilkd
