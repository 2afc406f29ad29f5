// Pre-training, incremental stages, multi-stage sequences, hyperparameter
// sweeps and the CER / EBKD-loss correlation analysis.
//
// Teacher-student flow: an incremental stage loads the previous stage's
// checkpoint as a frozen teacher and starts the student from a copy of it.
// Training reads only the stage's own training set; held-out test sets of all
// visited tasks are opened after the student is final, for evaluation.

#pragma once

#include "ilkd/data.hpp"
#include "ilkd/losses.hpp"
#include "ilkd/metrics.hpp"
#include "ilkd/model.hpp"
#include "ilkd/optimizer.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ilkd {

enum class Method { Pretrain, Finetune, Joint, Rbkd, RbkdEwc, EbkdRbkd };

std::string_view method_name(Method method);
/// Throws ConfigError for an unknown name.
Method parse_method(std::string_view name);
bool is_incremental(Method method);
/// Weights used when a config leaves them unset: terms the method does not
/// use are 0, the rest take the desk-scale defaults (T=3, beta=0.03,
/// gamma=500, lambda_ewc=1).
LossWeights default_weights(Method method);

using LogFn = std::function<void(const std::string&)>;

struct TestSet {
  std::string name;
  std::string path;
  bool operator==(const TestSet&) const = default;
};

struct StageConfig {
  std::int32_t stage = 1;
  Method method = Method::Pretrain;
  /// Name of the task learned in this stage; matches one test set's name.
  std::string task = "base";
  std::vector<std::string> train_data;
  std::vector<TestSet> test_data;
  LossWeights weights = default_weights(Method::Pretrain);
  OptimizerSettings optimizer;
  /// Architecture for methods that start from scratch (pretrain, joint).
  ModelConfig model;
  std::uint64_t seed = 1;
  std::optional<std::string> input_checkpoint;
  std::string output_checkpoint;
  /// Receives the resolved config, evaluation reports and the data-access log.
  /// Empty: nothing is written besides the checkpoint.
  std::string output_dir;
  /// Samples used for the end-of-stage Fisher estimate; 0 uses all.
  std::int64_t fisher_samples = 500;

  /// Throws ConfigError naming the violated method contract.
  void validate() const;
  bool operator==(const StageConfig&) const = default;
};

/// One training run in memory. `teacher` is required for incremental methods
/// and must be absent otherwise.
struct TrainingRequest {
  Method method = Method::Pretrain;
  const Dataset* train = nullptr;
  const Checkpoint* teacher = nullptr;
  LossWeights weights;
  OptimizerSettings optimizer;
  ModelConfig model;
  std::uint64_t seed = 1;
};

/// Returns the trained parameters with stage metadata left for the caller.
/// Throws NumericalError with the step and loss components on a non-finite loss.
Checkpoint train_model(const TrainingRequest& request, const LogFn& log = {});

/// Greedy-decodes every sample. With a teacher, also records each sample's
/// EBKD loss between teacher and `model` attention maps.
EvalReport evaluate(const Checkpoint& model, const Dataset& data, const std::string& task,
                    const Checkpoint* teacher = nullptr);

/// Diagonal Fisher on `data` anchored at `model`, added to any Fisher already
/// carried by `previous`.
EwcState consolidate(const Checkpoint& model, const Dataset& data, std::int64_t num_samples, std::uint64_t seed,
                     const std::optional<EwcState>& previous);

struct DataAccess {
  std::string phase;  // "train" or "eval"
  std::string path;
  bool operator==(const DataAccess&) const = default;
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<EvalReport> reports;  // test_data order
  std::vector<DataAccess> data_access;
};

StageResult train_stage(const StageConfig& config, const LogFn& log = {});

struct TaskFiles {
  std::string name;
  std::string train;
  std::string test;
  bool operator==(const TaskFiles&) const = default;
};

/// Declarative multi-stage experiment: task i is learned in stage i + 1,
/// stage 1 is a shared pre-training run and every listed method continues
/// from it.
struct SequencePlan {
  std::uint64_t seed = 1;
  std::string output_dir;
  ModelConfig model;
  std::vector<TaskFiles> tasks;
  std::vector<Method> methods{Method::Finetune, Method::Rbkd, Method::RbkdEwc, Method::EbkdRbkd, Method::Joint};
  OptimizerSettings pretrain_optimizer;
  OptimizerSettings incremental_optimizer{1e-3, 100, 1000, 32};
  /// Overrides of default_weights, per method.
  std::vector<std::pair<Method, LossWeights>> weights;
  std::int64_t fisher_samples = 500;
};

struct RunManifest {
  std::uint64_t seed = 1;
  std::string output_dir;
  std::vector<std::string> tasks;
  std::vector<StageConfig> stages;
  /// FNV-1a of the canonical JSON form of `stages`.
  std::string config_hash;

  /// Throws ConfigError unless each incremental stage consumes the output of
  /// an earlier stage with index one lower.
  void validate() const;
};

RunManifest expand_plan(const SequencePlan& plan);
std::string manifest_hash(const std::vector<StageConfig>& stages);

struct StageOutcome {
  std::int32_t stage = 0;
  std::string method;
  std::string task;
  std::vector<std::pair<std::string, double>> cer;  // per visited test task, as a ratio
};

struct SequenceResult {
  std::vector<std::string> tasks;
  std::vector<std::string> methods;
  std::vector<StageOutcome> outcomes;
  std::string config_hash;

  /// CER of `method`'s model after `stage` on `task`; stage 1 resolves to
  /// the shared pre-training run.
  double cer(std::string_view method, std::int32_t stage, std::string_view task) const;
  /// Mean over stages >= 2 of the mean CER on tasks learned before that stage.
  double original_task_cer(std::string_view method) const;
  /// Mean over stages >= 2 of the CER on the task learned in that stage.
  double new_task_cer(std::string_view method) const;

  /// Rows = methods, columns = (stage, task) pairs, CER in percent.
  std::string cer_table_csv() const;
  /// method,stage,original_cer,new_cer per incremental stage, in percent.
  std::string stage_summary_csv() const;
  /// Rows = stages, columns = tasks, for one method.
  std::string cer_matrix_csv(std::string_view method) const;
};

/// Runs every stage in order. Failures are rethrown with the stage index and
/// method prefixed to the message, keeping the error category.
SequenceResult run_sequence(const RunManifest& manifest, const LogFn& log = {});

enum class SweepAxis { Temperature, Beta, Gamma };

std::string_view axis_name(SweepAxis axis);
/// Accepts "T", "beta", "gamma"; throws ConfigError otherwise.
SweepAxis parse_axis(std::string_view name);
/// T in {1..5}, beta in {0.01..0.05}, gamma in {100, 200, 500, 1000, 2000}.
std::vector<double> default_grid(SweepAxis axis);

struct SweepPoint {
  double value = 0.0;
  double original_cer = 0.0;
  double new_cer = 0.0;
  /// Student minus teacher CER on the original tasks (mean) and the new task.
  double original_increment = 0.0;
  double new_increment = 0.0;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::Gamma;
  double teacher_original_cer = 0.0;
  double teacher_new_cer = 0.0;
  std::vector<SweepPoint> points;

  std::string csv() const;
  /// Plot-ready series: {"axis", "values", "original_increment", "new_increment"}.
  std::string series_json() const;
};

/// One stage per value, each writing under output_dir/<axis>_<value>/.
SweepResult sweep(const StageConfig& base, SweepAxis axis, std::span<const double> values, const LogFn& log = {});

struct CorrelationReport {
  std::size_t n_samples = 0;
  std::size_t n_errors = 0;
  /// Empty when undefined; the reason is then in the matching *_note.
  std::optional<double> r_errors;
  std::optional<double> r_all;
  std::string r_errors_note;
  std::string r_all_note;
  EvalReport samples;

  std::string summary_json() const;
};

/// Samples n test utterances uniformly without replacement and correlates
/// per-sample CER with the per-sample EBKD loss between the two models.
CorrelationReport analyze_correlation(const Checkpoint& student, const Checkpoint& teacher, const Dataset& data,
                                      std::size_t n, std::uint64_t seed, const std::string& task = "original");

}  // namespace ilkd
