#include "ilkd/harness.hpp"

#include "ilkd/checkpoint_io.hpp"
#include "ilkd/config.hpp"
#include "ilkd/errors.hpp"
#include "ilkd/ops.hpp"
#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace ilkd {

namespace {

namespace fs = std::filesystem;

// Seed streams derived from a stage seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kOrderStream = 2;
constexpr std::uint64_t kFisherStream = 3;

struct MethodInfo {
  Method method;
  std::string_view name;
};
constexpr MethodInfo kMethods[] = {
    {Method::Pretrain, "pretrain"}, {Method::Finetune, "finetune"},  {Method::Joint, "joint"},
    {Method::Rbkd, "rbkd"},         {Method::RbkdEwc, "rbkd_ewc"}, {Method::EbkdRbkd, "ebkd_rbkd"},
};

std::string percent(double ratio) { return format_percent(ratio); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path + "'");
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
}

// Frozen teacher outputs for one training sample.
struct TeacherView {
  Matrix log_probs;
  Matrix attention;
};

// Forward passes of a frozen model, memoized per training sample.
class TeacherCache {
 public:
  TeacherCache(const Checkpoint& teacher, std::size_t size)
      : teacher_(teacher), params_(ModelParameters::bind(teacher, false)), views_(size) {}

  const TeacherView& at(std::size_t index, const Matrix& x, bool need_attention) {
    auto& slot = views_[index];
    if (!slot || (need_attention && slot->attention.size() == 0)) {
      EncoderOutput out = forward(teacher_.config, params_, x);
      TeacherView view;
      view.log_probs = out.posteriors.log_probs.value();
      if (need_attention) view.attention = importance_map(out, AttentionGraph::Detached).attention.value();
      slot = std::move(view);
    }
    return *slot;
  }

 private:
  const Checkpoint& teacher_;
  ModelParameters params_;
  std::vector<std::optional<TeacherView>> views_;
};

// Infinite stream of sample indices: a fresh seeded permutation per epoch.
class BatchOrder {
 public:
  BatchOrder(std::size_t size, std::uint64_t seed) : order_(size), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    rnd::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

std::string describe(double ctc, double rbkd, double ebkd, double ewc) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "ctc=%.6g rbkd=%.6g ebkd=%.6g ewc=%.6g", ctc, rbkd, ebkd, ewc);
  return buf;
}

void check_method_weights(Method method, const LossWeights& w) {
  const std::string name(method_name(method));
  auto forbid = [&](double value, const char* key) {
    if (value != 0.0)
      throw ConfigError("method " + name + " does not use " + key + "; it must be 0 or unset (got " +
                        std::to_string(value) + ")");
  };
  switch (method) {
    case Method::Pretrain:
    case Method::Finetune:
    case Method::Joint:
      forbid(w.beta, "beta");
      forbid(w.gamma, "gamma");
      forbid(w.lambda_ewc, "lambda_ewc");
      break;
    case Method::Rbkd:
      forbid(w.gamma, "gamma");
      forbid(w.lambda_ewc, "lambda_ewc");
      break;
    case Method::RbkdEwc:
      forbid(w.gamma, "gamma");
      if (!(w.lambda_ewc > 0.0)) throw ConfigError("method rbkd_ewc needs lambda_ewc > 0");
      break;
    case Method::EbkdRbkd:
      forbid(w.lambda_ewc, "lambda_ewc");
      break;
  }
}

// Rethrows the active exception with `prefix` prepended, keeping its category.
[[noreturn]] void rethrow_with(const std::string& prefix) {
  try {
    throw;
  } catch (const ParseError& e) {
    throw DataError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(prefix + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(prefix + e.what());
  }
}

std::string value_label(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

std::string_view method_name(Method method) {
  for (const auto& m : kMethods)
    if (m.method == method) return m.name;
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (const auto& m : kMethods)
    if (m.name == name) return m.method;
  throw ConfigError("unknown method '" + std::string(name) +
                    "' (expected pretrain, finetune, joint, rbkd, rbkd_ewc or ebkd_rbkd)");
}

bool is_incremental(Method method) {
  return method == Method::Finetune || method == Method::Rbkd || method == Method::RbkdEwc ||
         method == Method::EbkdRbkd;
}

LossWeights default_weights(Method method) {
  LossWeights w{3.0, 0.0, 0.0, 0.0};
  if (method == Method::Rbkd || method == Method::RbkdEwc || method == Method::EbkdRbkd) w.beta = 0.03;
  if (method == Method::EbkdRbkd) w.gamma = 500.0;
  if (method == Method::RbkdEwc) w.lambda_ewc = 1.0;
  return w;
}

void StageConfig::validate() const {
  const std::string name(method_name(method));
  weights.validate();
  optimizer.validate();
  check_method_weights(method, weights);
  if (stage < 1) throw ConfigError("stage index must be >= 1");
  if (output_checkpoint.empty()) throw ConfigError("output_checkpoint is required");
  if (fisher_samples < 0) throw ConfigError("fisher_samples must be >= 0");
  if (method == Method::Joint) {
    if (train_data.empty()) throw ConfigError("method joint needs the accumulated training sets of all stages");
  } else if (train_data.size() != 1) {
    throw ConfigError("method " + name + " takes exactly one training set (the current task), got " +
                      std::to_string(train_data.size()));
  }
  if (is_incremental(method) && !input_checkpoint)
    throw ConfigError("method " + name + " requires an input (teacher) checkpoint");
  if (!is_incremental(method) && input_checkpoint)
    throw ConfigError("method " + name + " trains from scratch and takes no input checkpoint");
  if (!is_incremental(method)) model.validate();
  for (std::size_t i = 0; i < test_data.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (test_data[i].name == test_data[k].name) throw ConfigError("duplicate test set name '" + test_data[i].name + "'");
}

Checkpoint train_model(const TrainingRequest& req, const LogFn& log) {
  if (!req.train || req.train->empty()) throw DataError("train_model: training set is empty");
  req.weights.validate();
  req.optimizer.validate();
  check_method_weights(req.method, req.weights);
  if (is_incremental(req.method) != (req.teacher != nullptr))
    throw ConfigError(std::string("train_model: method ") + std::string(method_name(req.method)) +
                      (req.teacher ? " takes no teacher" : " requires a teacher checkpoint"));
  if (req.method == Method::RbkdEwc && !req.teacher->ewc)
    throw ConfigError("method rbkd_ewc needs a teacher checkpoint carrying EWC state");

  Checkpoint student = req.teacher ? *req.teacher : init_model(req.model, rnd::derive_seed(req.seed, kInitStream));
  const ModelConfig& config = student.config;
  config.validate(req.train->num_symbols);
  if (req.train->feature_dim != config.input_dim)
    throw DataError("training data has feature dimension " + std::to_string(req.train->feature_dim) +
                    ", model expects " + std::to_string(config.input_dim));
  student.ewc.reset();

  const LossWeights& w = req.weights;
  const bool use_rbkd = w.beta != 0.0;
  const bool use_ebkd = w.gamma != 0.0;
  const bool use_ewc = w.lambda_ewc != 0.0;
  const Label blank = static_cast<Label>(config.blank_id);
  std::optional<TeacherCache> teacher;
  if (use_rbkd || use_ebkd) teacher.emplace(*req.teacher, req.train->size());

  AdamOptimizer adam(req.optimizer);
  BatchOrder order(req.train->size(), rnd::derive_seed(req.seed, kOrderStream));
  const std::int64_t batch = req.optimizer.batch_size;
  const double inv_batch = 1.0 / static_cast<double>(batch);

  for (std::int64_t step = 1; step <= req.optimizer.total_steps; ++step) {
    const ModelParameters params = ModelParameters::bind(student, true);
    std::vector<Matrix> grads;
    for (const Tensor& t : params.tensors()) grads.push_back(Matrix::Zero(t.rows(), t.cols()));
    double sum_ctc = 0.0, sum_rbkd = 0.0, sum_ebkd = 0.0, sum_total = 0.0;

    for (std::int64_t b = 0; b < batch; ++b) {
      const std::size_t idx = order.next();
      const Sample& sample = req.train->samples[idx];
      EncoderOutput out = forward(config, params, sample.x);
      LossTerms terms{ctc_loss(out.posteriors, sample.y, blank), std::nullopt, std::nullopt, std::nullopt};
      if (teacher) {
        const TeacherView& tv = teacher->at(idx, sample.x, use_ebkd);
        if (use_rbkd) {
          const Posteriors tp{Tensor::from_matrix(tv.log_probs), out.posteriors.mask};
          terms.rbkd = rbkd_loss(tp, out.posteriors, w.temperature);
          sum_rbkd += terms.rbkd->item();
        }
        if (use_ebkd) {
          const ImportanceArtifacts student_maps = importance_map(out, AttentionGraph::Live);
          terms.ebkd = ebkd_loss(Tensor::from_matrix(tv.attention), student_maps.attention, out.frame_mask);
          sum_ebkd += terms.ebkd->item();
        }
      }
      sum_ctc += terms.ctc.item();
      const Tensor loss = aggregate_loss(terms, LossWeights{w.temperature, w.beta, w.gamma, 0.0});
      sum_total += loss.item();
      if (!std::isfinite(loss.item()))
        throw NumericalError("non-finite loss at step " + std::to_string(step) + " (sample " +
                             std::to_string(sample.index) + "): " +
                             describe(terms.ctc.item(), terms.rbkd ? terms.rbkd->item() : 0.0,
                                      terms.ebkd ? terms.ebkd->item() : 0.0, 0.0));
      const std::vector<Matrix> g = params.gradients(loss);
      for (std::size_t i = 0; i < g.size(); ++i) grads[i] += g[i];
    }
    for (Matrix& g : grads) g *= inv_batch;

    double ewc_value = 0.0;
    if (use_ewc) {
      const Tensor penalty = scale(ewc_penalty(params, *req.teacher->ewc), w.lambda_ewc);
      ewc_value = penalty.item();
      const std::vector<Matrix> g = params.gradients(penalty);
      for (std::size_t i = 0; i < g.size(); ++i) grads[i] += g[i];
    }
    bool finite = std::isfinite(ewc_value);
    for (const Matrix& g : grads) finite = finite && g.allFinite();
    if (!finite)
      throw NumericalError("non-finite loss or gradient at step " + std::to_string(step) + ": " +
                           describe(sum_ctc * inv_batch, sum_rbkd * inv_batch, sum_ebkd * inv_batch, ewc_value));
    const double lr = adam.step(student.params, grads);

    if (log && (step % 100 == 0 || step == req.optimizer.total_steps)) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "step %lld/%lld lr=%.3g loss=%.5f (%s)", static_cast<long long>(step),
                    static_cast<long long>(req.optimizer.total_steps), lr, sum_total * inv_batch + ewc_value,
                    describe(sum_ctc * inv_batch, sum_rbkd * inv_batch, sum_ebkd * inv_batch, ewc_value).c_str());
      log(buf);
    }
  }
  return student;
}

EvalReport evaluate(const Checkpoint& model, const Dataset& data, const std::string& task,
                    const Checkpoint* teacher) {
  if (data.empty()) throw DataError("evaluate: dataset '" + task + "' is empty");
  model.config.validate(data.num_symbols);
  if (teacher && !(teacher->config == model.config))
    throw ConfigError("evaluate: teacher and student configs differ");
  EvalReport report;
  report.task = task;
  report.stage = model.stage;
  report.method = model.method;
  const ModelParameters params = ModelParameters::bind(model, false);
  std::optional<ModelParameters> teacher_params;
  if (teacher) teacher_params = ModelParameters::bind(*teacher, false);
  const Label blank = static_cast<Label>(model.config.blank_id);
  for (const Sample& s : data.samples) {
    EncoderOutput out = forward(model.config, params, s.x);
    SampleScore score;
    score.sample_id = s.index;
    score.ref_len = s.y.size();
    score.edits = edit_distance(s.y, greedy_decode(out.posteriors, blank));
    if (teacher_params) {
      EncoderOutput tout = forward(teacher->config, *teacher_params, s.x);
      const Tensor tq = importance_map(tout, AttentionGraph::Detached).attention;
      const Tensor sq = importance_map(out, AttentionGraph::Detached).attention;
      score.ebkd_loss = ebkd_loss(tq, sq, out.frame_mask).item();
    }
    report.samples.push_back(score);
  }
  return report;
}

EwcState consolidate(const Checkpoint& model, const Dataset& data, std::int64_t num_samples, std::uint64_t seed,
                     const std::optional<EwcState>& previous) {
  EwcState state;
  state.reference = model.params;
  state.fisher = fisher_estimate(model, data, static_cast<std::size_t>(num_samples), seed);
  if (previous) {
    for (auto& [name, f] : state.fisher) {
      auto it = previous->fisher.find(name);
      if (it == previous->fisher.end() || it->second.rows() != f.rows() || it->second.cols() != f.cols())
        throw ShapeError("consolidate: previous Fisher lacks a matching entry for '" + name + "'");
      f += it->second;
    }
  }
  return state;
}

StageResult train_stage(const StageConfig& config, const LogFn& log) {
  config.validate();
  StageResult result;
  const std::string name(method_name(config.method));

  std::optional<Checkpoint> teacher;
  if (config.input_checkpoint) teacher = read_checkpoint(*config.input_checkpoint);

  // Training phase: only this stage's training set(s) are opened.
  std::vector<Dataset> parts;
  for (const auto& path : config.train_data) {
    result.data_access.push_back({"train", path});
    parts.push_back(read_dataset(path));
  }
  Dataset train;
  if (parts.size() == 1) {
    train = std::move(parts.front());
  } else {
    std::vector<const Dataset*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    train = concat_datasets(ptrs);
  }

  if (log) log("stage " + std::to_string(config.stage) + " " + name + ": training on " + config.task);
  TrainingRequest req;
  req.method = config.method;
  req.train = &train;
  req.teacher = teacher ? &*teacher : nullptr;
  req.weights = config.weights;
  req.optimizer = config.optimizer;
  req.model = config.model;
  req.seed = config.seed;
  Checkpoint student = train_model(req, log);
  student.stage = config.stage;
  student.method = name;
  student.ewc = consolidate(student, train, config.fisher_samples, rnd::derive_seed(config.seed, kFisherStream),
                            teacher ? teacher->ewc : std::nullopt);
  ensure_parent(config.output_checkpoint);
  write_checkpoint(student, config.output_checkpoint);

  // Evaluation phase.
  for (const auto& t : config.test_data) {
    result.data_access.push_back({"eval", t.path});
    const Dataset test = read_dataset(t.path);
    EvalReport report = evaluate(student, test, t.name);
    report.seed = config.seed;
    result.reports.push_back(std::move(report));
  }

  if (!config.output_dir.empty()) {
    ensure_dir(config.output_dir);
    Json resolved = to_json(config);
    save_json_file(resolved, (fs::path(config.output_dir) / "resolved_config.json").string());
    for (const auto& r : result.reports) {
      write_text((fs::path(config.output_dir) / ("eval_" + r.task + ".csv")).string(), report_csv(r));
      write_text((fs::path(config.output_dir) / ("eval_" + r.task + ".summary.json")).string(), report_summary(r));
    }
    Json access = Json::array();
    for (const auto& a : result.data_access) access.push_back({{"phase", a.phase}, {"path", a.path}});
    save_json_file(access, (fs::path(config.output_dir) / "data_access.json").string());
  }
  result.checkpoint = std::move(student);
  return result;
}

void RunManifest::validate() const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageConfig& s = stages[i];
    s.validate();
    if (!is_incremental(s.method)) continue;
    bool linked = false;
    for (std::size_t k = 0; k < i && !linked; ++k)
      linked = stages[k].stage == s.stage - 1 && stages[k].output_checkpoint == *s.input_checkpoint;
    if (!linked)
      throw ConfigError("manifest: stage " + std::to_string(s.stage) + " (" + std::string(method_name(s.method)) +
                        ") must consume the output of an earlier stage " + std::to_string(s.stage - 1));
  }
}

RunManifest expand_plan(const SequencePlan& plan) {
  if (plan.tasks.empty()) throw ConfigError("manifest: at least one task is required");
  if (plan.output_dir.empty()) throw ConfigError("manifest: output_dir is required");
  RunManifest m;
  m.seed = plan.seed;
  m.output_dir = plan.output_dir;
  for (const auto& t : plan.tasks) m.tasks.push_back(t.name);
  for (std::size_t i = 0; i < plan.tasks.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (plan.tasks[i].name == plan.tasks[k].name) throw ConfigError("manifest: duplicate task '" + plan.tasks[i].name + "'");

  auto weights_for = [&](Method method) {
    LossWeights w = default_weights(method);
    for (const auto& [m2, value] : plan.weights)
      if (m2 == method) w = value;
    return w;
  };
  auto stage_dir = [&](std::string_view method, std::size_t stage) {
    return (fs::path(plan.output_dir) / std::string(method) / ("stage" + std::to_string(stage))).string();
  };
  auto tests_until = [&](std::size_t stage) {
    std::vector<TestSet> tests;
    for (std::size_t k = 0; k < stage; ++k) tests.push_back({plan.tasks[k].name, plan.tasks[k].test});
    return tests;
  };

  StageConfig pre;
  pre.stage = 1;
  pre.method = Method::Pretrain;
  pre.task = plan.tasks[0].name;
  pre.train_data = {plan.tasks[0].train};
  pre.test_data = tests_until(1);
  pre.weights = weights_for(Method::Pretrain);
  pre.optimizer = plan.pretrain_optimizer;
  pre.model = plan.model;
  pre.seed = rnd::derive_seed(plan.seed, 1);
  pre.output_dir = stage_dir("pretrain", 1);
  pre.output_checkpoint = pre.output_dir + "/model.ilck";
  pre.fisher_samples = plan.fisher_samples;
  m.stages.push_back(pre);

  for (Method method : plan.methods) {
    if (method == Method::Pretrain) throw ConfigError("manifest: pretrain is implicit and cannot be listed as a method");
    std::string previous = pre.output_checkpoint;
    for (std::size_t s = 2; s <= plan.tasks.size(); ++s) {
      StageConfig c;
      c.stage = static_cast<std::int32_t>(s);
      c.method = method;
      c.task = plan.tasks[s - 1].name;
      c.test_data = tests_until(s);
      c.weights = weights_for(method);
      c.seed = rnd::derive_seed(plan.seed, s);
      c.output_dir = stage_dir(method_name(method), s);
      c.output_checkpoint = c.output_dir + "/model.ilck";
      c.fisher_samples = plan.fisher_samples;
      if (method == Method::Joint) {
        for (std::size_t k = 0; k < s; ++k) c.train_data.push_back(plan.tasks[k].train);
        c.optimizer = plan.pretrain_optimizer;
        c.model = plan.model;
      } else {
        c.train_data = {plan.tasks[s - 1].train};
        c.optimizer = plan.incremental_optimizer;
        c.input_checkpoint = previous;
      }
      previous = c.output_checkpoint;
      m.stages.push_back(std::move(c));
    }
  }
  m.config_hash = manifest_hash(m.stages);
  m.validate();
  return m;
}

double SequenceResult::cer(std::string_view method, std::int32_t stage, std::string_view task) const {
  const std::string_view owner = stage == 1 ? std::string_view("pretrain") : method;
  for (const auto& o : outcomes) {
    if (o.stage != stage || o.method != owner) continue;
    for (const auto& [name, value] : o.cer)
      if (name == task) return value;
  }
  throw std::out_of_range("no CER recorded for " + std::string(method) + " at stage " + std::to_string(stage) +
                          " on " + std::string(task));
}

double SequenceResult::original_task_cer(std::string_view method) const {
  if (tasks.size() < 2) throw std::out_of_range("original_task_cer: sequence has no incremental stage");
  double total = 0.0;
  for (std::size_t s = 2; s <= tasks.size(); ++s) {
    double stage_sum = 0.0;
    for (std::size_t k = 0; k + 1 < s; ++k) stage_sum += cer(method, static_cast<std::int32_t>(s), tasks[k]);
    total += stage_sum / static_cast<double>(s - 1);
  }
  return total / static_cast<double>(tasks.size() - 1);
}

double SequenceResult::new_task_cer(std::string_view method) const {
  if (tasks.size() < 2) throw std::out_of_range("new_task_cer: sequence has no incremental stage");
  double total = 0.0;
  for (std::size_t s = 2; s <= tasks.size(); ++s) total += cer(method, static_cast<std::int32_t>(s), tasks[s - 1]);
  return total / static_cast<double>(tasks.size() - 1);
}

std::string SequenceResult::cer_table_csv() const {
  std::ostringstream os;
  os << "method";
  for (std::size_t s = 1; s <= tasks.size(); ++s)
    for (std::size_t k = 0; k < s; ++k) os << ",s" << s << '_' << tasks[k];
  os << '\n';
  std::vector<std::string> rows = methods;
  if (rows.empty()) rows.push_back("pretrain");
  for (const auto& m : rows) {
    os << m;
    for (std::size_t s = 1; s <= tasks.size(); ++s)
      for (std::size_t k = 0; k < s; ++k) os << ',' << percent(cer(m, static_cast<std::int32_t>(s), tasks[k]));
    os << '\n';
  }
  return os.str();
}

std::string SequenceResult::stage_summary_csv() const {
  std::ostringstream os;
  os << "method,stage,original_cer,new_cer\n";
  for (const auto& m : methods)
    for (std::size_t s = 2; s <= tasks.size(); ++s) {
      double orig = 0.0;
      for (std::size_t k = 0; k + 1 < s; ++k) orig += cer(m, static_cast<std::int32_t>(s), tasks[k]);
      orig /= static_cast<double>(s - 1);
      os << m << ',' << s << ',' << percent(orig) << ','
         << percent(cer(m, static_cast<std::int32_t>(s), tasks[s - 1])) << '\n';
    }
  return os.str();
}

std::string SequenceResult::cer_matrix_csv(std::string_view method) const {
  std::ostringstream os;
  os << "stage";
  for (const auto& t : tasks) os << ',' << t;
  os << '\n';
  for (std::size_t s = 1; s <= tasks.size(); ++s) {
    os << s;
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      os << ',';
      if (k < s) os << percent(cer(method, static_cast<std::int32_t>(s), tasks[k]));
    }
    os << '\n';
  }
  return os.str();
}

SequenceResult run_sequence(const RunManifest& manifest, const LogFn& log) {
  manifest.validate();
  SequenceResult result;
  result.tasks = manifest.tasks;
  result.config_hash = manifest.config_hash;
  for (const auto& s : manifest.stages) {
    const std::string name(method_name(s.method));
    if (s.method != Method::Pretrain && std::find(result.methods.begin(), result.methods.end(), name) == result.methods.end())
      result.methods.push_back(name);
    StageResult stage;
    try {
      stage = train_stage(s, log);
    } catch (...) {
      rethrow_with("stage " + std::to_string(s.stage) + " (" + name + "): ");
    }
    StageOutcome outcome{s.stage, name, s.task, {}};
    for (const auto& r : stage.reports) outcome.cer.emplace_back(r.task, r.corpus_cer());
    result.outcomes.push_back(std::move(outcome));
  }

  ensure_dir(manifest.output_dir);
  const fs::path out(manifest.output_dir);
  save_json_file(to_json(manifest), (out / "manifest.resolved.json").string());
  write_text((out / "cer_table.csv").string(), result.cer_table_csv());
  if (manifest.tasks.size() >= 2) write_text((out / "stage_summary.csv").string(), result.stage_summary_csv());
  std::vector<std::string> chains = result.methods;
  chains.insert(chains.begin(), "pretrain");
  for (const auto& m : chains) {
    if (m == "pretrain" && !result.methods.empty()) continue;
    ensure_dir((out / m).string());
    write_text((out / m / "cer_matrix.csv").string(), result.cer_matrix_csv(m));
  }
  return result;
}

std::string_view axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::Temperature:
      return "T";
    case SweepAxis::Beta:
      return "beta";
    case SweepAxis::Gamma:
      return "gamma";
  }
  return "unknown";
}

SweepAxis parse_axis(std::string_view name) {
  if (name == "T") return SweepAxis::Temperature;
  if (name == "beta") return SweepAxis::Beta;
  if (name == "gamma") return SweepAxis::Gamma;
  throw ConfigError("invalid sweep axis '" + std::string(name) + "' (expected T, beta or gamma)");
}

std::vector<double> default_grid(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::Temperature:
      return {1, 2, 3, 4, 5};
    case SweepAxis::Beta:
      return {0.01, 0.02, 0.03, 0.04, 0.05};
    case SweepAxis::Gamma:
      return {100, 200, 500, 1000, 2000};
  }
  return {};
}

std::string SweepResult::csv() const {
  std::ostringstream os;
  os << "axis,value,original_cer,new_cer,original_increment,new_increment\n";
  for (const auto& p : points)
    os << axis_name(axis) << ',' << value_label(p.value) << ',' << percent(p.original_cer) << ','
       << percent(p.new_cer) << ',' << percent(p.original_increment) << ',' << percent(p.new_increment) << '\n';
  return os.str();
}

std::string SweepResult::series_json() const {
  Json j;
  j["axis"] = std::string(axis_name(axis));
  j["teacher_original_cer"] = percent(teacher_original_cer);
  j["teacher_new_cer"] = percent(teacher_new_cer);
  Json values = Json::array(), orig = Json::array(), fresh = Json::array();
  for (const auto& p : points) {
    values.push_back(p.value);
    orig.push_back(100.0 * p.original_increment);
    fresh.push_back(100.0 * p.new_increment);
  }
  j["values"] = values;
  j["original_increment"] = orig;
  j["new_increment"] = fresh;
  return j.dump(2) + "\n";
}

SweepResult sweep(const StageConfig& base, SweepAxis axis, std::span<const double> values, const LogFn& log) {
  base.validate();
  if (!is_incremental(base.method))
    throw ConfigError("sweep: base config must be an incremental stage, got " + std::string(method_name(base.method)));
  if (axis == SweepAxis::Gamma && base.method != Method::EbkdRbkd)
    throw ConfigError("sweep: the gamma axis needs method ebkd_rbkd");
  if (axis != SweepAxis::Gamma && base.weights.beta == 0.0)
    throw ConfigError("sweep: the " + std::string(axis_name(axis)) + " axis needs a method with beta > 0");
  if (values.empty()) throw ConfigError("sweep: no values given");
  for (double v : values)
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("sweep: values must be positive, got " + value_label(v));
  bool has_new = false;
  for (const auto& t : base.test_data) has_new |= t.name == base.task;
  if (!has_new) throw ConfigError("sweep: test_data must include the new task '" + base.task + "'");
  if (base.test_data.size() < 2) throw ConfigError("sweep: test_data must include at least one original task");

  SweepResult result;
  result.axis = axis;
  const Checkpoint teacher = read_checkpoint(*base.input_checkpoint);
  auto split = [&](const std::vector<EvalReport>& reports) {
    double orig = 0.0, fresh = 0.0;
    std::size_t n_orig = 0;
    for (const auto& r : reports) {
      if (r.task == base.task) {
        fresh = r.corpus_cer();
      } else {
        orig += r.corpus_cer();
        ++n_orig;
      }
    }
    return std::pair{orig / static_cast<double>(n_orig), fresh};
  };
  std::vector<EvalReport> teacher_reports;
  for (const auto& t : base.test_data) teacher_reports.push_back(evaluate(teacher, read_dataset(t.path), t.name));
  std::tie(result.teacher_original_cer, result.teacher_new_cer) = split(teacher_reports);

  const fs::path root = base.output_dir.empty() ? fs::path(base.output_checkpoint).parent_path() : fs::path(base.output_dir);
  for (double v : values) {
    StageConfig c = base;
    switch (axis) {
      case SweepAxis::Temperature:
        c.weights.temperature = v;
        break;
      case SweepAxis::Beta:
        c.weights.beta = v;
        break;
      case SweepAxis::Gamma:
        c.weights.gamma = v;
        break;
    }
    const fs::path dir = root / (std::string(axis_name(axis)) + "_" + value_label(v));
    c.output_dir = dir.string();
    c.output_checkpoint = (dir / "model.ilck").string();
    if (log) log("sweep " + std::string(axis_name(axis)) + "=" + value_label(v));
    const StageResult stage = train_stage(c, log);
    SweepPoint p;
    p.value = v;
    std::tie(p.original_cer, p.new_cer) = split(stage.reports);
    p.original_increment = p.original_cer - result.teacher_original_cer;
    p.new_increment = p.new_cer - result.teacher_new_cer;
    result.points.push_back(p);
  }
  ensure_dir(root.string());
  write_text((root / ("sweep_" + std::string(axis_name(axis)) + ".csv")).string(), result.csv());
  write_text((root / ("sweep_" + std::string(axis_name(axis)) + ".json")).string(), result.series_json());
  return result;
}

std::string CorrelationReport::summary_json() const {
  Json j;
  j["n_samples"] = n_samples;
  j["n_errors"] = n_errors;
  j["r_errors"] = r_errors ? Json(*r_errors) : Json(nullptr);
  j["r_all"] = r_all ? Json(*r_all) : Json(nullptr);
  if (!r_errors_note.empty()) j["r_errors_note"] = r_errors_note;
  if (!r_all_note.empty()) j["r_all_note"] = r_all_note;
  j["seed"] = samples.seed;
  j["task"] = samples.task;
  return j.dump(2) + "\n";
}

CorrelationReport analyze_correlation(const Checkpoint& student, const Checkpoint& teacher, const Dataset& data,
                                      std::size_t n, std::uint64_t seed, const std::string& task) {
  if (!(student.config == teacher.config)) throw ConfigError("analyze: student and teacher configs differ");
  if (n > data.size())
    throw ConfigError("analyze: requested " + std::to_string(n) + " samples but the test set holds " +
                      std::to_string(data.size()));
  if (n == 0) throw ConfigError("analyze: n must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  rnd::shuffle(order.begin(), order.end(), rng);
  order.resize(n);
  Dataset picked{data.feature_dim, data.num_symbols, {}};
  for (std::size_t i : order) picked.samples.push_back(data.samples[i]);

  CorrelationReport report;
  report.samples = evaluate(student, picked, task, &teacher);
  report.samples.seed = seed;
  report.n_samples = n;
  std::vector<double> cer_all, loss_all, cer_err, loss_err;
  for (const auto& s : report.samples.samples) {
    cer_all.push_back(s.cer());
    loss_all.push_back(*s.ebkd_loss);
    if (s.edits > 0) {
      cer_err.push_back(s.cer());
      loss_err.push_back(*s.ebkd_loss);
    }
  }
  report.n_errors = cer_err.size();
  auto correlate = [](const std::vector<double>& a, const std::vector<double>& b, std::optional<double>& r,
                      std::string& note) {
    try {
      r = pearson_correlation(a, b);
    } catch (const NumericalError& e) {
      note = e.what();
    } catch (const std::invalid_argument& e) {
      note = std::string("undefined correlation: ") + e.what();
    }
  };
  correlate(cer_err, loss_err, report.r_errors, report.r_errors_note);
  correlate(cer_all, loss_all, report.r_all, report.r_all_note);
  return report;
}

}  // namespace ilkd
