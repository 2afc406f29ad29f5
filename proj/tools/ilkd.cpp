// Command-line front end: data generation, single stages, full sequences,
// evaluation, hyperparameter sweeps and the correlation analysis.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.

#include "ilkd/checkpoint_io.hpp"
#include "ilkd/config.hpp"
#include "ilkd/errors.hpp"
#include "ilkd/harness.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace ilkd;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

void write_text(const std::string& path, const std::string& text) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path + "'");
}

LogFn make_logger(bool quiet) {
  if (quiet) return {};
  return [](const std::string& line) { std::cerr << line << '\n'; };
}

// A stage config loaded from disk. Without an explicit output_dir, reports and
// the resolved-config snapshot go next to the output checkpoint.
StageConfig load_stage(const std::string& path) {
  StageConfig c = stage_config_from_json(load_json_file(path));
  if (c.output_dir.empty()) {
    const fs::path parent = fs::path(c.output_checkpoint).parent_path();
    c.output_dir = parent.empty() ? "." : parent.string();
  }
  return c;
}

void print_reports(const StageResult& r) {
  for (const auto& report : r.reports)
    std::cout << report.task << ": CER " << format_percent(report.corpus_cer()) << "%\n";
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("--values: cannot parse '" + item + "' as a number");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--values: no values given");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental learning of CTC speech-recognition models with explainability-based distillation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress training progress on stderr");

  std::string spec_path, out_path;
  std::int64_t num_samples = -1;
  std::int64_t data_seed = -1;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset from a task spec");
  gen->add_option("--spec", spec_path, "Task spec JSON")->required();
  gen->add_option("--out", out_path, "Output dataset file (ILAD1)")->required();
  gen->add_option("--num-samples", num_samples, "Override the spec's sample count");
  gen->add_option("--seed", data_seed, "Override the spec's draw seed");

  std::string config_path;
  auto* pretrain = app.add_subcommand("pretrain", "Train a model from scratch on one task");
  pretrain->add_option("--config", config_path, "Stage config JSON")->required();
  auto* incr = app.add_subcommand("incr-train", "Run one incremental (or joint) stage; method from config");
  incr->add_option("--config", config_path, "Stage config JSON")->required();

  std::string manifest_path;
  auto* seq = app.add_subcommand("run-seq", "Run a multi-stage sequence for every listed method");
  seq->add_option("--manifest", manifest_path, "Sequence manifest JSON")->required();

  std::string ckpt_path, data_path, task_name = "eval", teacher_path;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval->add_option("--data", data_path, "Dataset file")->required();
  eval->add_option("--out", out_path, "Per-sample CSV; a .summary.json is written beside it")->required();
  eval->add_option("--task", task_name, "Task name recorded in the report");
  eval->add_option("--teacher", teacher_path, "Also record per-sample EBKD loss against this checkpoint");

  std::string axis_text, values_text;
  auto* sw = app.add_subcommand("sweep", "Vary one of T, beta, gamma over a grid");
  sw->add_option("--config", config_path, "Incremental stage config JSON")->required();
  sw->add_option("--axis", axis_text, "T, beta or gamma")->required();
  sw->add_option("--values", values_text, "Comma-separated values (default: the standard grid for the axis)");

  std::string student_path;
  std::size_t n = 400;
  std::uint64_t seed = 1;
  std::string analyze_out = ".";
  auto* an = app.add_subcommand("analyze", "Correlate per-sample CER with per-sample EBKD loss");
  an->add_option("--student", student_path, "Student checkpoint")->required();
  an->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
  an->add_option("--data", data_path, "Original-task test set")->required();
  an->add_option("--n", n, "Number of samples drawn uniformly without replacement");
  an->add_option("--seed", seed, "Sampling seed");
  an->add_option("--out", analyze_out, "Directory for correlation_samples.csv and correlation_summary.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  const LogFn log = make_logger(quiet);
  try {
    if (*gen) {
      Json j = load_json_file(spec_path);
      if (num_samples >= 0) j["num_samples"] = num_samples;
      if (data_seed >= 0) j["seed"] = data_seed;
      const TaskSpec spec = task_spec_from_json(j);
      const Dataset data = generate_task(spec);
      if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty()) fs::create_directories(parent);
      write_dataset(data, out_path);
      save_json_file(j, out_path + ".spec.json");
      std::cout << "wrote " << data.size() << " samples of task '" << spec.task_id << "' to " << out_path << '\n';
    } else if (*pretrain || *incr) {
      const StageConfig c = load_stage(config_path);
      if (*pretrain && c.method != Method::Pretrain)
        throw ConfigError("pretrain: config method is '" + std::string(method_name(c.method)) + "', use incr-train");
      if (*incr && c.method == Method::Pretrain) throw ConfigError("incr-train: config method is 'pretrain', use pretrain");
      const StageResult r = train_stage(c, log);
      print_reports(r);
      std::cout << "checkpoint: " << c.output_checkpoint << '\n';
    } else if (*seq) {
      const RunManifest m = expand_plan(sequence_plan_from_json(load_json_file(manifest_path)));
      const SequenceResult r = run_sequence(m, log);
      std::cout << r.cer_table_csv();
      std::cout << "config hash " << r.config_hash << "; outputs in " << m.output_dir << '\n';
    } else if (*eval) {
      const Checkpoint model = read_checkpoint(ckpt_path);
      std::optional<Checkpoint> teacher;
      if (!teacher_path.empty()) teacher = read_checkpoint(teacher_path);
      EvalReport report = evaluate(model, read_dataset(data_path), task_name, teacher ? &*teacher : nullptr);
      write_text(out_path, report_csv(report));
      write_text(out_path + ".summary.json", report_summary(report));
      std::cout << task_name << ": CER " << format_percent(report.corpus_cer()) << "%\n";
    } else if (*sw) {
      const SweepAxis axis = parse_axis(axis_text);
      const std::vector<double> values = values_text.empty() ? default_grid(axis) : parse_values(values_text);
      const SweepResult r = sweep(load_stage(config_path), axis, values, log);
      std::cout << r.csv();
    } else if (*an) {
      const CorrelationReport r =
          analyze_correlation(read_checkpoint(student_path), read_checkpoint(teacher_path), read_dataset(data_path), n, seed);
      write_text((fs::path(analyze_out) / "correlation_samples.csv").string(), report_csv(r.samples));
      write_text((fs::path(analyze_out) / "correlation_summary.json").string(), r.summary_json());
      std::cout << r.summary_json();
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
