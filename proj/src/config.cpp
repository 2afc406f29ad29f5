#include "ilkd/config.hpp"

#include "ilkd/errors.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace ilkd {

namespace {

// Reads keys of one JSON object, remembering which were consumed so that any
// leftover (misspelled or unsupported) key can be reported.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return required<T>(key);
  }

  template <typename T>
  T required(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(context_ + ": missing required key '" + key + "'");
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(context_ + "." + key + ": wrong type (got " + std::string(j_.at(key).type_name()) + ")");
    }
  }

  const Json& sub(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(context_ + ": missing required key '" + key + "'");
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return context_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(context_ + ": unknown key '" + key + "'");
  }

 private:
  const Json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

template <>
double ObjectReader::required<double>(const std::string& key) {
  seen_.insert(key);
  if (!j_.contains(key)) throw ConfigError(context_ + ": missing required key '" + key + "'");
  const Json& v = j_.at(key);
  if (!v.is_number()) throw ConfigError(context_ + "." + key + ": expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(context_ + "." + key + ": must be finite");
  return d;
}

template <>
std::int64_t ObjectReader::required<std::int64_t>(const std::string& key) {
  seen_.insert(key);
  if (!j_.contains(key)) throw ConfigError(context_ + ": missing required key '" + key + "'");
  const Json& v = j_.at(key);
  if (!v.is_number_integer()) throw ConfigError(context_ + "." + key + ": expected an integer");
  return v.get<std::int64_t>();
}

template <>
std::uint64_t ObjectReader::required<std::uint64_t>(const std::string& key) {
  seen_.insert(key);
  if (!j_.contains(key)) throw ConfigError(context_ + ": missing required key '" + key + "'");
  const Json& v = j_.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw ConfigError(context_ + "." + key + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

Index get_index(ObjectReader& r, const std::string& key, Index fallback) {
  return static_cast<Index>(r.get<std::int64_t>(key, fallback));
}

std::vector<Label> get_labels(ObjectReader& r, const std::string& key, std::vector<Label> fallback) {
  if (!r.has(key)) return fallback;
  const Json& v = r.sub(key);
  if (!v.is_array()) throw ConfigError(r.path(key) + ": expected an array of integers");
  std::vector<Label> out;
  for (const auto& e : v) {
    if (!e.is_number_integer()) throw ConfigError(r.path(key) + ": expected an array of integers");
    out.push_back(e.get<Label>());
  }
  return out;
}

std::vector<std::string> get_strings(ObjectReader& r, const std::string& key) {
  if (!r.has(key)) return {};
  const Json& v = r.sub(key);
  if (!v.is_array()) throw ConfigError(r.path(key) + ": expected an array of strings");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw ConfigError(r.path(key) + ": expected an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

std::string manifest_hash(const std::vector<StageConfig>& stages) {
  Json arr = Json::array();
  for (const auto& s : stages) arr.push_back(to_json(s));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(arr.dump())));
  return buf;
}

ModelConfig model_config_from_json(const Json& j) {
  ObjectReader r(j, "model");
  ModelConfig c;
  c.input_dim = get_index(r, "input_dim", c.input_dim);
  if (r.has("conv_layers")) {
    const Json& layers = r.sub("conv_layers");
    if (!layers.is_array()) throw ConfigError("model.conv_layers: expected an array");
    c.conv_layers.clear();
    for (const auto& layer : layers) {
      ObjectReader lr(layer, "model.conv_layers[]");
      ConvSpec spec;
      spec.channels = get_index(lr, "channels", spec.channels);
      spec.kernel = get_index(lr, "kernel", spec.kernel);
      spec.stride = get_index(lr, "stride", spec.stride);
      lr.finish();
      c.conv_layers.push_back(spec);
    }
  }
  c.num_sabs = get_index(r, "num_sabs", c.num_sabs);
  c.d_h = get_index(r, "d_h", c.d_h);
  c.num_heads = get_index(r, "num_heads", c.num_heads);
  c.ff_dim = get_index(r, "ff_dim", c.ff_dim);
  if (r.has("fc_dims")) {
    c.fc_dims.clear();
    for (Label d : get_labels(r, "fc_dims", {})) c.fc_dims.push_back(d);
  }
  c.blank_id = get_index(r, "blank_id", c.blank_id);
  r.finish();
  c.validate();
  return c;
}

Json to_json(const ModelConfig& c) {
  Json j;
  j["input_dim"] = c.input_dim;
  j["conv_layers"] = Json::array();
  for (const auto& l : c.conv_layers)
    j["conv_layers"].push_back({{"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}});
  j["num_sabs"] = c.num_sabs;
  j["d_h"] = c.d_h;
  j["num_heads"] = c.num_heads;
  j["ff_dim"] = c.ff_dim;
  j["fc_dims"] = c.fc_dims;
  j["blank_id"] = c.blank_id;
  return j;
}

OptimizerSettings optimizer_from_json(const Json& j, OptimizerSettings s) {
  ObjectReader r(j, "optimizer");
  s.peak_lr = r.get<double>("peak_lr", s.peak_lr);
  s.warmup_steps = r.get<std::int64_t>("warmup_steps", s.warmup_steps);
  s.total_steps = r.get<std::int64_t>("total_steps", s.total_steps);
  s.batch_size = r.get<std::int64_t>("batch_size", s.batch_size);
  s.beta1 = r.get<double>("beta1", s.beta1);
  s.beta2 = r.get<double>("beta2", s.beta2);
  s.epsilon = r.get<double>("epsilon", s.epsilon);
  s.clip_norm = r.get<double>("clip_norm", s.clip_norm);
  r.finish();
  s.validate();
  return s;
}

Json to_json(const OptimizerSettings& s) {
  return Json{{"peak_lr", s.peak_lr},         {"warmup_steps", s.warmup_steps}, {"total_steps", s.total_steps},
              {"batch_size", s.batch_size},   {"beta1", s.beta1},               {"beta2", s.beta2},
              {"epsilon", s.epsilon},         {"clip_norm", s.clip_norm}};
}

LossWeights weights_from_json(const Json& j, Method method) {
  ObjectReader r(j, "weights");
  LossWeights w = default_weights(method);
  w.temperature = r.get<double>("T", w.temperature);
  w.beta = r.get<double>("beta", w.beta);
  w.gamma = r.get<double>("gamma", w.gamma);
  w.lambda_ewc = r.get<double>("lambda_ewc", w.lambda_ewc);
  r.finish();
  w.validate();
  return w;
}

Json to_json(const LossWeights& w) {
  return Json{{"T", w.temperature}, {"beta", w.beta}, {"gamma", w.gamma}, {"lambda_ewc", w.lambda_ewc}};
}

StageConfig stage_config_from_json(const Json& j) {
  ObjectReader r(j, "stage");
  StageConfig c;
  c.method = parse_method(r.required<std::string>("method"));
  c.stage = static_cast<std::int32_t>(r.get<std::int64_t>("stage", c.method == Method::Pretrain ? 1 : 2));
  c.task = r.get<std::string>("task", c.task);
  c.train_data = get_strings(r, "train_data");
  if (r.has("test_data")) {
    const Json& tests = r.sub("test_data");
    if (!tests.is_array()) throw ConfigError("stage.test_data: expected an array");
    for (const auto& t : tests) {
      ObjectReader tr(t, "stage.test_data[]");
      c.test_data.push_back({tr.required<std::string>("name"), tr.required<std::string>("path")});
      tr.finish();
    }
  }
  c.weights = r.has("weights") ? weights_from_json(r.sub("weights"), c.method) : default_weights(c.method);
  OptimizerSettings opt_defaults;
  if (is_incremental(c.method)) opt_defaults = SequencePlan{}.incremental_optimizer;
  c.optimizer = r.has("optimizer") ? optimizer_from_json(r.sub("optimizer"), opt_defaults) : opt_defaults;
  if (r.has("model")) c.model = model_config_from_json(r.sub("model"));
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  if (r.has("input_checkpoint")) c.input_checkpoint = r.required<std::string>("input_checkpoint");
  c.output_checkpoint = r.required<std::string>("output_checkpoint");
  c.output_dir = r.get<std::string>("output_dir", c.output_dir);
  c.fisher_samples = r.get<std::int64_t>("fisher_samples", c.fisher_samples);
  r.finish();
  c.validate();
  return c;
}

Json to_json(const StageConfig& c) {
  Json j;
  j["stage"] = c.stage;
  j["method"] = std::string(method_name(c.method));
  j["task"] = c.task;
  j["train_data"] = c.train_data;
  j["test_data"] = Json::array();
  for (const auto& t : c.test_data) j["test_data"].push_back({{"name", t.name}, {"path", t.path}});
  j["weights"] = to_json(c.weights);
  j["optimizer"] = to_json(c.optimizer);
  if (c.method == Method::Pretrain || c.method == Method::Joint) j["model"] = to_json(c.model);
  j["seed"] = c.seed;
  if (c.input_checkpoint) j["input_checkpoint"] = *c.input_checkpoint;
  j["output_checkpoint"] = c.output_checkpoint;
  j["output_dir"] = c.output_dir;
  j["fisher_samples"] = c.fisher_samples;
  return j;
}

SequencePlan sequence_plan_from_json(const Json& j) {
  ObjectReader r(j, "manifest");
  SequencePlan p;
  p.seed = r.get<std::uint64_t>("seed", p.seed);
  p.output_dir = r.required<std::string>("output_dir");
  if (r.has("model")) p.model = model_config_from_json(r.sub("model"));
  const Json& tasks = r.sub("tasks");
  if (!tasks.is_array() || tasks.empty()) throw ConfigError("manifest.tasks: expected a non-empty array");
  for (const auto& t : tasks) {
    ObjectReader tr(t, "manifest.tasks[]");
    p.tasks.push_back({tr.required<std::string>("name"), tr.required<std::string>("train"),
                       tr.required<std::string>("test")});
    tr.finish();
  }
  if (r.has("methods")) {
    p.methods.clear();
    for (const auto& m : get_strings(r, "methods")) {
      const Method method = parse_method(m);
      if (method == Method::Pretrain) throw ConfigError("manifest.methods: pretrain always runs as stage 1; do not list it");
      p.methods.push_back(method);
    }
  }
  if (r.has("pretrain_optimizer"))
    p.pretrain_optimizer = optimizer_from_json(r.sub("pretrain_optimizer"), p.pretrain_optimizer);
  if (r.has("incremental_optimizer"))
    p.incremental_optimizer = optimizer_from_json(r.sub("incremental_optimizer"), p.incremental_optimizer);
  if (r.has("weights")) {
    const Json& w = r.sub("weights");
    if (!w.is_object()) throw ConfigError("manifest.weights: expected an object keyed by method");
    for (const auto& [name, value] : w.items()) {
      const Method method = parse_method(name);
      p.weights.emplace_back(method, weights_from_json(value, method));
    }
  }
  p.fisher_samples = r.get<std::int64_t>("fisher_samples", p.fisher_samples);
  r.finish();
  return p;
}

Json to_json(const RunManifest& m) {
  Json j;
  j["seed"] = m.seed;
  j["output_dir"] = m.output_dir;
  j["tasks"] = m.tasks;
  j["config_hash"] = m.config_hash;
  j["stages"] = Json::array();
  for (const auto& s : m.stages) j["stages"].push_back(to_json(s));
  return j;
}

TaskSpec task_spec_from_json(const Json& j) {
  ObjectReader r(j, "task_spec");
  const std::string family = r.get<std::string>("family", "base");
  BaseTaskOptions o;
  o.task_id = r.get<std::string>("task_id", family);
  o.feature_dim = get_index(r, "feature_dim", o.feature_dim);
  o.proto_len = get_index(r, "proto_len", o.proto_len);
  o.num_symbols = get_index(r, "num_symbols", o.num_symbols);
  o.inventory = get_labels(r, "inventory", o.inventory);
  o.noise_std = r.get<double>("noise_std", o.noise_std);
  o.min_len = get_index(r, "min_len", o.min_len);
  o.max_len = get_index(r, "max_len", o.max_len);
  o.prototype_seed = r.get<std::uint64_t>("prototype_seed", o.prototype_seed);
  o.num_samples = get_index(r, "num_samples", o.num_samples);
  o.seed = r.get<std::uint64_t>("seed", o.seed);
  TaskSpec spec = make_base_task(o);
  if (family == "accent") {
    const double strength = r.required<double>("rotation_strength");
    spec = derive_accent_task(spec, strength, r.get<std::uint64_t>("transform_seed", 11));
  } else if (family == "newwords") {
    const std::vector<Label> fresh = get_labels(r, "new_symbols", {9, 10, 11, 12});
    spec = derive_newwords_task(spec, fresh, r.get<std::uint64_t>("new_symbol_seed", 13));
  } else if (family != "base") {
    throw ConfigError("task_spec.family: expected base, accent or newwords, got '" + family + "'");
  }
  spec.task_id = o.task_id;
  r.finish();
  spec.validate();
  return spec;
}

Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return Json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void save_json_file(const Json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

}  // namespace ilkd
