#include "cmfd/config.hpp"

#include <fstream>
#include <set>

namespace cmfd {

namespace {

// Reads keys from one JSON object and rejects whatever it did not consume.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
  }

  const nlohmann::json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, int& out) {
    if (auto* v = take(key)) {
      if (!v->is_number_integer()) bad(key, "an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (auto* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        bad(key, "a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (auto* v = take(key)) {
      if (!v->is_number()) bad(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (auto* v = take(key)) {
      if (!v->is_boolean()) bad(key, "true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (auto* v = take(key)) {
      if (!v->is_string()) bad(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (auto* v = take(key)) {
      if (!v->is_array()) bad(key, "an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) bad(key, "an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (auto* v = take(key)) {
      if (!v->is_array()) bad(key, "an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) bad(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }
  void get(const char* key, std::array<int, 4>& out) {
    if (auto* v = take(key)) {
      if (!v->is_array() || v->size() != 4) bad(key, "an array of 4 integers");
      for (std::size_t i = 0; i < 4; ++i) {
        if (!(*v)[i].is_number_integer()) bad(key, "an array of 4 integers");
        out[i] = (*v)[i].get<int>();
      }
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(ctx_ + ": unknown key \"" + it.key() + "\"");
    }
  }

  [[noreturn]] void bad(const char* key, const char* what) const {
    throw ConfigError(ctx_ + "." + key + ": expected " + what);
  }

  const std::string& context() const { return ctx_; }

 private:
  const nlohmann::json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

const char* attention_name(AttentionKind k) { return k == AttentionKind::gab ? "gab" : "cbam"; }

}  // namespace

Json to_json(const ModelConfig& c) {
  return {{"input_size", c.input_size},
          {"in_channels", c.in_channels},
          {"channels", c.channels},
          {"state_size", c.state_size},
          {"vss_expand", c.vss_expand},
          {"shuffle_groups", c.shuffle_groups},
          {"gab_reduction", c.gab_reduction},
          {"use_cmd", c.use_cmd},
          {"use_msa", c.use_msa},
          {"use_fd", c.use_fd},
          {"attention", attention_name(c.attention)},
          {"deep_supervision", c.deep_supervision}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& defaults) {
  ModelConfig c = defaults;
  Reader r(j, "model");
  r.get("input_size", c.input_size);
  r.get("in_channels", c.in_channels);
  r.get("channels", c.channels);
  r.get("state_size", c.state_size);
  r.get("vss_expand", c.vss_expand);
  r.get("shuffle_groups", c.shuffle_groups);
  r.get("gab_reduction", c.gab_reduction);
  r.get("use_cmd", c.use_cmd);
  r.get("use_msa", c.use_msa);
  r.get("use_fd", c.use_fd);
  std::string att = attention_name(c.attention);
  r.get("attention", att);
  if (att == "gab") {
    c.attention = AttentionKind::gab;
  } else if (att == "cbam") {
    c.attention = AttentionKind::cbam;
  } else {
    throw ConfigError("model.attention: expected \"gab\" or \"cbam\", got \"" + att + "\"");
  }
  r.get("deep_supervision", c.deep_supervision);
  r.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lr_period", c.lr_period},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"head_weights", c.head_weights},
          {"max_steps", c.max_steps},
          {"augment", c.augment},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  Reader r(j, "train");
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("lr", c.lr);
  r.get("lr_period", c.lr_period);
  r.get("weight_decay", c.weight_decay);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("grad_clip", c.grad_clip);
  r.get("head_weights", c.head_weights);
  r.get("max_steps", c.max_steps);
  r.get("augment", c.augment);
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

Json to_json(const DatasetSpec& c) {
  return {{"count", c.count},
          {"image_size", c.image_size},
          {"lesions_min", c.lesions_min},
          {"lesions_max", c.lesions_max},
          {"radius_min", c.radius_min},
          {"radius_max", c.radius_max},
          {"eccentricity_min", c.eccentricity_min},
          {"contrast_min", c.contrast_min},
          {"contrast_max", c.contrast_max},
          {"texture_amplitude", c.texture_amplitude},
          {"edge_blur", c.edge_blur},
          {"test_fraction", c.test_fraction},
          {"seed", c.seed}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j, const DatasetSpec& defaults) {
  DatasetSpec c = defaults;
  Reader r(j, "data");
  r.get("count", c.count);
  r.get("image_size", c.image_size);
  r.get("lesions_min", c.lesions_min);
  r.get("lesions_max", c.lesions_max);
  r.get("radius_min", c.radius_min);
  r.get("radius_max", c.radius_max);
  r.get("eccentricity_min", c.eccentricity_min);
  r.get("contrast_min", c.contrast_min);
  r.get("contrast_max", c.contrast_max);
  r.get("texture_amplitude", c.texture_amplitude);
  r.get("edge_blur", c.edge_blur);
  r.get("test_fraction", c.test_fraction);
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

Json to_json(const AugmentConfig& c) {
  return {{"flip_prob", c.flip_prob}, {"rotation_deg", c.rotation_deg}, {"brightness", c.brightness}, {"contrast", c.contrast}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j, const AugmentConfig& defaults) {
  AugmentConfig c = defaults;
  Reader r(j, "augment");
  r.get("flip_prob", c.flip_prob);
  r.get("rotation_deg", c.rotation_deg);
  r.get("brightness", c.brightness);
  r.get("contrast", c.contrast);
  r.finish();
  c.validate();
  return c;
}

Json manifest_to_json(const Manifest& m) {
  return {{"seed", m.seed}, {"spec", to_json(m.spec)}, {"splits", {{"train", m.train}, {"test", m.test}}}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  Reader r(j, "manifest");
  r.get("seed", m.seed);
  if (auto* spec = r.take("spec")) m.spec = dataset_spec_from_json(*spec);
  auto* splits = r.take("splits");
  if (!splits) throw ConfigError("manifest: missing \"splits\"");
  Reader s(*splits, "manifest.splits");
  s.get("train", m.train);
  s.get("test", m.test);
  s.finish();
  r.finish();
  return m;
}

void CliConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  train.validate();
  data.validate();
  augment.validate();
}

CliConfig desk_defaults() {
  CliConfig c;
  c.model.input_size = 64;
  c.model.channels = {8, 16, 32, 64};
  c.model.state_size = 4;
  c.train.epochs = 10;
  c.train.max_steps = 200;
  c.train.lr = 1e-2;
  c.train.lr_period = 4;
  c.data.image_size = 64;
  return c;
}

Json to_json(const CliConfig& c) {
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"data", to_json(c.data)},
          {"augment", to_json(c.augment)},
          {"paths", {{"data_dir", c.data_dir}, {"out_dir", c.out_dir}}}};
}

CliConfig cli_config_from_json(const nlohmann::json& j, const CliConfig& defaults) {
  CliConfig c = defaults;
  Reader r(j, "config");
  if (auto* v = r.take("model")) c.model = model_config_from_json(*v, defaults.model);
  if (auto* v = r.take("train")) c.train = train_config_from_json(*v, defaults.train);
  if (auto* v = r.take("data")) c.data = dataset_spec_from_json(*v, defaults.data);
  if (auto* v = r.take("augment")) c.augment = augment_config_from_json(*v, defaults.augment);
  if (auto* v = r.take("paths")) {
    Reader p(*v, "paths");
    p.get("data_dir", c.data_dir);
    p.get("out_dir", c.out_dir);
    p.finish();
  }
  r.finish();
  c.validate();
  return c;
}

CliConfig load_cli_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return cli_config_from_json(j);
}

}  // namespace cmfd
