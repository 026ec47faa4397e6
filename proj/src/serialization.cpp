#include "advlab/serialization.hpp"

#include <fstream>
#include <set>

#include "advlab/digest.hpp"

namespace advlab {

namespace {

template <typename T>
bool type_matches(const Json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v.is_boolean();
  } else if constexpr (std::is_unsigned_v<T>) {
    return v.is_number_unsigned();
  } else if constexpr (std::is_integral_v<T>) {
    return v.is_number_integer();
  } else if constexpr (std::is_floating_point_v<T>) {
    return v.is_number();
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v.is_string();
  } else {
    if (!v.is_array()) return false;
    for (const auto& e : v) {
      if (!type_matches<typename T::value_type>(e)) return false;
    }
    return true;
  }
}

class Reader {
 public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object, got " + std::string(j_.type_name()));
  }

  template <typename T>
  bool get(const std::string& key, T& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    if (!type_matches<T>(*it)) {
      throw ConfigError(where_ + "." + key + ": wrong value type " + std::string(it->type_name()));
    }
    try {
      out = it->template get<T>();
    } catch (const Json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong value type " + std::string(it->type_name()));
    }
    return true;
  }

  const Json* sub(const std::string& key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> known_;
};

template <typename F>
auto wrap(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError(where + ": " + e.what());
  }
}

Json layer_to_json(const LayerSpec& l) {
  return Json{{"kind", to_string(l.kind)}, {"out", l.out}, {"kernel", l.kernel}, {"stride", l.stride},
              {"padding", l.padding}};
}

LayerSpec layer_from_json(const Json& j, const std::string& where) {
  Reader r(j, where);
  LayerSpec l;
  std::string kind;
  if (!r.get("kind", kind)) throw ConfigError(where + ": missing 'kind'");
  l.kind = wrap(r.path("kind"), [&] { return layer_kind_from_string(kind); });
  r.get("out", l.out);
  r.get("kernel", l.kernel);
  r.get("stride", l.stride);
  r.get("padding", l.padding);
  r.finish();
  return l;
}

std::vector<LayerSpec> layers_from_json(const Json* j, const std::string& where) {
  std::vector<LayerSpec> out;
  if (!j) return out;
  if (!j->is_array()) throw ConfigError(where + ": expected an array");
  for (std::size_t i = 0; i < j->size(); ++i) out.push_back(layer_from_json((*j)[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

}  // namespace

Json to_json(const NetworkSpec& spec) {
  Json j;
  j["arch"] = spec.arch;
  j["input"] = spec.input;
  j["trunk"] = Json::array();
  for (const auto& l : spec.trunk) j["trunk"].push_back(layer_to_json(l));
  j["global_head"] = Json::array();
  for (const auto& l : spec.global_head) j["global_head"].push_back(layer_to_json(l));
  if (spec.attention) {
    j["attention"] = Json{{"kind", spec.attention->kind == AttentionKind::Mlp ? "mlp" : "linear"},
                          {"hidden", spec.attention->hidden}};
  } else {
    j["attention"] = nullptr;
  }
  j["classes"] = spec.classes;
  return j;
}

NetworkSpec network_spec_from_json(const Json& j) {
  Reader r(j, "network");
  NetworkSpec s;
  r.get("arch", s.arch);
  r.get("input", s.input);
  r.get("classes", s.classes);
  s.trunk = layers_from_json(r.sub("trunk"), "network.trunk");
  s.global_head = layers_from_json(r.sub("global_head"), "network.global_head");
  if (const Json* a = r.sub("attention"); a && !a->is_null()) {
    Reader ar(*a, "network.attention");
    AttentionSpec at;
    std::string kind = "mlp";
    ar.get("kind", kind);
    if (kind == "mlp") {
      at.kind = AttentionKind::Mlp;
    } else if (kind == "linear") {
      at.kind = AttentionKind::Linear;
    } else {
      throw ConfigError("network.attention.kind: expected mlp or linear, got '" + kind + "'");
    }
    ar.get("hidden", at.hidden);
    ar.finish();
    s.attention = at;
  }
  r.finish();
  return s;
}

Json to_json(const AttackConfig& cfg) {
  return Json{{"epsilon", cfg.epsilon},         {"alpha", cfg.alpha}, {"steps", cfg.steps},
              {"random_start", cfg.random_start}, {"loss", to_string(cfg.loss)}, {"seed", cfg.seed}};
}

AttackConfig attack_config_from_json(const Json& j, AttackConfig cfg) {
  Reader r(j, "attack");
  r.get("epsilon", cfg.epsilon);
  r.get("alpha", cfg.alpha);
  r.get("steps", cfg.steps);
  r.get("random_start", cfg.random_start);
  std::string loss;
  if (r.get("loss", loss)) cfg.loss = attack_loss_from_string(loss);
  r.get("seed", cfg.seed);
  r.finish();
  return cfg;
}

Json to_json(const ModelConfig& cfg) {
  return Json{{"arch", cfg.arch}, {"attention", cfg.attention}, {"widths", cfg.widths},
              {"attention_hidden", cfg.attention_hidden}};
}

ModelConfig model_config_from_json(const Json& j, ModelConfig cfg) {
  Reader r(j, "model");
  r.get("arch", cfg.arch);
  r.get("attention", cfg.attention);
  r.get("widths", cfg.widths);
  r.get("attention_hidden", cfg.attention_hidden);
  r.finish();
  return cfg;
}

Json to_json(const OptimizerConfig& cfg) {
  return Json{{"learning_rate", cfg.learning_rate}, {"momentum", cfg.momentum}, {"schedule", to_string(cfg.schedule)}};
}

OptimizerConfig optimizer_config_from_json(const Json& j, OptimizerConfig cfg) {
  Reader r(j, "optimizer");
  r.get("learning_rate", cfg.learning_rate);
  r.get("momentum", cfg.momentum);
  std::string schedule;
  if (r.get("schedule", schedule)) cfg.schedule = lr_schedule_from_string(schedule);
  r.finish();
  return cfg;
}

Json to_json(const TrainConfig& cfg) {
  return Json{{"lambda", cfg.lambda},
              {"lambda_warmup_steps", cfg.lambda_warmup_steps},
              {"attack_warmup_steps", cfg.attack_warmup_steps},
              {"regularizer", to_string(cfg.regularizer)},
              {"both_branches", cfg.both_branches},
              {"model", to_json(cfg.model)},
              {"attack", to_json(cfg.attack)},
              {"optimizer", to_json(cfg.optimizer)},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"seed", cfg.seed},
              {"checkpoint_every", cfg.checkpoint_every}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig cfg) {
  Reader r(j, "train");
  r.get("lambda", cfg.lambda);
  r.get("lambda_warmup_steps", cfg.lambda_warmup_steps);
  r.get("attack_warmup_steps", cfg.attack_warmup_steps);
  std::string reg;
  if (r.get("regularizer", reg)) cfg.regularizer = regularizer_from_string(reg);
  r.get("both_branches", cfg.both_branches);
  if (const Json* m = r.sub("model")) cfg.model = model_config_from_json(*m, cfg.model);
  if (const Json* a = r.sub("attack")) cfg.attack = attack_config_from_json(*a, cfg.attack);
  if (const Json* o = r.sub("optimizer")) cfg.optimizer = optimizer_config_from_json(*o, cfg.optimizer);
  r.get("epochs", cfg.epochs);
  r.get("batch_size", cfg.batch_size);
  r.get("seed", cfg.seed);
  r.get("checkpoint_every", cfg.checkpoint_every);
  r.finish();
  return cfg;
}

Json to_json(const StepMetrics& m) {
  return Json{{"step", m.step},           {"epoch", m.epoch},         {"batch", m.batch},
              {"lr", m.lr},               {"lambda", m.lambda},       {"epsilon", m.epsilon},
              {"ce", m.ce},               {"reg", m.reg},
              {"total", m.total},         {"linf_max", m.linf_max},   {"linf_mean", m.linf_mean},
              {"adv_accuracy", m.adv_accuracy}, {"perm_seed", m.perm_seed}};
}

std::string config_digest(const TrainConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace advlab
