#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

#include "advlab/analysis.hpp"
#include "advlab/checkpoint.hpp"
#include "advlab/digest.hpp"
#include "advlab/training.hpp"

#ifndef ADVLAB_MNIST_DIR
#define ADVLAB_MNIST_DIR "data/mnist"
#endif

using namespace advlab;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << j.dump(2) << '\n';
}

void require_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

template <typename T>
T field(const Json& j, const std::string& where, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) throw ConfigError(where + "." + key + ": required");
  try {
    return it->get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(where + "." + key + ": wrong value type " + std::string(it->type_name()));
  }
}

// ---- data sources ----------------------------------------------------------

Json default_data(const std::string& source) {
  if (source == "mnist") return Json{{"source", "mnist"}, {"dir", ADVLAB_MNIST_DIR}, {"split", "train"}, {"limit", 0}};
  if (source == "synthetic") return Json{{"source", "synthetic"}, {"count", 2048}, {"seed", 0}};
  if (source == "idx") return Json{{"source", "idx"}, {"images", nullptr}, {"labels", nullptr}, {"limit", 0}};
  throw ConfigError("data.source: expected mnist, synthetic or idx, got '" + source + "'");
}

SyntheticSpec synthetic_spec(const Json& d) {
  require_keys(d, "data", {"source", "count", "seed", "grid", "cell", "channels", "mu_robust", "mu_nonrobust", "noise",
                           "correlation", "epsilon", "robust_locations", "nonrobust_locations"});
  SyntheticSpec s = SyntheticSpec::halves(field<Index>(d, "data", "count"), field<std::uint64_t>(d, "data", "seed"),
                                          d.contains("grid") ? field<Index>(d, "data", "grid") : 8);
  if (d.contains("cell")) s.cell = field<Index>(d, "data", "cell");
  if (d.contains("channels")) s.channels = field<Index>(d, "data", "channels");
  if (d.contains("mu_robust")) s.mu_robust = field<double>(d, "data", "mu_robust");
  if (d.contains("mu_nonrobust")) s.mu_nonrobust = field<double>(d, "data", "mu_nonrobust");
  if (d.contains("noise")) s.noise = field<double>(d, "data", "noise");
  if (d.contains("correlation")) s.correlation = field<double>(d, "data", "correlation");
  if (d.contains("epsilon")) s.epsilon = field<double>(d, "data", "epsilon");
  if (d.contains("robust_locations")) s.robust_locations = field<std::vector<Index>>(d, "data", "robust_locations");
  if (d.contains("nonrobust_locations")) {
    s.nonrobust_locations = field<std::vector<Index>>(d, "data", "nonrobust_locations");
  }
  return s;
}

Dataset load_data(const Json& d, Json& inputs) {
  if (!d.is_object()) throw ConfigError("data: expected an object");
  const auto source = field<std::string>(d, "data", "source");
  Dataset ds;
  if (source == "mnist") {
    require_keys(d, "data", {"source", "dir", "split", "limit"});
    const auto dir = field<std::string>(d, "data", "dir");
    ds = load_mnist(dir, field<std::string>(d, "data", "split"), field<Index>(d, "data", "limit"));
    inputs["data"] = Json{{"path", dir}, {"provenance", ds.provenance}};
  } else if (source == "idx") {
    require_keys(d, "data", {"source", "images", "labels", "limit"});
    const auto images = field<std::string>(d, "data", "images");
    const auto labels = field<std::string>(d, "data", "labels");
    ds = load_idx(images, labels);
    const Index limit = field<Index>(d, "data", "limit");
    if (limit > 0) ds = ds.head(limit);
    inputs["data"] = Json{{"path", images}, {"labels", labels}, {"provenance", ds.provenance}};
  } else if (source == "synthetic") {
    ds = gen_synthetic(synthetic_spec(d));
    inputs["data"] = Json{{"provenance", ds.provenance}};
  } else {
    default_data(source);
  }
  return ds;
}

// ---- command line ----------------------------------------------------------

struct DataFlags {
  std::optional<std::string> source, dir, split, images, labels;
  std::optional<Index> limit, count;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--data", source, "Data source: mnist, synthetic or idx");
    app->add_option("--data-dir", dir, "Directory with the MNIST IDX files");
    app->add_option("--split", split, "MNIST split: train or test");
    app->add_option("--limit", limit, "Use only the first N examples (0 = all)");
    app->add_option("--images", images, "IDX image file (data source idx)");
    app->add_option("--labels", labels, "IDX label file (data source idx)");
    app->add_option("--synthetic-count", count, "Synthetic dataset size");
    app->add_option("--synthetic-seed", seed, "Synthetic dataset seed");
  }

  void apply(Json& d) const {
    if (source && (!d.contains("source") || d["source"] != *source)) d = default_data(*source);
    if (dir) d["dir"] = *dir;
    if (split) d["split"] = *split;
    if (limit) d["limit"] = *limit;
    if (images) d["images"] = *images;
    if (labels) d["labels"] = *labels;
    if (count) d["count"] = *count;
    if (seed) d["seed"] = *seed;
  }
};

struct Common {
  std::optional<std::string> config;
  std::string out;
  bool deterministic = false;
  DataFlags data;

  void add(CLI::App* app, bool with_data = true) {
    app->add_option("--config", config, "JSON config file (a run manifest is accepted too)")->check(CLI::ExistingFile);
    app->add_option("--out", out, "Output directory")->required();
    app->add_flag("--deterministic", deterministic, "Single-worker execution (the only mode this build has)");
    if (with_data) data.add(app);
  }
};

/// defaults <- config file <- flags.
Json resolve(const Json& defaults, const Common& common) {
  Json cfg = defaults;
  if (common.config) {
    Json file = read_json_file(*common.config);
    if (file.is_object() && file.contains("subcommand") && file.contains("config")) file = file["config"];
    if (!file.is_object()) throw ConfigError(*common.config + ": expected a JSON object");
    for (auto it = file.begin(); it != file.end(); ++it) {
      if (!cfg.contains(it.key())) throw ConfigError(*common.config + ": unknown key '" + it.key() + "'");
    }
    if (file.contains("data") && file["data"].contains("source") && file["data"]["source"] != cfg["data"]["source"]) {
      cfg["data"] = default_data(file["data"]["source"].get<std::string>());
    }
    cfg.merge_patch(file);
  }
  if (cfg.contains("data")) common.data.apply(cfg["data"]);
  cfg["deterministic"] = common.deterministic || cfg.value("deterministic", false);
  return cfg;
}

class Manifest {
 public:
  Manifest(std::string subcommand, fs::path out) : out_(std::move(out)) {
    j_["subcommand"] = std::move(subcommand);
    j_["started"] = utc_now();
    j_["inputs"] = Json::object();
    j_["artifacts"] = Json::object();
  }

  Json& inputs() { return j_["inputs"]; }

  void input_file(const std::string& name, const fs::path& path) {
    j_["inputs"][name] = Json{{"path", path.string()}, {"sha256", sha256_file(path)}};
  }

  void artifact(const fs::path& path) { j_["artifacts"][fs::relative(path, out_).string()] = sha256_file(path); }

  void finish(const Json& config, std::uint64_t seed) {
    j_["config"] = config;
    j_["seed"] = seed;
    j_["output_dir"] = out_.string();
    j_["finished"] = utc_now();
    write_json(out_ / "manifest.json", j_);
  }

 private:
  fs::path out_;
  Json j_;
};

Network<float> load_network(Manifest& m, const std::string& name, const std::string& path) {
  m.input_file(name, path);
  return load_checkpoint<float>(path).network();
}

std::string numbered(const std::string& stem, Index i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%05ld.pgm", stem.c_str(), long(i));
  return buf;
}

std::vector<Index> selection(const Dataset& data, Index first, Index count) {
  if (first < 0 || first >= data.size()) {
    throw ConfigError("first: index " + std::to_string(first) + " outside a dataset of " + std::to_string(data.size()));
  }
  std::vector<Index> idx(static_cast<std::size_t>(std::min(count, data.size() - first)));
  std::iota(idx.begin(), idx.end(), first);
  return idx;
}

TensorD image_of(const TensorF& batch, Index b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const Index per = checked_numel(s);
  TensorD out(s);
  for (Index i = 0; i < per; ++i) out[i] = batch[b * per + i];
  return out;
}

// ---- subcommands -----------------------------------------------------------

struct TrainFlags {
  Common common;
  std::optional<std::string> preset, regularizer;
  std::optional<double> lambda, lr, epsilon, alpha;
  std::optional<int> epochs;
  std::optional<Index> batch_size, steps, checkpoint_every, lambda_warmup, attack_warmup;
  std::optional<std::uint64_t> seed;
  std::optional<bool> attention;
  Index log_every = 50;
};

int cmd_train(const TrainFlags& f) {
  Json defaults{{"preset", nullptr}, {"train", to_json(TrainConfig{})}, {"data", default_data("mnist")},
                {"deterministic", false}};
  // The preset sits between the defaults and the config file.
  std::optional<std::string> preset = f.preset;
  if (!preset && f.common.config) {
    Json file = read_json_file(*f.common.config);
    if (file.contains("config")) file = file["config"];
    if (file.contains("preset") && file["preset"].is_string()) preset = file["preset"].get<std::string>();
  }
  if (preset) {
    defaults["preset"] = *preset;
    TrainConfig p = preset_config(*preset);
    defaults["train"] = to_json(p);
    if (p.model.arch == "mini-resnet") defaults["data"] = default_data("synthetic");
  }
  Json cfg = resolve(defaults, f.common);
  if (preset) cfg["preset"] = *preset;
  Json& t = cfg["train"];
  if (f.regularizer) t["regularizer"] = *f.regularizer;
  if (f.lambda) t["lambda"] = *f.lambda;
  if (f.lambda_warmup) t["lambda_warmup_steps"] = *f.lambda_warmup;
  if (f.attack_warmup) t["attack_warmup_steps"] = *f.attack_warmup;
  if (f.lr) t["optimizer"]["learning_rate"] = *f.lr;
  if (f.epsilon) t["attack"]["epsilon"] = *f.epsilon;
  if (f.alpha) t["attack"]["alpha"] = *f.alpha;
  if (f.steps) t["attack"]["steps"] = *f.steps;
  if (f.epochs) t["epochs"] = *f.epochs;
  if (f.batch_size) t["batch_size"] = *f.batch_size;
  if (f.checkpoint_every) t["checkpoint_every"] = *f.checkpoint_every;
  if (f.seed) t["seed"] = *f.seed;
  if (f.attention) t["model"]["attention"] = *f.attention;

  const TrainConfig tc = train_config_from_json(t, TrainConfig{});
  tc.validate();
  const fs::path out = f.common.out;
  fs::create_directories(out);
  Manifest manifest("train", out);
  const Dataset data = load_data(cfg["data"], manifest.inputs());

  TrainOutputs outputs;
  outputs.metrics_path = out / "metrics.jsonl";
  if (tc.checkpoint_every > 0) outputs.checkpoint_dir = out / "checkpoints";
  outputs.config_digest = config_digest(tc);
  const Index steps_per_epoch = (data.size() + tc.batch_size - 1) / tc.batch_size;
  outputs.on_step = [&](const StepMetrics& m) {
    if (f.log_every > 0 && (m.step + 1) % f.log_every == 0) {
      std::fprintf(stderr, "epoch %d step %ld/%ld ce %.4f reg %.4f total %.4f adv-acc %.3f\n", m.epoch + 1,
                   long(m.step + 1), long(steps_per_epoch * tc.epochs), m.ce, m.reg, m.total, m.adv_accuracy);
    }
  };
  const TrainState state = train(data, tc, outputs);
  const fs::path ckpt = out / "final.ckpt";
  save_checkpoint(ckpt, Checkpoint<float>::of(state.network, std::uint64_t(state.step), outputs.config_digest));

  manifest.artifact(ckpt);
  manifest.artifact(outputs.metrics_path);
  if (!outputs.checkpoint_dir.empty() && fs::exists(outputs.checkpoint_dir)) {
    std::vector<fs::path> inter;
    for (const auto& e : fs::directory_iterator(outputs.checkpoint_dir)) inter.push_back(e.path());
    std::sort(inter.begin(), inter.end());
    for (const auto& p : inter) manifest.artifact(p);
  }
  manifest.finish(cfg, tc.seed);
  std::cout << ckpt.string() << '\n';
  return kExitOk;
}

Json default_suite() { return Json::array({to_json(SuiteEntry{eval_attack(0.3, 40), false})}); }

struct EvalFlags {
  Common common;
  std::optional<std::string> checkpoint, suite, transfer_source;
  std::optional<Index> batch_size;
};

int cmd_eval(const EvalFlags& f) {
  Json defaults{{"checkpoint", nullptr}, {"transfer_source", nullptr}, {"suite", default_suite()},
                {"data", default_data("mnist")}, {"batch_size", 100}, {"deterministic", false}};
  defaults["data"]["split"] = "test";
  Json cfg = resolve(defaults, f.common);
  if (f.checkpoint) cfg["checkpoint"] = *f.checkpoint;
  if (f.transfer_source) cfg["transfer_source"] = *f.transfer_source;
  if (f.batch_size) cfg["batch_size"] = *f.batch_size;
  if (f.suite) {
    Json s = read_json_file(*f.suite);
    cfg["suite"] = s.is_object() && s.contains("suite") ? s["suite"] : s;
  }
  if (!cfg["suite"].is_array()) throw ConfigError("suite: expected an array of attack entries");
  std::vector<SuiteEntry> suite;
  for (const auto& e : cfg["suite"]) suite.push_back(suite_entry_from_json(e));
  cfg["suite"] = Json::array();
  for (const auto& e : suite) cfg["suite"].push_back(to_json(e));

  const fs::path out = f.common.out;
  fs::create_directories(out);
  Manifest manifest("eval", out);
  const Network<float> net = load_network(manifest, "checkpoint", field<std::string>(cfg, "config", "checkpoint"));
  std::optional<Network<float>> source;
  if (!cfg["transfer_source"].is_null()) {
    source = load_network(manifest, "transfer_source", cfg["transfer_source"].get<std::string>());
  }
  const Dataset data = load_data(cfg["data"], manifest.inputs());
  EvalReport report = evaluate(net, data, suite, source ? &*source : nullptr, field<Index>(cfg, "config", "batch_size"));
  report.provenance = manifest.inputs();
  const fs::path path = out / "report.json";
  write_json(path, to_json(report));
  manifest.artifact(path);
  manifest.finish(cfg, suite.empty() ? 0 : suite.front().attack.seed);

  std::printf("natural %.4f\n", report.natural_accuracy);
  for (const auto& c : report.cells) {
    std::printf("%s eps=%g%s %.4f\n", cell_name(c.entry).c_str(), c.entry.attack.epsilon,
                c.entry.transfer ? " transfer" : "", c.accuracy);
  }
  return kExitOk;
}

struct AttackFlags {
  Common common;
  std::optional<std::string> checkpoint, loss;
  std::optional<double> epsilon, alpha;
  std::optional<Index> steps, first, count;
  std::optional<std::uint64_t> seed;
  std::optional<bool> random_start;
};

int cmd_attack(const AttackFlags& f) {
  Json defaults{{"checkpoint", nullptr}, {"attack", to_json(eval_attack(0.3, 40))}, {"data", default_data("mnist")},
                {"first", 0}, {"count", 10}, {"deterministic", false}};
  defaults["data"]["split"] = "test";
  Json cfg = resolve(defaults, f.common);
  if (f.checkpoint) cfg["checkpoint"] = *f.checkpoint;
  Json& a = cfg["attack"];
  if (f.epsilon) a["epsilon"] = *f.epsilon;
  if (f.steps) a["steps"] = *f.steps;
  if ((f.epsilon || f.steps) && !f.alpha) a["alpha"] = eval_attack(a["epsilon"], a["steps"]).alpha;
  if (f.alpha) a["alpha"] = *f.alpha;
  if (f.loss) a["loss"] = *f.loss;
  if (f.seed) a["seed"] = *f.seed;
  if (f.random_start) a["random_start"] = *f.random_start;
  if (f.first) cfg["first"] = *f.first;
  if (f.count) cfg["count"] = *f.count;
  const AttackConfig attack = attack_config_from_json(a, AttackConfig{});
  attack.validate();

  const fs::path out = f.common.out;
  fs::create_directories(out);
  Manifest manifest("attack", out);
  const Network<float> net = load_network(manifest, "checkpoint", field<std::string>(cfg, "config", "checkpoint"));
  const Dataset data = load_data(cfg["data"], manifest.inputs());
  const auto idx = selection(data, field<Index>(cfg, "config", "first"), field<Index>(cfg, "config", "count"));
  const TensorF x = data.batch<float>(idx);
  const auto y = data.batch_labels(idx);
  const auto adv = pgd(net, x, y, attack);
  const auto clean_pred = predict(net, x);
  const auto adv_pred = predict(net, adv.adversarial);

  Json examples = Json::array();
  Index still_correct = 0;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const TensorD xa = image_of(adv.adversarial, Index(b));
    const TensorD xc = image_of(x, Index(b));
    const fs::path img = out / numbered("adversarial", idx[b]);
    write_pgm(img, xa);
    manifest.artifact(img);
    still_correct += adv_pred[b] == y[b];
    examples.push_back(Json{{"index", idx[b]},
                            {"label", y[b]},
                            {"clean_prediction", clean_pred[b]},
                            {"adversarial_prediction", adv_pred[b]},
                            {"loss_before", adv.loss_before[b]},
                            {"loss_after", adv.loss_after[b]},
                            {"linf", (xa.array() - xc.array()).abs().maxCoeff()},
                            {"image", img.filename().string()}});
  }
  const fs::path summary = out / "attack.json";
  write_json(summary, Json{{"attack", to_json(attack)},
                           {"accuracy", double(still_correct) / double(idx.size())},
                           {"examples", examples}});
  manifest.artifact(summary);
  manifest.finish(cfg, attack.seed);
  std::printf("adversarial accuracy %.4f on %zu examples\n", double(still_correct) / double(idx.size()), idx.size());
  return kExitOk;
}

struct MapFlags {
  Common common;
  std::optional<std::string> checkpoint;
  std::optional<Index> first, count;
  bool no_clip = false;
};

int cmd_gradmap(const MapFlags& f) {
  Json defaults{{"checkpoint", nullptr}, {"data", default_data("mnist")}, {"first", 0}, {"count", 10},
                {"clip", true}, {"deterministic", false}};
  defaults["data"]["split"] = "test";
  Json cfg = resolve(defaults, f.common);
  if (f.checkpoint) cfg["checkpoint"] = *f.checkpoint;
  if (f.first) cfg["first"] = *f.first;
  if (f.count) cfg["count"] = *f.count;
  if (f.no_clip) cfg["clip"] = false;

  const fs::path out = f.common.out;
  fs::create_directories(out);
  Manifest manifest("gradmap", out);
  const Network<float> net = load_network(manifest, "checkpoint", field<std::string>(cfg, "config", "checkpoint"));
  const Dataset data = load_data(cfg["data"], manifest.inputs());
  const auto idx = selection(data, field<Index>(cfg, "config", "first"), field<Index>(cfg, "config", "count"));
  const auto clip = field<bool>(cfg, "config", "clip") ? std::optional<double>(3.0) : std::nullopt;
  const TensorF x = data.batch<float>(idx);
  const TensorF maps = gradient_maps(net, x, data.batch_labels(idx), clip);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const fs::path img = out / numbered("gradmap", idx[b]);
    write_pgm(img, image_of(maps, Index(b)));
    manifest.artifact(img);
  }
  manifest.finish(cfg, 0);
  return kExitOk;
}

int cmd_attnmap(const MapFlags& f) {
  Json defaults{{"checkpoint", nullptr}, {"data", default_data("synthetic")}, {"first", 0}, {"count", 10},
                {"deterministic", false}};
  Json cfg = resolve(defaults, f.common);
  if (f.checkpoint) cfg["checkpoint"] = *f.checkpoint;
  if (f.first) cfg["first"] = *f.first;
  if (f.count) cfg["count"] = *f.count;

  const fs::path out = f.common.out;
  fs::create_directories(out);
  Manifest manifest("attnmap", out);
  const Network<float> net = load_network(manifest, "checkpoint", field<std::string>(cfg, "config", "checkpoint"));
  if (!net.has_attention()) throw ConfigError("attnmap: checkpoint has no attention head");
  const Dataset data = load_data(cfg["data"], manifest.inputs());
  const auto idx = selection(data, field<Index>(cfg, "config", "first"), field<Index>(cfg, "config", "count"));
  for (Index i : idx) {
    const std::vector<Index> one{i};
    const TensorF x = data.batch<float>(one);
    const fs::path img = out / numbered("attnmap", i);
    write_pgm(img, render_attention_map(net, x.reshaped(data.image_shape())));
    manifest.artifact(img);
  }
  manifest.finish(cfg, 0);
  return kExitOk;
}

struct AnalysisFlags {
  Common common;
  std::optional<std::string> checkpoint, mode;
  std::optional<double> epsilon, alpha;
  std::optional<Index> steps, batch_size;
  std::optional<std::uint64_t> seed;
};

// The adversary recorded in the manifest `train` wrote beside the checkpoint,
// else PGD-20 at eps 0.1.
Json training_attack(const fs::path& checkpoint) {
  const fs::path manifest = checkpoint.parent_path() / "manifest.json";
  if (fs::exists(manifest)) {
    const Json m = read_json_file(manifest.string());
    if (const Json* a = m.contains("config") && m["config"].contains("train") ? &m["config"]["train"] : nullptr;
        a && a->contains("attack")) {
      return (*a)["attack"];
    }
  }
  std::fprintf(stderr, "attn-analysis: no training manifest beside %s, using PGD-20 at eps 0.1\n",
               checkpoint.string().c_str());
  return to_json(eval_attack(0.1, 20));
}

int cmd_attn_analysis(const AnalysisFlags& f) {
  Json defaults{{"checkpoint", nullptr}, {"data", default_data("synthetic")}, {"attack", nullptr},
                {"mode", "average-then-rank"}, {"batch_size", 100}, {"deterministic", false}};
  Json cfg = resolve(defaults, f.common);
  if (f.checkpoint) cfg["checkpoint"] = *f.checkpoint;
  if (f.mode) cfg["mode"] = *f.mode;
  if (f.batch_size) cfg["batch_size"] = *f.batch_size;
  Json& a = cfg["attack"];
  if (a.is_null()) a = training_attack(field<std::string>(cfg, "config", "checkpoint"));
  if (f.epsilon) a["epsilon"] = *f.epsilon;
  if (f.steps) a["steps"] = *f.steps;
  if ((f.epsilon || f.steps) && !f.alpha) a["alpha"] = eval_attack(a["epsilon"], a["steps"]).alpha;
  if (f.alpha) a["alpha"] = *f.alpha;
  if (f.seed) a["seed"] = *f.seed;
  const AttackConfig attack = attack_config_from_json(a, AttackConfig{});
  const auto mode_name = field<std::string>(cfg, "config", "mode");
  RankingMode mode;
  if (mode_name == "average-then-rank") {
    mode = RankingMode::AverageThenRank;
  } else if (mode_name == "per-image") {
    mode = RankingMode::PerImage;
  } else {
    throw ConfigError("mode: expected average-then-rank or per-image, got '" + mode_name + "'");
  }

  const fs::path out = f.common.out;
  fs::create_directories(out);
  Manifest manifest("attn-analysis", out);
  const Network<float> net = load_network(manifest, "checkpoint", field<std::string>(cfg, "config", "checkpoint"));
  if (!net.has_attention()) throw ConfigError("attn-analysis: checkpoint has no attention head");
  const Dataset data = load_data(cfg["data"], manifest.inputs());
  const RobustnessRanking r = robustness_ranking(net, data, attack, mode, field<Index>(cfg, "config", "batch_size"));

  std::vector<double> rank(r.rank_weight.size());
  std::iota(rank.begin(), rank.end(), 0.0);
  Json summary{{"grid", {r.grid_h, r.grid_w}},
               {"mode", mode_name},
               {"spearman_rank_vs_weight", rank.size() >= 2 ? Json(spearman(rank, r.rank_weight)) : Json(nullptr)},
               {"location_distance", r.location_distance},
               {"location_weight", r.location_weight},
               {"location_of_rank", r.location_of_rank}};
  const fs::path csv = out / "ranking.csv", js = out / "analysis.json";
  write_ranking_csv(csv, r);
  write_json(js, summary);
  manifest.artifact(csv);
  manifest.artifact(js);
  manifest.finish(cfg, attack.seed);
  if (!summary["spearman_rank_vs_weight"].is_null()) {
    std::printf("spearman(rank, weight) %.4f\n", summary["spearman_rank_vs_weight"].get<double>());
  }
  return kExitOk;
}

struct ClassifyFlags {
  Common common;
  std::optional<std::string> standard, subject;
  std::optional<Index> batch_size;
  bool no_clip = false;
};

int cmd_gradmap_classify(const ClassifyFlags& f) {
  Json defaults{{"standard", nullptr}, {"subject", nullptr}, {"data", default_data("mnist")}, {"clip", true},
                {"batch_size", 100}, {"deterministic", false}};
  defaults["data"]["split"] = "test";
  Json cfg = resolve(defaults, f.common);
  if (f.standard) cfg["standard"] = *f.standard;
  if (f.subject) cfg["subject"] = *f.subject;
  if (f.batch_size) cfg["batch_size"] = *f.batch_size;
  if (f.no_clip) cfg["clip"] = false;

  const fs::path out = f.common.out;
  fs::create_directories(out);
  Manifest manifest("gradmap-classify", out);
  const Network<float> standard = load_network(manifest, "standard", field<std::string>(cfg, "config", "standard"));
  const Network<float> subject = load_network(manifest, "subject", field<std::string>(cfg, "config", "subject"));
  const Dataset data = load_data(cfg["data"], manifest.inputs());
  const bool clip = field<bool>(cfg, "config", "clip");
  const double acc = gradmap_classification(standard, subject, data, clip, field<Index>(cfg, "config", "batch_size"));
  const fs::path js = out / "result.json";
  write_json(js, Json{{"accuracy", acc}, {"clip", clip}, {"examples", data.size()}});
  manifest.artifact(js);
  manifest.finish(cfg, 0);
  std::printf("gradient-map accuracy %.4f (%s)\n", acc, clip ? "clipped" : "unclipped");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial training laboratory"};
  app.require_subcommand(1);
  int status = kExitOk;

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Adversarially train a network");
  tf.common.add(train);
  train->add_option("--preset", tf.preset, "mnist-at, mnist-at-reg, mini-at, mini-at-reg, mini-at-att, mini-at-att-reg");
  train->add_option("--regularizer", tf.regularizer, "none, feature-l2 or logit-pairing");
  train->add_option("--lambda", tf.lambda, "Regularizer weight");
  train->add_option("--lambda-warmup", tf.lambda_warmup, "Steps over which lambda ramps up from 0");
  train->add_option("--lr", tf.lr, "Learning rate");
  train->add_option("--epsilon", tf.epsilon, "Training adversary radius");
  train->add_option("--alpha", tf.alpha, "Training adversary step size");
  train->add_option("--steps", tf.steps, "Training adversary steps");
  train->add_option("--attack-warmup", tf.attack_warmup, "Steps over which epsilon and alpha ramp up from 0");
  train->add_option("--epochs", tf.epochs, "Epochs");
  train->add_option("--batch-size", tf.batch_size, "Minibatch size");
  train->add_option("--checkpoint-every", tf.checkpoint_every, "Intermediate checkpoint interval in steps");
  train->add_option("--seed", tf.seed, "Master seed");
  train->add_option("--attention", tf.attention, "Attention pooling on or off (true/false)");
  train->add_option("--log-every", tf.log_every, "Progress line every N steps (0 = quiet)");
  train->callback([&] { status = cmd_train(tf); });

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "Accuracy under an attack suite");
  ef.common.add(eval);
  eval->add_option("--checkpoint", ef.checkpoint, "Checkpoint to evaluate");
  eval->add_option("--suite", ef.suite, "JSON array of attack entries")->check(CLI::ExistingFile);
  eval->add_option("--transfer-source", ef.transfer_source, "Checkpoint that crafts transfer adversaries");
  eval->add_option("--batch-size", ef.batch_size, "Evaluation batch size");
  eval->callback([&] { status = cmd_eval(ef); });

  AttackFlags af;
  auto* attack = app.add_subcommand("attack", "Craft adversarial examples");
  af.common.add(attack);
  attack->add_option("--checkpoint", af.checkpoint, "Checkpoint to attack");
  attack->add_option("--epsilon", af.epsilon, "Linf radius");
  attack->add_option("--alpha", af.alpha, "Step size (default 2.5 * epsilon / steps)");
  attack->add_option("--steps", af.steps, "Iterations");
  attack->add_option("--loss", af.loss, "cross-entropy or cw-margin");
  attack->add_option("--seed", af.seed, "Random-start seed");
  attack->add_option("--random-start", af.random_start, "true/false");
  attack->add_option("--first", af.first, "First example index");
  attack->add_option("--count", af.count, "Number of examples");
  attack->callback([&] { status = cmd_attack(af); });

  MapFlags gf;
  auto* gradmap = app.add_subcommand("gradmap", "Normalized input-gradient maps as PGM");
  gf.common.add(gradmap);
  gradmap->add_option("--checkpoint", gf.checkpoint, "Checkpoint");
  gradmap->add_option("--first", gf.first, "First example index");
  gradmap->add_option("--count", gf.count, "Number of examples");
  gradmap->add_flag("--no-clip", gf.no_clip, "Skip the 3-sigma clipping");
  gradmap->callback([&] { status = cmd_gradmap(gf); });

  MapFlags mf;
  auto* attnmap = app.add_subcommand("attnmap", "Attention weights at input resolution as PGM");
  mf.common.add(attnmap);
  attnmap->add_option("--checkpoint", mf.checkpoint, "Attention checkpoint");
  attnmap->add_option("--first", mf.first, "First example index");
  attnmap->add_option("--count", mf.count, "Number of examples");
  attnmap->callback([&] { status = cmd_attnmap(mf); });

  AnalysisFlags nf;
  auto* analysis = app.add_subcommand("attn-analysis", "Attention weight against location robustness rank");
  nf.common.add(analysis);
  analysis->add_option("--checkpoint", nf.checkpoint, "Attention checkpoint");
  analysis->add_option("--mode", nf.mode, "average-then-rank or per-image");
  analysis->add_option("--epsilon", nf.epsilon, "Attack radius");
  analysis->add_option("--alpha", nf.alpha, "Attack step size");
  analysis->add_option("--steps", nf.steps, "Attack iterations");
  analysis->add_option("--seed", nf.seed, "Attack seed");
  analysis->add_option("--batch-size", nf.batch_size, "Batch size");
  analysis->callback([&] { status = cmd_attn_analysis(nf); });

  ClassifyFlags cf;
  auto* classify = app.add_subcommand("gradmap-classify", "Classify one model's gradient maps with another model");
  cf.common.add(classify);
  classify->add_option("--standard", cf.standard, "Classifier checkpoint");
  classify->add_option("--subject", cf.subject, "Checkpoint whose gradient maps are classified");
  classify->add_option("--batch-size", cf.batch_size, "Batch size");
  classify->add_flag("--no-clip", cf.no_clip, "Skip the 3-sigma clipping");
  classify->callback([&] { status = cmd_gradmap_classify(cf); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const Json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return status;
}
