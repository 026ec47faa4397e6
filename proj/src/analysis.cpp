#include "advlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "advlab/losses.hpp"

namespace advlab {

namespace {

std::vector<Index> iota_range(Index begin, Index count) {
  std::vector<Index> out(static_cast<std::size_t>(count));
  std::iota(out.begin(), out.end(), begin);
  return out;
}

template <typename S>
void check_input(const char* op, const Network<S>& net, const Dataset& data) {
  if (net.spec().input != data.image_shape()) {
    throw ShapeError(std::string(op) + ": network input " + to_string(net.spec().input) + " does not match images " +
                     to_string(data.image_shape()));
  }
}

}  // namespace

std::string cell_name(const SuiteEntry& entry) {
  return std::string(entry.attack.loss == AttackLoss::CrossEntropy ? "pgd-" : "cw-") +
         std::to_string(entry.attack.steps);
}

Json to_json(const SuiteEntry& entry) {
  Json j = to_json(entry.attack);
  j["transfer"] = entry.transfer;
  return j;
}

SuiteEntry suite_entry_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("suite entry: expected an object");
  SuiteEntry e;
  Json attack = j;
  if (auto it = attack.find("transfer"); it != attack.end()) {
    if (!it->is_boolean()) throw ConfigError("suite entry.transfer: expected a boolean");
    e.transfer = it->get<bool>();
    attack.erase("transfer");
  }
  // Entries without an explicit alpha get the evaluation default 2.5 * eps / steps.
  AttackConfig defaults = eval_attack(attack.value("epsilon", 0.3), attack.value("steps", 40));
  e.attack = attack_config_from_json(attack, defaults);
  if (!attack.contains("alpha")) e.attack.alpha = eval_attack(e.attack.epsilon, e.attack.steps).alpha;
  e.attack.validate();
  return e;
}

Json to_json(const EvalReport& report) {
  Json cells = Json::array();
  for (const auto& c : report.cells) {
    Json j = to_json(c.entry);
    j["name"] = cell_name(c.entry);
    j["mode"] = c.entry.transfer ? "transfer" : "white-box";
    j["accuracy"] = c.accuracy;
    cells.push_back(j);
  }
  return Json{{"examples", report.examples},
              {"natural_accuracy", report.natural_accuracy},
              {"cells", cells},
              {"provenance", report.provenance}};
}

template <typename S>
EvalReport evaluate(const Network<S>& net, const Dataset& data, const std::vector<SuiteEntry>& suite,
                    std::type_identity_t<const Network<S>*> transfer_source, Index batch_size) {
  check_input("evaluate", net, data);
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be positive");
  for (const auto& e : suite) {
    e.attack.validate();
    if (e.transfer && !transfer_source) {
      throw ConfigError("evaluate: suite requests a transfer attack (" + cell_name(e) +
                        ") but no transfer source was given");
    }
  }
  if (transfer_source) check_input("evaluate (transfer source)", *transfer_source, data);

  EvalReport report;
  report.examples = data.size();
  std::vector<Index> correct(suite.size(), 0);
  Index natural = 0;
  for (Index start = 0, b = 0; start < data.size(); start += batch_size, ++b) {
    const auto idx = iota_range(start, std::min(batch_size, data.size() - start));
    const Tensor<S> x = data.batch<S>(idx);
    const auto y = data.batch_labels(idx);
    natural += count_correct(net, x, y);
    for (std::size_t k = 0; k < suite.size(); ++k) {
      AttackConfig cfg = suite[k].attack;
      cfg.seed = derive_seed(cfg.seed, std::uint64_t(b));
      const Network<S>& source = suite[k].transfer ? *transfer_source : net;
      correct[k] += count_correct(net, pgd(source, x, y, cfg).adversarial, y);
    }
  }
  const double n = double(std::max<Index>(data.size(), 1));
  report.natural_accuracy = double(natural) / n;
  for (std::size_t k = 0; k < suite.size(); ++k) report.cells.push_back({suite[k], double(correct[k]) / n});
  return report;
}

TensorD normalize_map(const TensorD& raw, std::optional<double> clip_sigmas) {
  TensorD out = raw;
  auto& a = out.array();
  if (clip_sigmas) {
    const double mu = a.mean();
    const double sd = std::sqrt((a - mu).square().mean());
    a = a.max(mu - *clip_sigmas * sd).min(mu + *clip_sigmas * sd);
  }
  const double lo = a.minCoeff(), hi = a.maxCoeff();
  if (!(hi > lo)) {
    a.setConstant(0.5);
  } else {
    a = (a - lo) / (hi - lo);
  }
  return out;
}

template <typename S>
GradientMap gradient_map(const Network<S>& net, const Tensor<S>& image, Index label, std::optional<double> clip_sigmas) {
  Shape batch_shape = image.shape();
  if (batch_shape.size() == 3) batch_shape.insert(batch_shape.begin(), 1);
  if (batch_shape.size() != 4 || batch_shape[0] != 1) {
    throw ShapeError("gradient_map: expected one image, got " + to_string(image.shape()));
  }
  std::vector<Index> y{label};
  GradientMap m;
  m.raw = input_gradient(net, image.reshaped(batch_shape), y, AttackLoss::CrossEntropy)
              .template cast<double>()
              .reshaped(Shape(batch_shape.begin() + 1, batch_shape.end()));
  m.normalized = normalize_map(m.raw, clip_sigmas);
  return m;
}

template <typename S>
Tensor<S> gradient_maps(const Network<S>& net, const Tensor<S>& batch, std::span<const Index> labels,
                        std::optional<double> clip_sigmas) {
  const Tensor<S> g = input_gradient(net, batch, labels, AttackLoss::CrossEntropy);
  Tensor<S> out(batch.shape());
  const Index per = batch.size() / batch.dim(0);
  for (Index b = 0; b < batch.dim(0); ++b) {
    TensorD one(Shape{per});
    for (Index i = 0; i < per; ++i) one[i] = double(g[b * per + i]);
    const TensorD n = normalize_map(one, clip_sigmas);
    for (Index i = 0; i < per; ++i) out[b * per + i] = S(n[i]);
  }
  return out;
}

template <typename S>
double gradmap_classification(const Network<S>& standard, const Network<S>& subject, const Dataset& data,
                              bool clipped, Index batch_size) {
  if (standard.spec().input != subject.spec().input) {
    throw ShapeError("gradmap_classification: standard input " + to_string(standard.spec().input) +
                     " vs subject input " + to_string(subject.spec().input));
  }
  check_input("gradmap_classification", subject, data);
  const std::optional<double> clip = clipped ? std::optional<double>(3.0) : std::nullopt;
  Index correct = 0;
  for (Index start = 0; start < data.size(); start += batch_size) {
    const auto idx = iota_range(start, std::min(batch_size, data.size() - start));
    const auto y = data.batch_labels(idx);
    correct += count_correct(standard, gradient_maps(subject, data.batch<S>(idx), y, clip), y);
  }
  return double(correct) / double(std::max<Index>(data.size(), 1));
}

template <typename S>
RobustnessRanking robustness_ranking(const Network<S>& net, const Dataset& data, const AttackConfig& attack,
                                     RankingMode mode, Index batch_size) {
  if (!net.has_attention()) throw ConfigError("robustness_ranking: network has no attention head");
  check_input("robustness_ranking", net, data);
  const auto grid = *net.local_grid();
  const Index N = grid.first * grid.second;
  RobustnessRanking r;
  r.grid_h = grid.first;
  r.grid_w = grid.second;
  r.location_distance.assign(std::size_t(N), 0.0);
  r.location_weight.assign(std::size_t(N), 0.0);
  r.rank_distance.assign(std::size_t(N), 0.0);
  r.rank_weight.assign(std::size_t(N), 0.0);

  std::vector<Index> order(static_cast<std::size_t>(N));
  for (Index start = 0, b = 0; start < data.size(); start += batch_size, ++b) {
    const auto idx = iota_range(start, std::min(batch_size, data.size() - start));
    const Tensor<S> x = data.batch<S>(idx);
    const auto y = data.batch_labels(idx);
    AttackConfig cfg = attack;
    cfg.seed = derive_seed(attack.seed, std::uint64_t(b));
    const Tensor<S> xa = pgd(net, x, y, cfg).adversarial;

    Tape<S> tape;
    const auto clean = net.forward(tape, tape.constant(x));
    const auto adv = net.forward(tape, tape.constant(xa));
    const Tensor<S>& lc = clean.local_features->value();
    const Tensor<S>& la = adv.local_features->value();
    const Tensor<S>& w = clean.attention_weights->value();
    const Index B = lc.dim(0), D = lc.dim(2);
    for (Index i = 0; i < B; ++i) {
      std::vector<double> dist(static_cast<std::size_t>(N));
      for (Index n = 0; n < N; ++n) {
        double s = 0.0;
        for (Index d = 0; d < D; ++d) {
          const double diff = double(lc[(i * N + n) * D + d]) - double(la[(i * N + n) * D + d]);
          s += diff * diff;
        }
        dist[std::size_t(n)] = std::sqrt(s);
        r.location_distance[std::size_t(n)] += dist[std::size_t(n)];
        r.location_weight[std::size_t(n)] += double(w[i * N + n]);
      }
      if (mode == RankingMode::PerImage) {
        std::iota(order.begin(), order.end(), Index(0));
        std::stable_sort(order.begin(), order.end(),
                         [&](Index a, Index c) { return dist[std::size_t(a)] < dist[std::size_t(c)]; });
        for (Index k = 0; k < N; ++k) {
          r.rank_distance[std::size_t(k)] += dist[std::size_t(order[std::size_t(k)])];
          r.rank_weight[std::size_t(k)] += double(w[i * N + order[std::size_t(k)]]);
        }
      }
    }
  }
  const double n = double(std::max<Index>(data.size(), 1));
  for (Index k = 0; k < N; ++k) {
    r.location_distance[std::size_t(k)] /= n;
    r.location_weight[std::size_t(k)] /= n;
  }
  if (mode == RankingMode::PerImage) {
    for (Index k = 0; k < N; ++k) {
      r.rank_distance[std::size_t(k)] /= n;
      r.rank_weight[std::size_t(k)] /= n;
    }
  } else {
    r.location_of_rank.resize(std::size_t(N));
    std::iota(r.location_of_rank.begin(), r.location_of_rank.end(), Index(0));
    std::stable_sort(r.location_of_rank.begin(), r.location_of_rank.end(), [&](Index a, Index c) {
      return r.location_distance[std::size_t(a)] < r.location_distance[std::size_t(c)];
    });
    for (Index k = 0; k < N; ++k) {
      const auto loc = std::size_t(r.location_of_rank[std::size_t(k)]);
      r.rank_distance[std::size_t(k)] = r.location_distance[loc];
      r.rank_weight[std::size_t(k)] = r.location_weight[loc];
    }
  }
  return r;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman: need two equal-length series of length >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / double(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / double(rb.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

TensorD render_weights(const std::vector<double>& weights, Index grid_h, Index grid_w, Index height, Index width) {
  if (Index(weights.size()) != grid_h * grid_w) {
    throw ShapeError("render_weights: " + std::to_string(weights.size()) + " weights for a " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  TensorD out(Shape{height, width});
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      out[r * width + c] = weights[std::size_t((r * grid_h / height) * grid_w + c * grid_w / width)];
    }
  }
  return normalize_map(out, std::nullopt);
}

template <typename S>
TensorD render_attention_map(const Network<S>& net, const Tensor<S>& image) {
  if (!net.has_attention()) throw ConfigError("render_attention_map: network has no attention head");
  Shape batch_shape = image.shape();
  if (batch_shape.size() == 3) batch_shape.insert(batch_shape.begin(), 1);
  if (batch_shape.size() != 4 || batch_shape[0] != 1) {
    throw ShapeError("render_attention_map: expected one image, got " + to_string(image.shape()));
  }
  Tape<S> tape;
  const auto out = net.forward(tape, tape.constant(image.reshaped(batch_shape)));
  const Tensor<S>& w = out.attention_weights->value();
  const auto grid = *net.local_grid();
  std::vector<double> weights(w.data(), w.data() + w.size());
  return render_weights(weights, grid.first, grid.second, batch_shape[2], batch_shape[3]);
}

void write_pgm(const std::filesystem::path& path, const TensorD& image) {
  Index H, W, C = 1;
  if (image.rank() == 2) {
    H = image.dim(0);
    W = image.dim(1);
  } else if (image.rank() == 3) {
    C = image.dim(0);
    H = image.dim(1);
    W = image.dim(2);
  } else {
    throw ShapeError("write_pgm: expected [H,W] or [C,H,W], got " + to_string(image.shape()));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << "P5\n" << W << ' ' << H << "\n255\n";
  for (Index p = 0; p < H * W; ++p) {
    double v = 0.0;
    for (Index c = 0; c < C; ++c) v += image[c * H * W + p];
    v /= double(C);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  if (!out) throw FormatError(path.string() + ": write failed");
}

void write_ranking_csv(const std::filesystem::path& path, const RobustnessRanking& ranking) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << "rank,mean_distance,mean_weight\n";
  out.precision(9);
  for (std::size_t k = 0; k < ranking.rank_weight.size(); ++k) {
    out << k << ',' << ranking.rank_distance[k] << ',' << ranking.rank_weight[k] << '\n';
  }
}

#define ADVLAB_INSTANTIATE_ANALYSIS(S)                                                                             \
  template EvalReport evaluate(const Network<S>&, const Dataset&, const std::vector<SuiteEntry>&,                 \
                               std::type_identity_t<const Network<S>*>, Index);                                                       \
  template GradientMap gradient_map(const Network<S>&, const Tensor<S>&, Index, std::optional<double>);            \
  template Tensor<S> gradient_maps(const Network<S>&, const Tensor<S>&, std::span<const Index>,                   \
                                   std::optional<double>);                                                         \
  template double gradmap_classification(const Network<S>&, const Network<S>&, const Dataset&, bool, Index);      \
  template RobustnessRanking robustness_ranking(const Network<S>&, const Dataset&, const AttackConfig&,           \
                                                RankingMode, Index);                                               \
  template TensorD render_attention_map(const Network<S>&, const Tensor<S>&);

ADVLAB_INSTANTIATE_ANALYSIS(float)
ADVLAB_INSTANTIATE_ANALYSIS(double)

}  // namespace advlab
