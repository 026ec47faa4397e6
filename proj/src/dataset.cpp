#include "advlab/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <random>
#include <set>

#include "advlab/digest.hpp"
#include "advlab/error.hpp"

namespace advlab {

void Dataset::validate() const {
  if (images.rank() != 4) throw FormatError("dataset: images must be [N,C,H,W], got " + to_string(images.shape()));
  if (images.dim(0) != size()) {
    throw FormatError("dataset: " + std::to_string(images.dim(0)) + " images but " + std::to_string(size()) +
                      " labels");
  }
  if (images.size() > 0 && (images.array().minCoeff() < 0.0f || images.array().maxCoeff() > 1.0f)) {
    throw FormatError("dataset: pixel values outside [0,1]");
  }
  for (Index y : labels) {
    if (y < 0 || y >= classes) {
      throw FormatError("dataset: label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
    }
  }
}

template <typename S>
Tensor<S> Dataset::batch(std::span<const Index> indices) const {
  Shape shape = image_shape();
  const Index per = checked_numel(shape);
  shape.insert(shape.begin(), Index(indices.size()));
  Tensor<S> out(shape);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const float* src = images.data() + indices[b] * per;
    std::transform(src, src + per, out.data() + Index(b) * per, [](float v) { return S(v); });
  }
  return out;
}

template TensorF Dataset::batch<float>(std::span<const Index>) const;
template TensorD Dataset::batch<double>(std::span<const Index>) const;

std::vector<Index> Dataset::batch_labels(std::span<const Index> indices) const {
  std::vector<Index> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels.at(std::size_t(i)));
  return out;
}

Dataset Dataset::head(Index count) const {
  count = std::min(count, size());
  std::vector<Index> idx(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) idx[std::size_t(i)] = i;
  Dataset out{batch<float>(idx), batch_labels(idx), classes, split, provenance};
  return out;
}

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw FormatError(path.string() + ": cannot open");
  std::vector<unsigned char> data;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) data.insert(data.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError(path.string() + ": read error");
  return data;
}

std::uint32_t be32(const std::vector<unsigned char>& d, std::size_t at) {
  return (std::uint32_t(d[at]) << 24) | (std::uint32_t(d[at + 1]) << 16) | (std::uint32_t(d[at + 2]) << 8) |
         std::uint32_t(d[at + 3]);
}

struct IdxFile {
  std::vector<Index> dims;
  std::vector<unsigned char> payload;
};

IdxFile parse_idx(const std::filesystem::path& path, std::uint32_t magic, std::size_t rank) {
  std::vector<unsigned char> raw = read_all(path);
  if (raw.size() < 4 || be32(raw, 0) != magic) {
    char found[16] = "none";
    if (raw.size() >= 4) std::snprintf(found, sizeof found, "0x%08X", be32(raw, 0));
    throw FormatError(path.string() + ": not an IDX file of expected type (magic " + found + ")");
  }
  const std::size_t header = 4 + 4 * rank;
  if (raw.size() < header) throw FormatError(path.string() + ": truncated IDX header");
  IdxFile out;
  std::size_t items = 1;
  for (std::size_t k = 0; k < rank; ++k) {
    out.dims.push_back(Index(be32(raw, 4 + 4 * k)));
    items *= std::size_t(out.dims.back());
  }
  if (raw.size() - header != items) {
    throw FormatError(path.string() + ": size mismatch: header promises " + std::to_string(out.dims[0]) +
                      " items");
  }
  out.payload.assign(raw.begin() + std::ptrdiff_t(header), raw.end());
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& dir, const std::string& name) {
  if (std::filesystem::exists(dir / name)) return dir / name;
  if (std::filesystem::exists(dir / (name + ".gz"))) return dir / (name + ".gz");
  throw FormatError((dir / name).string() + ": not found (also tried .gz)");
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::string split) {
  IdxFile img = parse_idx(images_path, 0x00000803u, 3);
  IdxFile lab = parse_idx(labels_path, 0x00000801u, 1);
  if (img.dims[0] != lab.dims[0]) {
    throw FormatError("load_idx: " + std::to_string(img.dims[0]) + " images in " + images_path.string() + " but " +
                      std::to_string(lab.dims[0]) + " labels in " + labels_path.string());
  }
  Dataset ds;
  ds.images = TensorF(Shape{img.dims[0], 1, img.dims[1], img.dims[2]});
  for (std::size_t i = 0; i < img.payload.size(); ++i) ds.images[Index(i)] = float(img.payload[i]) / 255.0f;
  ds.labels.assign(lab.payload.begin(), lab.payload.end());
  ds.classes = 10;
  ds.split = std::move(split);
  ds.provenance = "idx images sha256:" + sha256_file(images_path) + " labels sha256:" + sha256_file(labels_path);
  ds.validate();
  return ds;
}

Dataset load_mnist(const std::filesystem::path& dir, const std::string& split, Index limit) {
  std::string prefix;
  if (split == "train") {
    prefix = "train";
  } else if (split == "test") {
    prefix = "t10k";
  } else {
    throw ConfigError("load_mnist: split must be train or test, got '" + split + "'");
  }
  Dataset ds = load_idx(resolve(dir, prefix + "-images-idx3-ubyte"), resolve(dir, prefix + "-labels-idx1-ubyte"),
                        split);
  if (limit > 0 && limit < ds.size()) {
    std::string provenance = ds.provenance + " first " + std::to_string(limit);
    ds = ds.head(limit);
    ds.provenance = std::move(provenance);
  }
  return ds;
}

SyntheticSpec SyntheticSpec::halves(Index count, std::uint64_t seed, Index grid) {
  SyntheticSpec s;
  s.count = count;
  s.seed = seed;
  s.grid = grid;
  for (Index r = 0; r < s.grid; ++r) {
    for (Index c = 0; c < s.grid; ++c) {
      (c < s.grid / 2 ? s.robust_locations : s.nonrobust_locations).push_back(r * s.grid + c);
    }
  }
  return s;
}

void SyntheticSpec::validate() const {
  if (count < 1 || grid < 1 || cell < 1 || channels < 1) throw ConfigError("synthetic: sizes must be positive");
  if (!(mu_robust > 2.0 * epsilon)) {
    throw ConfigError("synthetic: robust shift " + std::to_string(mu_robust) + " must exceed 2*epsilon = " +
                      std::to_string(2.0 * epsilon));
  }
  if (!(mu_nonrobust < epsilon)) {
    throw ConfigError("synthetic: non-robust shift " + std::to_string(mu_nonrobust) + " must be below epsilon = " +
                      std::to_string(epsilon));
  }
  if (noise < 0.0 || correlation < 0.0 || correlation > 1.0) {
    throw ConfigError("synthetic: noise must be >= 0 and correlation in [0,1]");
  }
  std::set<Index> seen;
  for (const auto* list : {&robust_locations, &nonrobust_locations}) {
    for (Index n : *list) {
      if (n < 0 || n >= grid * grid) throw ConfigError("synthetic: location " + std::to_string(n) + " off the grid");
      if (!seen.insert(n).second) throw ConfigError("synthetic: location " + std::to_string(n) + " listed twice");
    }
  }
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Index side = spec.grid * spec.cell;
  const Index cells = spec.grid * spec.grid;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution agree(spec.correlation);

  Dataset ds;
  ds.images = TensorF(Shape{spec.count, spec.channels, side, side});
  ds.labels.resize(std::size_t(spec.count));
  ds.classes = 2;
  ds.split = "synthetic";
  ds.provenance = "synthetic seed=" + std::to_string(spec.seed);

  std::vector<double> shift(static_cast<std::size_t>(cells));
  for (Index i = 0; i < spec.count; ++i) {
    const Index y = i % 2;
    ds.labels[std::size_t(i)] = y;
    const double sign = y == 1 ? 1.0 : -1.0;
    const double nr_sign = agree(rng) ? sign : -sign;
    std::fill(shift.begin(), shift.end(), 0.0);
    for (Index n : spec.robust_locations) shift[std::size_t(n)] = sign * spec.mu_robust;
    for (Index n : spec.nonrobust_locations) shift[std::size_t(n)] = nr_sign * spec.mu_nonrobust;
    float* img = ds.images.data() + i * spec.channels * side * side;
    for (Index c = 0; c < spec.channels; ++c) {
      for (Index r = 0; r < side; ++r) {
        for (Index q = 0; q < side; ++q) {
          const double s = shift[std::size_t((r / spec.cell) * spec.grid + q / spec.cell)];
          const double v = 0.5 + spec.noise * noise(rng) + s;
          img[(c * side + r) * side + q] = float(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return ds;
}

}  // namespace advlab
