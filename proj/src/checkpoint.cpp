#include "advlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <type_traits>

#include "advlab/serialization.hpp"

namespace advlab {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'L', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out_.push_back(static_cast<unsigned char>(v >> (8 * k)));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) out_.push_back(static_cast<unsigned char>(v >> (8 * k)));
  }
  std::vector<unsigned char> take() { return std::move(out_); }

 private:
  std::vector<unsigned char> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> in) : in_(in) {}

  const unsigned char* take(std::size_t n) {
    if (n > in_.size() - pos_) throw FormatError("checkpoint: truncated at byte " + std::to_string(pos_));
    const unsigned char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint32_t u32() {
    const unsigned char* p = take(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= std::uint32_t(p[k]) << (8 * k);
    return v;
  }
  std::uint64_t u64() {
    const unsigned char* p = take(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= std::uint64_t(p[k]) << (8 * k);
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
};

template <typename T>
void put_values(Writer& w, const T* data, Index n) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (Index i = 0; i < n; ++i) {
    U bits;
    std::memcpy(&bits, data + i, sizeof bits);
    if constexpr (sizeof(T) == 4) {
      w.u32(bits);
    } else {
      w.u64(bits);
    }
  }
}

template <typename T, typename S>
void get_values(ByteReader& r, S* out, Index n) {
  for (Index i = 0; i < n; ++i) {
    T v;
    if constexpr (sizeof(T) == 4) {
      const std::uint32_t bits = r.u32();
      std::memcpy(&v, &bits, sizeof v);
    } else {
      const std::uint64_t bits = r.u64();
      std::memcpy(&v, &bits, sizeof v);
    }
    out[i] = S(v);
  }
}

}  // namespace

template <typename S>
std::vector<unsigned char> encode_checkpoint(const Checkpoint<S>& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  const std::string header =
      Json{{"network", to_json(ckpt.spec)}, {"step", ckpt.step}, {"config_digest", ckpt.config_digest}}.dump();
  w.u32(std::uint32_t(header.size()));
  w.bytes(header.data(), header.size());
  w.u32(std::uint32_t(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    w.u32(std::uint32_t(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.u8(std::is_same_v<S, float> ? 0 : 1);
    w.u32(std::uint32_t(p.value.rank()));
    for (Index d : p.value.shape()) w.u64(std::uint64_t(d));
    put_values(w, p.value.data(), p.value.size());
  }
  return w.take();
}

template <typename S>
Checkpoint<S> decode_checkpoint(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < sizeof kMagic || std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw FormatError("checkpoint: bad magic, not an advlab checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: format version " + std::to_string(version) + " is not supported (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t header_len = r.u32();
  const auto* hp = reinterpret_cast<const char*>(r.take(header_len));
  Checkpoint<S> ckpt;
  try {
    const Json header = Json::parse(hp, hp + header_len);
    ckpt.spec = network_spec_from_json(header.at("network"));
    ckpt.step = header.at("step").get<std::uint64_t>();
    ckpt.config_digest = header.at("config_digest").get<std::string>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    Parameter<S> p;
    const std::uint32_t name_len = r.u32();
    const auto* np = reinterpret_cast<const char*>(r.take(name_len));
    p.name.assign(np, name_len);
    const std::uint8_t dtype = r.u8();
    if (dtype > 1) throw FormatError("checkpoint: tensor '" + p.name + "' has unknown dtype " + std::to_string(dtype));
    Shape shape(r.u32());
    for (auto& d : shape) d = Index(r.u64());
    p.value = Tensor<S>(shape);
    if (dtype == 0) {
      get_values<float>(r, p.value.data(), p.value.size());
    } else {
      get_values<double>(r, p.value.data(), p.value.size());
    }
    ckpt.params.push_back(std::move(p));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after last tensor");
  ckpt.network();  // validates names and shapes against the spec
  return ckpt;
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<S>& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(tmp.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw FormatError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open checkpoint");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint<S> ckpt = decode_checkpoint<S>(bytes);
  if (expected_digest && *expected_digest != ckpt.config_digest) {
    throw FormatError("checkpoint/config divergence: " + path.string() + " was written under config " +
                      ckpt.config_digest + ", current config is " + *expected_digest);
  }
  return ckpt;
}

#define ADVLAB_INSTANTIATE_CHECKPOINT(S)                                                           \
  template std::vector<unsigned char> encode_checkpoint(const Checkpoint<S>&);                      \
  template Checkpoint<S> decode_checkpoint(std::span<const unsigned char>);                         \
  template void save_checkpoint(const std::filesystem::path&, const Checkpoint<S>&);                \
  template Checkpoint<S> load_checkpoint(const std::filesystem::path&, const std::optional<std::string>&);

ADVLAB_INSTANTIATE_CHECKPOINT(float)
ADVLAB_INSTANTIATE_CHECKPOINT(double)

}  // namespace advlab
