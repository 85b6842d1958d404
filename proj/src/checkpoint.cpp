#include "compprobe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "compprobe/error.hpp"

namespace compprobe::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw CheckpointError("cannot open " + path.string() + " for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <typename U>
  void pod(U v) { bytes(&v, sizeof v); }
  void finish() {
    out_.flush();
    if (!out_) throw CheckpointError("write failed: " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw CheckpointError("cannot open " + path.string());
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw CheckpointError(path_.string() + ": truncated checkpoint");
  }
  template <typename U>
  U pod() {
    U v;
    bytes(&v, sizeof v);
    return v;
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

template <typename T>
constexpr Dtype dtype_of() {
  return sizeof(T) == 4 ? Dtype::float32 : Dtype::float64;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Transformer<T>& model) {
  Writer w(path);
  w.bytes(kCheckpointMagic, 4);
  w.pod<std::uint32_t>(kCheckpointVersion);
  const std::string blob = to_json(model.config()).dump();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob.data(), blob.size());
  const auto& params = model.named_parameters();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.pod<std::uint64_t>(d);
    w.bytes(t.data().data(), t.size() * sizeof(T));
  }
  w.finish();
}

ModelCheckpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError(path.string() + ": bad magic, not a checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(path.string() + ": checkpoint version " + std::to_string(version) + " is not supported");
  const auto blob_len = r.pod<std::uint32_t>();
  if (blob_len > (1u << 24)) throw CheckpointError(path.string() + ": implausible config blob length");
  std::string blob(blob_len, '\0');
  r.bytes(blob.data(), blob.size());
  ModelCheckpoint ckpt;
  try {
    ckpt.config = config_from_json(nlohmann::json::parse(blob), false);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed config blob: " + e.what());
  } catch (const Error& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = r.pod<std::uint32_t>();
    if (name_len > 4096) throw CheckpointError(path.string() + ": implausible tensor name length");
    t.name.resize(name_len);
    r.bytes(t.name.data(), name_len);
    const auto code = r.pod<std::uint8_t>();
    if (code != 1 && code != 2) throw CheckpointError(path.string() + ": unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<Dtype>(code);
    const auto rank = r.pod<std::uint8_t>();
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.pod<std::uint64_t>());
      n *= t.dims.back();
    }
    if (n > (1ull << 32)) throw CheckpointError(path.string() + ": implausible tensor size");
    t.values.resize(n);
    if (t.dtype == Dtype::float32) {
      std::vector<float> raw(n);
      r.bytes(raw.data(), n * sizeof(float));
      std::copy(raw.begin(), raw.end(), t.values.begin());
    } else {
      r.bytes(t.values.data(), n * sizeof(double));
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw CheckpointError(path.string() + ": trailing bytes after last tensor");
  return ckpt;
}

namespace {

template <typename T>
void copy_into(const ModelCheckpoint& ckpt, Transformer<T>& model, const std::string& origin) {
  const auto& params = model.named_parameters();
  if (params.size() != ckpt.tensors.size())
    throw CheckpointError(origin + ": tensor count " + std::to_string(ckpt.tensors.size()) + " does not match model (" +
                          std::to_string(params.size()) + ")");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const StoredTensor& s = ckpt.tensors[i];
    Tensor<T> t = params[i].second;
    if (s.name != params[i].first) throw CheckpointError(origin + ": expected tensor '" + params[i].first + "', found '" + s.name + "'");
    std::vector<std::size_t> dims(s.dims.begin(), s.dims.end());
    if (dims != t.shape())
      throw CheckpointError(origin + ": shape mismatch for '" + s.name + "': " + tensor::shape_string(dims) + " vs " +
                            tensor::shape_string(t.shape()));
    auto dst = t.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(s.values[j]);
  }
}

}  // namespace

template <typename T>
Transformer<T> model_from_checkpoint(const ModelCheckpoint& ckpt) {
  Transformer<T> model(ckpt.config);
  copy_into(ckpt, model, "checkpoint");
  return model;
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, Transformer<T>& model) {
  const ModelCheckpoint ckpt = read_checkpoint(path);
  if (!(ckpt.config == model.config())) {
    throw ConfigMismatchError(path.string() + ": stored config " + to_json(ckpt.config).dump() +
                              " does not match model config " + to_json(model.config()).dump());
  }
  copy_into(ckpt, model, path.string());
}

template void save_checkpoint(const std::filesystem::path&, const Transformer<float>&);
template void save_checkpoint(const std::filesystem::path&, const Transformer<double>&);
template Transformer<float> model_from_checkpoint(const ModelCheckpoint&);
template Transformer<double> model_from_checkpoint(const ModelCheckpoint&);
template void load_checkpoint(const std::filesystem::path&, Transformer<float>&);
template void load_checkpoint(const std::filesystem::path&, Transformer<double>&);

}  // namespace compprobe::model
