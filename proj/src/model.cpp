#include "compprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "compprobe/error.hpp"
#include "compprobe/expr.hpp"

namespace compprobe::model {

using nlohmann::json;
using tensor::Shape;

std::string_view to_string(Variant v) { return v == Variant::tp ? "tp" : "standard"; }
std::string_view to_string(Positional p) { return p == Positional::learned ? "learned" : "sinusoidal"; }
std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::query: return "query";
    case Kind::key: return "key";
    case Kind::value: return "value";
    case Kind::role: return "role";
  }
  return "query";
}

Variant parse_variant(std::string_view s) {
  if (s == "standard") return Variant::standard;
  if (s == "tp") return Variant::tp;
  throw Error("unknown model variant '" + std::string(s) + "'");
}

Positional parse_positional(std::string_view s) {
  if (s == "sinusoidal") return Positional::sinusoidal;
  if (s == "learned") return Positional::learned;
  throw Error("unknown positional encoding '" + std::string(s) + "'");
}

Kind parse_kind(std::string_view s) {
  if (s == "query") return Kind::query;
  if (s == "key") return Kind::key;
  if (s == "value") return Kind::value;
  if (s == "role") return Kind::role;
  throw Error("unknown vector kind '" + std::string(s) + "'");
}

Vocab::Vocab(std::string chars) : chars_(std::move(chars)) {
  index_.fill(-1);
  for (std::size_t i = 0; i < chars_.size(); ++i) {
    auto& slot = index_[static_cast<unsigned char>(chars_[i])];
    if (slot >= 0) throw Error(std::string("duplicate vocabulary character '") + chars_[i] + "'");
    slot = static_cast<int>(i) + 3;
  }
}

Vocab Vocab::standard() {
  std::string chars(expr::kQuestionPrefix);
  chars += "0123456789+*/()";
  std::sort(chars.begin(), chars.end());
  chars.erase(std::unique(chars.begin(), chars.end()), chars.end());
  return Vocab(chars);
}

bool Vocab::contains(char c) const { return index_[static_cast<unsigned char>(c)] >= 0; }

int Vocab::id(char c) const {
  const int i = index_[static_cast<unsigned char>(c)];
  if (i < 0) throw Error(std::string("character '") + c + "' is not in the vocabulary");
  return i;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(id(c));
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    out += character(i);
  }
  return out;
}

char Vocab::character(int id) const {
  if (id < 3 || static_cast<std::size_t>(id) >= size()) throw Error("token " + std::to_string(id) + " has no character");
  return chars_[static_cast<std::size_t>(id - 3)];
}

void ModelConfig::validate() const {
  validate_structure();
  const Vocab standard = Vocab::standard();
  for (char c : standard.chars())
    if (!vocab.contains(c)) throw Error(std::string("invalid model config: vocabulary lacks '") + c + "'");
}

void ModelConfig::validate_structure() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error("invalid model config: " + what);
  };
  need(n_enc_layers >= 1 && n_dec_layers >= 1, "layer counts must be positive");
  need(n_heads >= 1, "n_heads must be positive");
  need(d_k > 0 && d_v > 0 && d_ff > 0, "d_k, d_v and d_ff must be positive");
  need(d_model == n_heads * d_v, "d_model must equal n_heads * d_v");
  need(max_len >= 1 && max_answer_len >= 1, "max_len and max_answer_len must be positive");
}

json to_json(const ModelConfig& cfg) {
  json vocab = json::array({"<pad>", "<bos>", "<eos>"});
  for (char c : cfg.vocab.chars()) vocab.push_back(std::string(1, c));
  return {{"variant", to_string(cfg.variant)},
          {"n_enc_layers", cfg.n_enc_layers},
          {"n_dec_layers", cfg.n_dec_layers},
          {"n_heads", cfg.n_heads},
          {"d_model", cfg.d_model},
          {"d_k", cfg.d_k},
          {"d_v", cfg.d_v},
          {"d_ff", cfg.d_ff},
          {"vocab", vocab},
          {"max_len", cfg.max_len},
          {"max_answer_len", cfg.max_answer_len},
          {"positional", to_string(cfg.positional)},
          {"seed", cfg.seed}};
}

ModelConfig config_from_json(const json& j, bool require_standard_vocab) {
  ModelConfig cfg;
  cfg.variant = parse_variant(j.value("variant", std::string(to_string(cfg.variant))));
  cfg.n_enc_layers = j.value("n_enc_layers", cfg.n_enc_layers);
  cfg.n_dec_layers = j.value("n_dec_layers", cfg.n_dec_layers);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.d_k = j.value("d_k", cfg.d_k);
  cfg.d_v = j.value("d_v", cfg.d_v);
  cfg.d_ff = j.value("d_ff", cfg.d_ff);
  cfg.max_len = j.value("max_len", cfg.max_len);
  cfg.max_answer_len = j.value("max_answer_len", cfg.max_answer_len);
  cfg.positional = parse_positional(j.value("positional", std::string(to_string(cfg.positional))));
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("vocab")) {
    const auto& v = j.at("vocab");
    if (v.size() < 3 || v[0] != "<pad>" || v[1] != "<bos>" || v[2] != "<eos>")
      throw Error("vocab must start with <pad>, <bos>, <eos>");
    std::string chars;
    for (std::size_t i = 3; i < v.size(); ++i) {
      const auto s = v[i].get<std::string>();
      if (s.size() != 1) throw Error("vocab entries must be single characters, got '" + s + "'");
      chars += s;
    }
    cfg.vocab = Vocab(chars);
  }
  if (require_standard_vocab) {
    cfg.validate();
  } else {
    cfg.validate_structure();
  }
  return cfg;
}

void RecordCollector::record(std::size_t row, int layer, int head, std::size_t position, Kind kind,
                             std::span<const float> vector) {
  ActivationRecord r;
  r.problem_id = ids_.at(row);
  r.layer = layer;
  r.head = head;
  r.position = position;
  r.kind = kind;
  r.vector.assign(vector.begin(), vector.end());
  records_.push_back(std::move(r));
}

namespace {

template <typename T>
Tensor<T> as_batched(const Tensor<T>& x) {
  if (x.rank() == 3) return x;
  if (x.rank() != 2) throw ShapeError("attention inputs must be rank 2 or 3, got " + tensor::shape_string(x.shape()));
  return tensor::reshape(x, {1, x.dim(0), x.dim(1)});
}

template <typename T>
Tensor<T> like_input(const Tensor<T>& out, const Tensor<T>& q) {
  if (q.rank() == 3) return out;
  return tensor::reshape(out, {out.dim(1), out.dim(2)});
}

// Additive key mask [rows * heads, width_q, width_k].
template <typename T>
Tensor<T> key_mask(const std::vector<std::size_t>& key_lengths, std::size_t heads, std::size_t width_q,
                   std::size_t width_k, bool causal) {
  constexpr T kBlocked = T(-1e9);
  std::vector<T> m(key_lengths.size() * heads * width_q * width_k, T(0));
  std::size_t off = 0;
  for (std::size_t len : key_lengths) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < width_q; ++i) {
        for (std::size_t j = 0; j < width_k; ++j, ++off) {
          if (j >= len || (causal && j > i)) m[off] = kBlocked;
        }
      }
    }
  }
  return Tensor<T>::from({key_lengths.size() * heads, width_q, width_k}, std::move(m));
}

template <typename T>
std::vector<T> sinusoid(std::size_t rows, std::size_t width, std::size_t d) {
  std::vector<T> pe(rows * width * d);
  for (std::size_t p = 0; p < width; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const T v = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      for (std::size_t r = 0; r < rows; ++r) pe[(r * width + p) * d + i] = v;
    }
  }
  return pe;
}

}  // namespace

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>* mask) {
  const Tensor<T> qb = as_batched(q);
  const Tensor<T> kb = as_batched(k);
  if (qb.dim(2) != kb.dim(2) || qb.dim(0) != kb.dim(0))
    throw ShapeError("query/key shape mismatch " + tensor::shape_string(q.shape()) + " vs " + tensor::shape_string(k.shape()));
  const T inv = T(1) / std::sqrt(static_cast<T>(qb.dim(2)));
  Tensor<T> scores = tensor::scale(tensor::bmm(qb, kb, true), inv);
  if (mask) scores = tensor::add(scores, q.rank() == 3 ? *mask : as_batched(*mask));
  return tensor::softmax(scores, 2);
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>* mask) {
  const Tensor<T> vb = as_batched(v);
  const Tensor<T> kb = as_batched(k);
  if (vb.dim(1) != kb.dim(1) || vb.dim(0) != kb.dim(0))
    throw ShapeError("key/value shape mismatch " + tensor::shape_string(k.shape()) + " vs " + tensor::shape_string(v.shape()));
  return like_input(tensor::bmm(attention_weights(q, k, mask), vb), q);
}

template <typename T>
Tensor<T> tp_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& r,
                       const Tensor<T>* mask) {
  const Tensor<T> out = attention(q, k, v, mask);
  if (out.shape() != r.shape())
    throw ShapeError("role shape " + tensor::shape_string(r.shape()) + " does not match attention output " +
                     tensor::shape_string(out.shape()));
  return tensor::mul(out, r);
}

template <typename T>
Transformer<T>::Transformer(ModelConfig config) : config_(std::move(config)) {
  config_.validate_structure();
  Rng rng(config_.seed);
  const int d = config_.d_model;
  const auto vocab = config_.vocab.size();
  src_embed_ = add_param("src.embed", {vocab, static_cast<std::size_t>(d)}, Init::embedding, rng);
  tgt_embed_ = add_param("tgt.embed", {vocab, static_cast<std::size_t>(d)}, Init::embedding, rng);
  if (config_.positional == Positional::learned) {
    src_pos_ = add_param("src.pos", {static_cast<std::size_t>(config_.max_len), static_cast<std::size_t>(d)}, Init::embedding, rng);
    tgt_pos_ = add_param("tgt.pos", {static_cast<std::size_t>(config_.max_answer_len), static_cast<std::size_t>(d)},
                         Init::embedding, rng);
  }
  for (int i = 0; i < config_.n_enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i) + ".";
    EncLayer l;
    l.ln1 = make_norm(p + "ln1", rng);
    l.self = make_attn(p + "self", rng);
    l.ln2 = make_norm(p + "ln2", rng);
    l.ff = {make_linear(p + "ff.in", d, config_.d_ff, rng), make_linear(p + "ff.out", config_.d_ff, d, rng)};
    enc_.push_back(std::move(l));
  }
  enc_final_ = make_norm("enc.final", rng);
  for (int i = 0; i < config_.n_dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i) + ".";
    DecLayer l;
    l.ln1 = make_norm(p + "ln1", rng);
    l.self = make_attn(p + "self", rng);
    l.ln2 = make_norm(p + "ln2", rng);
    l.cross = make_attn(p + "cross", rng);
    l.ln3 = make_norm(p + "ln3", rng);
    l.ff = {make_linear(p + "ff.in", d, config_.d_ff, rng), make_linear(p + "ff.out", config_.d_ff, d, rng)};
    dec_.push_back(std::move(l));
  }
  dec_final_ = make_norm("dec.final", rng);
  out_ = make_linear("out", d, static_cast<int>(vocab), rng);
}

template <typename T>
Tensor<T> Transformer<T>::add_param(const std::string& name, Shape shape, Init init, Rng& rng) {
  std::vector<T> values(tensor::numel(shape), T(0));
  switch (init) {
    case Init::xavier: {
      const double stddev = std::sqrt(2.0 / static_cast<double>(shape.at(0) + shape.at(1)));
      for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
      break;
    }
    case Init::embedding: {
      const double stddev = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
      for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
      break;
    }
    case Init::ones: std::fill(values.begin(), values.end(), T(1)); break;
    case Init::zeros: break;
  }
  auto t = Tensor<T>::from(std::move(shape), std::move(values), true);
  params_.emplace_back(name, t);
  return t;
}

template <typename T>
typename Transformer<T>::Linear Transformer<T>::make_linear(const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.w = add_param(name + ".w", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, Init::xavier, rng);
  l.b = add_param(name + ".b", {static_cast<std::size_t>(out)}, Init::zeros, rng);
  return l;
}

template <typename T>
typename Transformer<T>::Norm Transformer<T>::make_norm(const std::string& name, Rng& rng) {
  const auto d = static_cast<std::size_t>(config_.d_model);
  return {add_param(name + ".gain", {d}, Init::ones, rng), add_param(name + ".bias", {d}, Init::zeros, rng)};
}

template <typename T>
typename Transformer<T>::Attn Transformer<T>::make_attn(const std::string& name, Rng& rng) {
  const int d = config_.d_model;
  const int hk = config_.n_heads * config_.d_k;
  const int hv = config_.n_heads * config_.d_v;
  Attn a;
  a.q = make_linear(name + ".q", d, hk, rng);
  a.k = make_linear(name + ".k", d, hk, rng);
  a.v = make_linear(name + ".v", d, hv, rng);
  if (config_.variant == Variant::tp) a.r = make_linear(name + ".r", d, hv, rng);
  a.o = make_linear(name + ".o", hv, d, rng);
  return a;
}

template <typename T>
std::vector<Tensor<T>> Transformer<T>::parameters() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <typename T>
std::size_t Transformer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

template <typename T>
TokenBatch Transformer<T>::encode_questions(std::span<const std::string> questions) const {
  TokenBatch b;
  for (const auto& q : questions) {
    if (q.size() > static_cast<std::size_t>(config_.max_len))
      throw Error("question of length " + std::to_string(q.size()) + " exceeds max_len " + std::to_string(config_.max_len));
    if (q.empty()) throw Error("empty question");
    b.width = std::max(b.width, q.size());
  }
  b.ids.assign(questions.size() * b.width, kPad);
  for (std::size_t r = 0; r < questions.size(); ++r) {
    const auto ids = config_.vocab.encode(questions[r]);
    std::copy(ids.begin(), ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.width));
    b.lengths.push_back(ids.size());
  }
  return b;
}

template <typename T>
TokenBatch Transformer<T>::decoder_inputs(std::span<const std::string> answers) const {
  TokenBatch b;
  for (const auto& a : answers) b.width = std::max(b.width, a.size() + 1);
  if (b.width > static_cast<std::size_t>(config_.max_answer_len))
    throw Error("answer longer than max_answer_len - 1 characters");
  b.ids.assign(answers.size() * b.width, kPad);
  for (std::size_t r = 0; r < answers.size(); ++r) {
    b.ids[r * b.width] = kBos;
    const auto ids = config_.vocab.encode(answers[r]);
    std::copy(ids.begin(), ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.width + 1));
    b.lengths.push_back(ids.size() + 1);
  }
  return b;
}

template <typename T>
std::vector<int> Transformer<T>::decoder_targets(std::span<const std::string> answers, std::size_t width) const {
  std::vector<int> t(answers.size() * width, -1);
  for (std::size_t r = 0; r < answers.size(); ++r) {
    const auto ids = config_.vocab.encode(answers[r]);
    std::copy(ids.begin(), ids.end(), t.begin() + static_cast<std::ptrdiff_t>(r * width));
    t[r * width + ids.size()] = kEos;
  }
  return t;
}

template <typename T>
Tensor<T> Transformer<T>::embed(const Tensor<T>& table, const TokenBatch& batch) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  Tensor<T> x = tensor::scale(tensor::embedding(table, std::span<const int>(batch.ids)),
                              static_cast<T>(std::sqrt(static_cast<double>(d))));
  const bool is_src = table.node() == src_embed_.node();
  if (config_.positional == Positional::learned) {
    std::vector<int> positions(batch.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.width);
    return tensor::add(x, tensor::embedding(is_src ? src_pos_ : tgt_pos_, std::span<const int>(positions)));
  }
  return tensor::add(x, Tensor<T>::from({batch.ids.size(), d}, sinusoid<T>(batch.rows(), batch.width, d)));
}

template <typename T>
Tensor<T> Transformer<T>::apply(const Linear& l, const Tensor<T>& x) const {
  return tensor::add_bias(tensor::matmul(x, l.w), l.b);
}

template <typename T>
Tensor<T> Transformer<T>::norm(const Norm& n, const Tensor<T>& x) const {
  return tensor::layer_norm(x, n.gain, n.bias);
}

template <typename T>
Tensor<T> Transformer<T>::feed(const Feed& f, const Tensor<T>& x) const {
  return apply(f.out, tensor::relu(apply(f.in, x)));
}

template <typename T>
Tensor<T> Transformer<T>::split_heads(const Tensor<T>& x, std::size_t rows, std::size_t width, std::size_t d) const {
  const auto h = static_cast<std::size_t>(config_.n_heads);
  static constexpr std::size_t kOrder[] = {0, 2, 1, 3};
  return tensor::reshape(tensor::permute(tensor::reshape(x, {rows, width, h, d}), std::span<const std::size_t>(kOrder)),
                         {rows * h, width, d});
}

template <typename T>
Tensor<T> Transformer<T>::merge_heads(const Tensor<T>& x, std::size_t rows, std::size_t width, std::size_t d) const {
  const auto h = static_cast<std::size_t>(config_.n_heads);
  static constexpr std::size_t kOrder[] = {0, 2, 1, 3};
  return tensor::reshape(tensor::permute(tensor::reshape(x, {rows, h, width, d}), std::span<const std::size_t>(kOrder)),
                         {rows * width, h * d});
}

template <typename T>
Tensor<T> Transformer<T>::multi_head(const Attn& a, const Tensor<T>& xq, const Tensor<T>& xkv, std::size_t rows,
                                     std::size_t width_q, std::size_t width_k, const Tensor<T>& mask,
                                     ActivationSink* sink, int layer, const std::vector<std::size_t>* lengths) const {
  const auto dk = static_cast<std::size_t>(config_.d_k);
  const auto dv = static_cast<std::size_t>(config_.d_v);
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const bool tp = config_.variant == Variant::tp;
  const Tensor<T> q = split_heads(apply(a.q, xq), rows, width_q, dk);
  const Tensor<T> k = split_heads(apply(a.k, xkv), rows, width_k, dk);
  const Tensor<T> v = split_heads(apply(a.v, xkv), rows, width_k, dv);
  Tensor<T> r;
  if (tp) r = split_heads(apply(a.r, xq), rows, width_q, dv);

  if (sink) {
    // Split tensors are laid out [row, head, position, dim].
    std::vector<float> buf;
    auto emit = [&](const Tensor<T>& t, std::size_t dim, Kind kind) {
      const T* data = t.data().data();
      for (std::size_t b = 0; b < rows; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t p = 0; p < (*lengths)[b]; ++p) {
            const T* src = data + ((b * heads + h) * width_q + p) * dim;
            buf.assign(src, src + dim);
            sink->record(b, layer, static_cast<int>(h) + 1, p, kind, buf);
          }
        }
      }
    };
    emit(q, dk, Kind::query);
    emit(k, dk, Kind::key);
    emit(v, dv, Kind::value);
    if (tp) emit(r, dv, Kind::role);
  }

  const Tensor<T> heads_out = tp ? tp_attention(q, k, v, r, &mask) : attention(q, k, v, &mask);
  return apply(a.o, merge_heads(heads_out, rows, width_q, dv));
}

template <typename T>
typename Transformer<T>::Encoded Transformer<T>::encode(const TokenBatch& src, ActivationSink* sink) const {
  const std::size_t rows = src.rows();
  const std::size_t width = src.width;
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const Tensor<T> mask = key_mask<T>(src.lengths, heads, width, width, false);
  Tensor<T> x = embed(src_embed_, src);
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    const EncLayer& l = enc_[i];
    const Tensor<T> h = norm(l.ln1, x);
    x = tensor::add(x, multi_head(l.self, h, h, rows, width, width, mask, sink, static_cast<int>(i) + 1, &src.lengths));
    x = tensor::add(x, feed(l.ff, norm(l.ln2, x)));
  }
  return {norm(enc_final_, x), src.lengths, width};
}

template <typename T>
Tensor<T> Transformer<T>::decode(const Encoded& memory, const TokenBatch& tgt) const {
  const std::size_t rows = tgt.rows();
  if (rows != memory.lengths.size()) throw ShapeError("decoder batch does not match encoder batch");
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const Tensor<T> self_mask = key_mask<T>(tgt.lengths, heads, tgt.width, tgt.width, true);
  const Tensor<T> cross_mask = key_mask<T>(memory.lengths, heads, tgt.width, memory.width, false);
  Tensor<T> x = embed(tgt_embed_, tgt);
  for (const DecLayer& l : dec_) {
    const Tensor<T> h = norm(l.ln1, x);
    x = tensor::add(x, multi_head(l.self, h, h, rows, tgt.width, tgt.width, self_mask, nullptr, 0, nullptr));
    x = tensor::add(x, multi_head(l.cross, norm(l.ln2, x), memory.memory, rows, tgt.width, memory.width, cross_mask,
                                  nullptr, 0, nullptr));
    x = tensor::add(x, feed(l.ff, norm(l.ln3, x)));
  }
  return apply(out_, norm(dec_final_, x));
}

template <typename T>
Tensor<T> Transformer<T>::loss(std::span<const std::string> questions, std::span<const std::string> answers) const {
  if (questions.size() != answers.size()) throw ShapeError("question/answer count mismatch");
  const Encoded memory = encode(encode_questions(questions));
  const TokenBatch tgt = decoder_inputs(answers);
  const std::vector<int> targets = decoder_targets(answers, tgt.width);
  return tensor::cross_entropy(decode(memory, tgt), std::span<const int>(targets));
}

template <typename T>
std::vector<std::string> Transformer<T>::greedy_decode(std::span<const std::string> questions) const {
  tensor::NoGradGuard no_grad;
  const std::size_t rows = questions.size();
  if (rows == 0) return {};
  const Encoded memory = encode(encode_questions(questions));
  std::vector<std::vector<int>> prefix(rows, std::vector<int>{kBos});
  std::vector<bool> done(rows, false);
  const std::size_t vocab = config_.vocab.size();
  for (int step = 1; step <= config_.max_answer_len; ++step) {
    TokenBatch tgt;
    tgt.width = static_cast<std::size_t>(step);
    tgt.lengths.assign(rows, tgt.width);
    for (const auto& p : prefix) tgt.ids.insert(tgt.ids.end(), p.begin(), p.end());
    const Tensor<T> logits = decode(memory, tgt);
    bool all_done = true;
    for (std::size_t b = 0; b < rows; ++b) {
      if (done[b]) {
        prefix[b].push_back(kPad);
        continue;
      }
      const T* row = logits.data().data() + (b * tgt.width + tgt.width - 1) * vocab;
      const int best = static_cast<int>(std::max_element(row, row + vocab) - row);
      prefix[b].push_back(best);
      if (best < 3) done[b] = true;
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  std::vector<std::string> out;
  out.reserve(rows);
  for (const auto& p : prefix) out.push_back(config_.vocab.decode(std::span<const int>(p)));
  return out;
}

template <typename T>
std::string Transformer<T>::greedy_decode(std::string_view question) const {
  const std::string q(question);
  return greedy_decode(std::span<const std::string>(&q, 1)).front();
}

template <typename T>
std::pair<Tensor<T>, std::vector<ActivationRecord>> Transformer<T>::encode_recorded(std::string_view question,
                                                                                    std::int64_t problem_id) const {
  tensor::NoGradGuard no_grad;
  const std::string q(question);
  RecordCollector sink({problem_id});
  Encoded e = encode(encode_questions(std::span<const std::string>(&q, 1)), &sink);
  return {e.memory, std::move(sink.records())};
}

template class Transformer<float>;
template class Transformer<double>;

#define COMPPROBE_INSTANTIATE(T)                                                                           \
  template Tensor<T> attention_weights(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);               \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);     \
  template Tensor<T> tp_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                  const Tensor<T>*);

COMPPROBE_INSTANTIATE(float)
COMPPROBE_INSTANTIATE(double)

#undef COMPPROBE_INSTANTIATE

}  // namespace compprobe::model
