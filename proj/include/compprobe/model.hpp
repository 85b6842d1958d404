#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "compprobe/rng.hpp"
#include "compprobe/tensor.hpp"

namespace compprobe::model {

using tensor::Tensor;

enum class Variant { standard, tp };
enum class Positional { sinusoidal, learned };
enum class Kind { query = 0, key = 1, value = 2, role = 3 };

std::string_view to_string(Variant v);
std::string_view to_string(Positional p);
std::string_view to_string(Kind k);
Variant parse_variant(std::string_view s);
Positional parse_positional(std::string_view s);
Kind parse_kind(std::string_view s);

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

// Token table: PAD, BOS, EOS followed by single characters.
class Vocab {
 public:
  Vocab() : Vocab(std::string()) {}
  explicit Vocab(std::string chars);
  // Every character that can appear in a rendered question or an answer.
  static Vocab standard();

  std::size_t size() const { return chars_.size() + 3; }
  const std::string& chars() const { return chars_; }
  bool contains(char c) const;
  // Throws Error naming the first unknown character.
  int id(char c) const;
  std::vector<int> encode(std::string_view text) const;
  // Decodes up to (not including) EOS; PAD and BOS are skipped.
  std::string decode(std::span<const int> ids) const;
  char character(int id) const;
  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  std::string chars_;
  std::array<int, 256> index_{};
};

struct ModelConfig {
  Variant variant = Variant::standard;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int n_heads = 4;
  int d_model = 128;
  int d_k = 32;
  int d_v = 32;
  int d_ff = 512;
  Vocab vocab = Vocab::standard();
  int max_len = 48;
  int max_answer_len = 3;  // decode steps, EOS included
  Positional positional = Positional::sinusoidal;
  std::uint64_t seed = 1;

  // Throws Error describing the first violated invariant.
  void validate() const;
  // validate() without the vocabulary coverage check, so configs stored by
  // other builds can still be loaded and reported on.
  void validate_structure() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j, bool require_standard_vocab = true);

struct ActivationRecord {
  std::int64_t problem_id = 0;
  int layer = 0;  // 1-based encoder layer
  int head = 0;   // 1-based
  std::size_t position = 0;
  Kind kind = Kind::query;
  std::vector<float> vector;
};

// Receives per-head projections of encoder layer inputs during encode().
class ActivationSink {
 public:
  virtual ~ActivationSink() = default;
  virtual void record(std::size_t row, int layer, int head, std::size_t position, Kind kind,
                      std::span<const float> vector) = 0;
};

// Collects records for a batch, mapping batch rows to problem ids.
class RecordCollector : public ActivationSink {
 public:
  explicit RecordCollector(std::vector<std::int64_t> problem_ids) : ids_(std::move(problem_ids)) {}
  void record(std::size_t row, int layer, int head, std::size_t position, Kind kind,
              std::span<const float> vector) override;
  std::vector<ActivationRecord>& records() { return records_; }

 private:
  std::vector<std::int64_t> ids_;
  std::vector<ActivationRecord> records_;
};

// softmax(Q K^T / sqrt(d_k) + mask) for Q [g, m, d_k], K [g, n, d_k]; rank-2
// inputs are treated as g = 1. `mask` is additive and shaped like the result.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>* mask = nullptr);

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>* mask = nullptr);

// attention(Q, K, V) bound to the role vectors R by Hadamard product.
template <typename T>
Tensor<T> tp_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& r,
                       const Tensor<T>* mask = nullptr);

// Padded token matrix, row-major [rows, width].
struct TokenBatch {
  std::vector<int> ids;
  std::vector<std::size_t> lengths;
  std::size_t width = 0;
  std::size_t rows() const { return lengths.size(); }
};

template <typename T>
class Transformer {
 public:
  struct Encoded {
    Tensor<T> memory;  // [rows * width, d_model]
    std::vector<std::size_t> lengths;
    std::size_t width = 0;
  };

  explicit Transformer(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() const { return params_; }
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  // Throws Error for unknown characters or inputs longer than max_len.
  TokenBatch encode_questions(std::span<const std::string> questions) const;
  TokenBatch decoder_inputs(std::span<const std::string> answers) const;
  std::vector<int> decoder_targets(std::span<const std::string> answers, std::size_t width) const;

  Encoded encode(const TokenBatch& src, ActivationSink* sink = nullptr) const;
  // Logits [rows * tgt.width, vocab] under teacher forcing.
  Tensor<T> decode(const Encoded& memory, const TokenBatch& tgt) const;
  // Mean cross-entropy over answer tokens (EOS included).
  Tensor<T> loss(std::span<const std::string> questions, std::span<const std::string> answers) const;

  // Greedy decoding from BOS, capped at max_answer_len steps.
  std::vector<std::string> greedy_decode(std::span<const std::string> questions) const;
  std::string greedy_decode(std::string_view question) const;

  // Single-question encode with every activation record.
  std::pair<Tensor<T>, std::vector<ActivationRecord>> encode_recorded(std::string_view question,
                                                                      std::int64_t problem_id = 0) const;

 private:
  struct Linear {
    Tensor<T> w, b;
  };
  struct Norm {
    Tensor<T> gain, bias;
  };
  struct Attn {
    Linear q, k, v, r, o;
  };
  struct Feed {
    Linear in, out;
  };
  struct EncLayer {
    Norm ln1, ln2;
    Attn self;
    Feed ff;
  };
  struct DecLayer {
    Norm ln1, ln2, ln3;
    Attn self, cross;
    Feed ff;
  };

  enum class Init { xavier, embedding, ones, zeros };
  Tensor<T> add_param(const std::string& name, tensor::Shape shape, Init init, Rng& rng);
  Linear make_linear(const std::string& name, int in, int out, Rng& rng);
  Norm make_norm(const std::string& name, Rng& rng);
  Attn make_attn(const std::string& name, Rng& rng);

  Tensor<T> embed(const Tensor<T>& table, const TokenBatch& batch) const;
  Tensor<T> apply(const Linear& l, const Tensor<T>& x) const;
  Tensor<T> norm(const Norm& n, const Tensor<T>& x) const;
  Tensor<T> feed(const Feed& f, const Tensor<T>& x) const;
  Tensor<T> split_heads(const Tensor<T>& x, std::size_t rows, std::size_t width, std::size_t d) const;
  Tensor<T> merge_heads(const Tensor<T>& x, std::size_t rows, std::size_t width, std::size_t d) const;
  Tensor<T> multi_head(const Attn& a, const Tensor<T>& xq, const Tensor<T>& xkv, std::size_t rows, std::size_t width_q,
                       std::size_t width_k, const Tensor<T>& mask, ActivationSink* sink, int layer,
                       const std::vector<std::size_t>* lengths) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  Tensor<T> src_embed_, tgt_embed_, src_pos_, tgt_pos_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  Norm enc_final_, dec_final_;
  Linear out_;
};

}  // namespace compprobe::model
