#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include <nlohmann/json.hpp>

#include "compprobe/checkpoint.hpp"
#include "compprobe/error.hpp"
#include "compprobe/model.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace compprobe;
using namespace compprobe::model;
using testutil::random_tensor;
using testutil::T64;

namespace {

ModelConfig tiny(Variant v = Variant::standard) {
  ModelConfig c;
  c.variant = v;
  c.n_enc_layers = 2;
  c.n_dec_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_k = 8;
  c.d_v = 8;
  c.d_ff = 32;
  c.seed = 11;
  return c;
}

template <typename A, typename B>
double max_rel(const A& a, const B& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
    worst = std::max(worst, std::abs(x - y) / std::max({1e-30, std::abs(x), std::abs(y)}));
  }
  return worst;
}

// Copies every parameter of `from` into the same-named parameter of `to`;
// role projections of a tp model become w = 0, b = 1.
template <typename T>
void copy_as_tp(const Transformer<T>& from, Transformer<T>& to) {
  std::map<std::string, Tensor<T>> src(from.named_parameters().begin(), from.named_parameters().end());
  for (auto [name, t] : to.named_parameters()) {
    auto dst = t.mutable_data();
    if (name.ends_with(".r.w")) {
      std::fill(dst.begin(), dst.end(), T(0));
    } else if (name.ends_with(".r.b")) {
      std::fill(dst.begin(), dst.end(), T(1));
    } else {
      const auto s = src.at(name).data();
      std::copy(s.begin(), s.end(), dst.begin());
    }
  }
}

const std::vector<std::string> kQuestions{"Evaluate (1 + 2)/3", "Evaluate (3*4)/(2*6)", "Evaluate 4 + 5*2",
                                          "Evaluate (2 + 6*3)/4", "Evaluate (1 + 5)/3 + 4"};
const std::vector<std::string> kAnswers{"1", "1", "14", "5", "6"};

}  // namespace

TEST_CASE("attention on a hand-sized case") {
  // 2 queries, 3 keys, d_k = 2, d_v = 2
  const std::vector<double> q{1, 0, 0, 2}, k{1, 1, 0, 1, 2, 0}, v{1, 2, 3, 4, 5, 6};
  const auto out = attention(T64::from({2, 2}, q), T64::from({3, 2}, k), T64::from({3, 2}, v));
  REQUIRE(out.shape() == tensor::Shape{2, 2});
  const double s = 1 / std::sqrt(2.0);
  double scores[2][3];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) scores[i][j] = (q[2 * i] * k[2 * j] + q[2 * i + 1] * k[2 * j + 1]) * s;
  for (int i = 0; i < 2; ++i) {
    double z = 0, o0 = 0, o1 = 0;
    for (int j = 0; j < 3; ++j) z += std::exp(scores[i][j]);
    for (int j = 0; j < 3; ++j) {
      o0 += std::exp(scores[i][j]) / z * v[2 * j];
      o1 += std::exp(scores[i][j]) / z * v[2 * j + 1];
    }
    CHECK(out.at(2 * i) == doctest::Approx(o0).epsilon(1e-12));
    CHECK(out.at(2 * i + 1) == doctest::Approx(o1).epsilon(1e-12));
  }
  // values computed by hand for the frozen inputs
  CHECK(out.at(0) == doctest::Approx(3.58395987).epsilon(1e-8));
  CHECK(out.at(1) == doctest::Approx(4.58395987).epsilon(1e-8));
  CHECK(out.at(2) == doctest::Approx(2.32515036).epsilon(1e-8));
  CHECK(out.at(3) == doctest::Approx(3.32515036).epsilon(1e-8));
}

TEST_CASE("attention limits") {
  Rng rng(1);
  const auto q = random_tensor(rng, {3, 4}, 1.0, false);
  const auto v = random_tensor(rng, {5, 4}, 1.0, false);
  auto same = T64::zeros({5, 4});
  for (std::size_t i = 0; i < same.size(); ++i) same.mutable_data()[i] = static_cast<double>(i % 4);
  const auto mean_out = attention(q, same, v);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t d = 0; d < 4; ++d) {
      double m = 0;
      for (std::size_t j = 0; j < 5; ++j) m += v.at(j * 4 + d) / 5;
      CHECK(mean_out.at(i * 4 + d) == doctest::Approx(m).epsilon(1e-12));
    }
  auto k = T64::zeros({5, 4});
  auto qq = T64::full({1, 4}, 1.0);
  for (std::size_t d = 0; d < 4; ++d) k.mutable_data()[2 * 4 + d] = 100.0;
  const auto sat = attention(qq, k, v);
  for (std::size_t d = 0; d < 4; ++d) CHECK(sat.at(d) == doctest::Approx(v.at(2 * 4 + d)).epsilon(1e-9));
  CHECK_THROWS_AS(attention(q, T64::zeros({5, 3}), v), ShapeError);
  CHECK_THROWS_AS(attention(q, same, T64::zeros({4, 4})), ShapeError);
}

TEST_CASE("tp_attention") {
  Rng rng(2);
  const auto q = random_tensor(rng, {2, 3, 4}, 1.0, false);
  const auto k = random_tensor(rng, {2, 5, 4}, 1.0, false);
  const auto v = random_tensor(rng, {2, 5, 6}, 1.0, false);
  const auto base = attention(q, k, v);
  const auto ones = tp_attention(q, k, v, T64::full({2, 3, 6}, 1.0));
  CHECK(std::equal(base.data().begin(), base.data().end(), ones.data().begin()));
  const auto zero = tp_attention(q, k, v, T64::zeros({2, 3, 6}));
  for (double x : zero.data()) CHECK(x == 0.0);
  const auto r = random_tensor(rng, {2, 3, 6}, 1.0, false);
  const auto bound = tp_attention(q, k, v, r);
  for (std::size_t i = 0; i < bound.size(); ++i) CHECK(bound.at(i) == base.at(i) * r.at(i));
  CHECK_THROWS_AS(tp_attention(q, k, v, T64::zeros({2, 3, 5})), ShapeError);
  // gradient through the role binding
  CHECK(testutil::gradcheck([&](const auto& x) { return testutil::weighted_sum(tp_attention(x[0], x[1], x[2], x[3]), Rng(5)); },
                            {random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 5, 4}), random_tensor(rng, {2, 5, 6}),
                             random_tensor(rng, {2, 3, 6})}) < 1e-4);
}

TEST_CASE("attention weight rows sum to one") {
  Rng rng(3);
  const auto w = attention_weights(random_tensor(rng, {3, 4, 8}, 3.0, false), random_tensor(rng, {3, 6, 8}, 3.0, false));
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 6; ++j) s += w.at(r * 6 + j);
    CHECK(std::abs(s - 1) < 1e-12);
  }
}

TEST_CASE("attention rows sum to one at every layer and head of a model") {
  const Transformer<double> m(tiny(Variant::tp));
  const auto [memory, records] = m.encode_recorded(kQuestions[0]);
  const std::size_t len = kQuestions[0].size();
  for (int layer = 1; layer <= 2; ++layer)
    for (int head = 1; head <= 2; ++head) {
      std::vector<double> q(len * 8), k(len * 8);
      for (const auto& r : records) {
        if (r.layer != layer || r.head != head) continue;
        if (r.kind == Kind::query) std::copy(r.vector.begin(), r.vector.end(), q.begin() + r.position * 8);
        if (r.kind == Kind::key) std::copy(r.vector.begin(), r.vector.end(), k.begin() + r.position * 8);
      }
      const auto w = attention_weights(T64::from({len, 8}, q), T64::from({len, 8}, k));
      for (std::size_t i = 0; i < len; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < len; ++j) s += w.at(i * len + j);
        CHECK(std::abs(s - 1) < 1e-12);
      }
    }
}

TEST_CASE("config validation and json") {
  ModelConfig c = tiny();
  CHECK_NOTHROW(c.validate());
  CHECK(config_from_json(to_json(c)) == c);
  c.d_v = 4;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.vocab = Vocab("0123456789");
  CHECK_THROWS_AS(c.validate(), Error);
  const auto std_vocab = Vocab::standard();
  for (char ch : std::string("Evaluate 0123456789+*/() ")) CHECK(std_vocab.contains(ch));
}

TEST_CASE("default config sizes") {
  const ModelConfig c;
  CHECK(c.n_enc_layers == 2);
  CHECK(c.n_dec_layers == 2);
  CHECK(c.n_heads == 4);
  CHECK(c.d_model == 128);
  CHECK(c.d_k == 32);
  CHECK(c.d_ff == 512);
  CHECK(Transformer<float>(c).parameter_count() > 0);
}

TEST_CASE("encode record counts") {
  for (auto [variant, kinds] : {std::pair{Variant::standard, 3}, std::pair{Variant::tp, 4}}) {
    const Transformer<float> m(tiny(variant));
    for (const auto& q : kQuestions) {
      const auto [memory, records] = m.encode_recorded(q, 7);
      CHECK(records.size() == static_cast<std::size_t>(2 * 2 * kinds) * q.size());
      std::set<std::tuple<int, int, std::size_t, Kind>> cells;
      for (const auto& r : records) {
        CHECK(r.problem_id == 7);
        CHECK(r.vector.size() == 8);
        if (variant == Variant::standard) CHECK(r.kind != Kind::role);
        cells.insert({r.layer, r.head, r.position, r.kind});
      }
      CHECK(cells.size() == records.size());
    }
  }
}

TEST_CASE("encode errors") {
  const Transformer<float> m(tiny());
  CHECK_THROWS_AS(m.encode_recorded("Evaluate 1 - 2"), Error);
  CHECK_THROWS_AS(m.encode_recorded(std::string(49, '1')), Error);
  CHECK_NOTHROW(m.encode_recorded(std::string(48, '1')));
}

TEST_CASE("encode and greedy decode are deterministic") {
  const Transformer<float> m(tiny());
  const auto a = m.encode_recorded(kQuestions[3]).first;
  const auto b = m.encode_recorded(kQuestions[3]).first;
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  const auto out = m.greedy_decode(std::span<const std::string>(kQuestions));
  CHECK(m.greedy_decode(std::span<const std::string>(kQuestions)) == out);
  for (const auto& s : out) CHECK(s.size() <= 3);
  for (std::size_t i = 0; i < kQuestions.size(); ++i) CHECK(m.greedy_decode(kQuestions[i]) == out[i]);
}

TEST_CASE("padding does not leak into non-pad positions") {
  const Transformer<double> m(tiny(Variant::tp));
  const std::vector<std::string> batch{kQuestions[2], kQuestions[1]};
  auto tokens = m.encode_questions(std::span<const std::string>(batch));
  const std::size_t short_len = kQuestions[2].size();
  REQUIRE(tokens.width > short_len);
  const auto base = m.encode(tokens).memory;

  // scramble the pad slots of the short row
  Rng rng(4);
  for (std::size_t p = short_len; p < tokens.width; ++p) tokens.ids[p] = 3 + static_cast<int>(rng.below(10));
  const auto scrambled = m.encode(tokens).memory;
  const std::size_t d = 16;
  for (std::size_t i = 0; i < short_len * d; ++i) CHECK(scrambled.at(i) == base.at(i));
  for (std::size_t i = tokens.width * d; i < base.size(); ++i) CHECK(scrambled.at(i) == base.at(i));

  // and the row encoded on its own agrees
  const auto alone = m.encode_recorded(kQuestions[2]).first;
  double worst = 0;
  for (std::size_t i = 0; i < short_len * d; ++i) worst = std::max(worst, std::abs(alone.at(i) - base.at(i)));
  CHECK(worst < 1e-12);
}

TEST_CASE("tp with all-ones roles equals standard") {
  SUBCASE("float64 exact") {
    const Transformer<double> s(tiny(Variant::standard));
    Transformer<double> t(tiny(Variant::tp));
    copy_as_tp(s, t);
    for (const auto& q : kQuestions) {
      const auto a = s.encode_recorded(q).first;
      const auto b = t.encode_recorded(q).first;
      CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    }
    const auto la = s.loss(std::span<const std::string>(kQuestions), std::span<const std::string>(kAnswers)).item();
    const auto lb = t.loss(std::span<const std::string>(kQuestions), std::span<const std::string>(kAnswers)).item();
    CHECK(la == lb);
  }
  SUBCASE("float32 within 1e-6") {
    const Transformer<float> s(tiny(Variant::standard));
    Transformer<float> t(tiny(Variant::tp));
    copy_as_tp(s, t);
    for (const auto& q : kQuestions) {
      const auto a = s.encode_recorded(q).first;
      const auto b = t.encode_recorded(q).first;
      CHECK(max_rel(a.data(), b.data()) <= 1e-6);
    }
  }
}

TEST_CASE("end-to-end gradient check on a one-layer, one-head model") {
  for (Variant v : {Variant::standard, Variant::tp}) {
    ModelConfig c;
    c.variant = v;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.n_heads = 1;
    c.d_model = 8;
    c.d_k = 8;
    c.d_v = 8;
    c.d_ff = 16;
    c.seed = 3;
    const Transformer<double> m(c);
    const std::vector<std::string> qs{kQuestions[0], kQuestions[2]};
    const std::vector<std::string> as{kAnswers[0], kAnswers[2]};
    const double err = testutil::gradcheck(
        [&](const std::vector<T64>&) {
          return m.loss(std::span<const std::string>(qs), std::span<const std::string>(as));
        },
        m.parameters());
    CHECK(err < 1e-3);
  }
}

TEST_CASE("checkpoint round trip") {
  testutil::TempDir dir("ckpt");
  for (Variant v : {Variant::standard, Variant::tp}) {
    const Transformer<float> m(tiny(v));
    const auto path = dir / ("m_" + std::string(to_string(v)) + ".ckpt");
    save_checkpoint(path, m);
    ModelConfig other = tiny(v);
    other.seed = 99;
    Transformer<float> fresh(other);
    CHECK_THROWS_AS(load_checkpoint(path, fresh), ConfigMismatchError);
    Transformer<float> same(tiny(v));
    for (auto& p : same.parameters())
      for (auto& x : p.mutable_data()) x = 0.f;
    load_checkpoint(path, same);
    const auto restored = model_from_checkpoint<float>(read_checkpoint(path));
    for (const auto& q : kQuestions) {
      const auto a = m.encode_recorded(q).first;
      const auto b = restored.encode_recorded(q).first;
      const auto c = same.encode_recorded(q).first;
      CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
      CHECK(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
    }
    // float64 checkpoints keep every bit too
    const Transformer<double> md(tiny(v));
    save_checkpoint(dir / "d.ckpt", md);
    const auto rd = model_from_checkpoint<double>(read_checkpoint(dir / "d.ckpt"));
    for (std::size_t i = 0; i < md.parameters().size(); ++i) {
      const auto a = md.parameters()[i].data();
      const auto b = rd.parameters()[i].data();
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST_CASE("checkpoint errors") {
  testutil::TempDir dir("ckptbad");
  const Transformer<float> tp(tiny(Variant::tp));
  const auto path = dir / "tp.ckpt";
  save_checkpoint(path, tp);
  Transformer<float> standard(tiny(Variant::standard));
  CHECK_THROWS_AS(load_checkpoint(path, standard), ConfigMismatchError);

  const std::string bytes = testutil::slurp(path);
  std::string bad = bytes;
  bad[0] = 'X';
  testutil::spit(dir / "magic.ckpt", bad);
  try {
    read_checkpoint(dir / "magic.ckpt");
    FAIL("expected a checkpoint error");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }
  testutil::spit(dir / "short.ckpt", bytes.substr(0, bytes.size() - 10));
  CHECK_THROWS_AS(read_checkpoint(dir / "short.ckpt"), CheckpointError);
  testutil::spit(dir / "header.ckpt", bytes.substr(0, 6));
  CHECK_THROWS_AS(read_checkpoint(dir / "header.ckpt"), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), CheckpointError);
}
