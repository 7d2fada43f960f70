#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "barcodemamba/checkpoint.hpp"
#include "barcodemamba/grad_check.hpp"
#include "test_util.hpp"

using namespace bm;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny(MixerKind mixer, Index vocab) {
  BackboneConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.head_dim = 4;
  c.state_dim = 3;
  c.vocab_size = vocab;
  c.mixer = mixer;
  c.chunk_len = 4;
  return c;
}

TokenBatch random_batch(Rng& rng, Index batch, Index L, Index vocab) {
  TokenBatch b;
  b.seq_len = L;
  for (Index i = 0; i < batch * L; ++i) {
    b.ids.push_back(3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 3))));
    b.mask.push_back(1);
  }
  return b;
}

// Gives out_proj weights a nonzero value so the mixer path is exercised.
template <typename S>
void perturb_all(Backbone<S>& m, std::uint64_t seed, double scale = 0.2) {
  Rng rng(seed);
  for (auto& p : m.parameters())
    if (p.name.find("out_proj") != std::string::npos || p.name.find("D") != std::string::npos)
      p.tensor.mutable_value() += bm::test::randn<S>(rng, p.tensor.rows(), p.tensor.cols(), scale);
}

}  // namespace

TEST_CASE("closed-form parameter count matches the materialized model") {
  for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2})
    for (Index vocab : {Index(8), Index(259)}) {
      auto cfg = tiny(mixer, vocab);
      Backbone<double> m(cfg, 1);
      CHECK(m.parameter_count() == parameter_count(cfg));
      Rng rng(2);
      m.attach_head(5, rng);
      cfg.num_classes = 5;
      CHECK(m.parameter_count() == parameter_count(cfg));
    }
}

TEST_CASE("character model at n=2, d=256 has the hand-counted size") {
  BackboneConfig c;
  c.n_layers = 2;
  c.d_model = 256;
  c.head_dim = 64;
  c.state_dim = 64;
  c.vocab_size = 8;
  // inner 512, 8 heads, B and C per head: 2 * 8 * 64 = 1024 columns each way.
  const Index in_proj = 256 * (512 + 512 + 1024 + 8);
  const Index conv = 4 * 1536 + 1536;
  const Index mixer = in_proj + conv + 3 * 8 + 512 * 256;
  const Index mlp = 256 * 1024 + 1024 + 1024 * 256 + 256;
  const Index block = mixer + mlp + 4 * 256;
  CHECK(parameter_count(c) == 8 * 256 + 2 * block + 2 * 256);
  CHECK(parameter_count(c) == 2385968);
}

TEST_CASE("next-token logits are causal for both mixers and both tokenizers") {
  for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2})
    for (Index vocab : {Index(8), Index(4099)}) {
      Backbone<double> m(tiny(mixer, vocab), 3);
      perturb_all(m, 4);
      Rng rng(5);
      const Index L = 12;
      auto batch = random_batch(rng, 1, L, vocab);
      const auto base = m.lm_logits(m.forward_hidden(batch)).value();
      for (Index t = 0; t < L; ++t) {
        auto changed = batch;
        changed.ids[static_cast<std::size_t>(t)] =
            3 + (changed.ids[static_cast<std::size_t>(t)] - 3 + 1) % static_cast<int>(vocab - 3);
        const auto out = m.lm_logits(m.forward_hidden(changed)).value();
        CHECK(out.topRows(t) == base.topRows(t));
        CHECK(out.row(t) != base.row(t));
      }
    }
}

TEST_CASE("batched sequences do not interact") {
  Backbone<double> m(tiny(MixerKind::mamba2, 8), 6);
  perturb_all(m, 7);
  Rng rng(8);
  const auto batch = random_batch(rng, 3, 10, 8);
  const auto all = m.forward_hidden(batch).value();
  for (Index s = 0; s < 3; ++s) {
    TokenBatch one;
    one.seq_len = 10;
    one.ids.assign(batch.ids.begin() + s * 10, batch.ids.begin() + (s + 1) * 10);
    one.mask.assign(10, 1);
    CHECK((m.forward_hidden(one).value() - all.middleRows(s * 10, 10)).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("full layers pass finite-difference gradient checks") {
  for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2}) {
    auto cfg = tiny(mixer, 8);
    cfg.n_layers = 1;
    cfg.d_model = 4;
    cfg.head_dim = 4;
    cfg.state_dim = 2;
    cfg.mlp_ratio = 2;
    cfg.chunk_len = 3;
    Backbone<double> m(cfg, 9);
    perturb_all(m, 10, 0.5);
    Rng rng(11);
    const auto batch = random_batch(rng, 2, 5, 8);
    std::vector<int> targets;
    for (std::size_t i = 0; i < batch.ids.size(); ++i) targets.push_back(static_cast<int>(rng.below(8)));
    const std::vector<std::uint8_t> mask(batch.ids.size(), 1);
    std::vector<Tensor<double>> params;
    for (auto& p : m.parameters()) params.push_back(p.tensor);
    const double err = grad_check(
        [&] {
          return softmax_cross_entropy(m.lm_logits(m.forward_hidden(batch)),
                                       std::span<const int>(targets),
                                       std::span<const std::uint8_t>(mask));
        },
        params);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("zero-parameter model produces all-zero logits") {
  auto cfg = tiny(MixerKind::mamba2, 8);
  auto m = Backbone<double>::zeros(cfg);
  Rng rng(12);
  const auto logits = m.lm_logits(m.forward_hidden(random_batch(rng, 2, 6, 8))).value();
  CHECK(logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("out-of-vocabulary ids are rejected") {
  Backbone<double> m(tiny(MixerKind::mamba2, 8), 1);
  TokenBatch b;
  b.seq_len = 2;
  b.ids = {3, 8};
  b.mask = {1, 1};
  CHECK_THROWS_AS(m.forward_hidden(b), DataError);
}

TEST_CASE("pooling and classification shapes") {
  Backbone<double> m(tiny(MixerKind::mamba1, 8), 1);
  Rng rng(13);
  auto b = random_batch(rng, 3, 5, 8);
  CHECK(m.embed_sequence(b).rows() == 3);
  CHECK(m.embed_sequence(b).cols() == 8);
  CHECK(m.embed_sequence(b, Pooling::last).value() ==
        m.forward_hidden(b).value()(Eigen::seq(4, 14, 5), Eigen::all));
  CHECK_THROWS_AS(m.classify(b), ConfigError);
  m.attach_head(4, rng);
  CHECK(m.classify(b).cols() == 4);
  m.attach_head(6, rng);
  CHECK(m.classify(b).cols() == 6);
  CHECK(m.parameter_count() == parameter_count(m.config()));
}

TEST_CASE("parameter container round trip is bit-exact") {
  Rng rng(14);
  std::vector<StoredTensor> ts;
  ts.push_back({"a", DType::f64, bm::test::randn(rng, 3, 4)});
  Matrix<double> f = bm::test::randn(rng, 2, 2);
  f = f.cast<float>().cast<double>();
  ts.push_back({"b.weight", DType::f32, f});
  std::stringstream ss;
  write_param_container(ss, ts);
  const auto back = read_param_container(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a");
  CHECK(back[0].values == ts[0].values);
  CHECK(back[1].dtype == DType::f32);
  CHECK(back[1].values == f);
  std::stringstream bad("NOTPARAM");
  CHECK_THROWS_AS(read_param_container(bad), DataError);
}

TEST_CASE("checkpoint round trip is bit-exact for both precisions") {
  const auto dir = fs::temp_directory_path() / "bm_test_ckpt";
  fs::remove_all(dir);
  auto run = [&](auto tag) {
    using S = decltype(tag);
    const auto tok = Tokenizer::kmer(4);
    auto cfg = tiny(MixerKind::mamba2, static_cast<Index>(tok.vocab_size()));
    Backbone<S> m(cfg, 15);
    perturb_all(m, 16);
    Rng rng(17);
    m.attach_head(3, rng);
    TrainingState<S> st;
    st.step = 42;
    st.seed = 7;
    st.first_moment["embedding.weight"] = Matrix<S>::Constant(2, 2, S(0.5));
    st.second_moment["embedding.weight"] = Matrix<S>::Constant(2, 2, S(0.25));
    const auto path = dir / (std::string(to_string(dtype_of<S>())) + ".ckpt");
    save_checkpoint(path, m, tok, st, {{"note", "x"}});
    auto ck = load_checkpoint<S>(path);
    CHECK(ck.model.parameter_hash() == m.parameter_hash());
    CHECK(ck.tokenizer == tok);
    CHECK(ck.state.step == 42);
    CHECK(ck.state.first_moment.at("embedding.weight") == st.first_moment.at("embedding.weight"));
    CHECK(ck.metadata.at("note") == "x");
    const auto batch = random_batch(rng, 2, 8, cfg.vocab_size);
    CHECK(ck.model.classify(batch).value() == m.classify(batch).value());
    CHECK(peek_checkpoint(path).at("dtype") == std::string(to_string(dtype_of<S>())));
  };
  run(float{});
  run(double{});
}

TEST_CASE("vocabulary mismatch is rejected at save time") {
  Backbone<double> m(tiny(MixerKind::mamba2, 8), 1);
  CHECK_THROWS_AS(save_checkpoint(fs::temp_directory_path() / "bm_bad.ckpt", m, Tokenizer::kmer(4),
                                  TrainingState<double>{}, {}),
                  ConfigError);
}

TEST_CASE("config validation") {
  auto c = tiny(MixerKind::mamba2, 8);
  c.head_dim = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(MixerKind::mamba2, 8);
  CHECK(BackboneConfig::from_json(c.to_json()) == c);
}
