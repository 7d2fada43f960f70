// Acceptance gate: one PASS/FAIL line per criterion. Optional arguments pick
// a subset, e.g. `acceptance 1 4 11`. BM_SWEEP_CONFIG overrides the per-cell
// budget of the ablation sweep (criterion 7).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "barcodemamba/checkpoint.hpp"
#include "barcodemamba/experiment.hpp"
#include "barcodemamba/grad_check.hpp"
#include "barcodemamba/ssd.hpp"
#include "test_util.hpp"

using namespace bm;
namespace fs = std::filesystem;
using bm::test::randn;
using bm::test::randu;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bm_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

using T = Tensor<double>;

T project(const T& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(out * T::constant(randn(rng, out.rows(), out.cols())));
}

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

template <typename S>
void perturb(Backbone<S>& m, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& p : m.parameters())
    if (p.name.find("out_proj") != std::string::npos || p.name.find("D") != std::string::npos)
      p.tensor.mutable_value() += randn<S>(rng, p.tensor.rows(), p.tensor.cols(), scale);
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

// 1 ------------------------------------------------------------------------
Outcome ssd_equivalence() {
  double worst = 0;
  int instances = 0;
  Rng rng(101);
  for (Index L : {8, 32, 128})
    for (int rep = 0; rep < 20; ++rep) {
      const Index heads = 1 + static_cast<Index>(rng.below(3));
      const Index p = 1 + static_cast<Index>(rng.below(4));
      const Index s = 1 + static_cast<Index>(rng.below(5));
      const auto inst = bm::test::random_scan(rng, L, heads, p, s);
      const RowVector<double> D = randn(rng, 1, heads);
      const auto naive = ssd_naive(inst, D);
      worst = std::max(worst, (naive - ssd_quadratic(inst, D)).cwiseAbs().maxCoeff());
      for (Index chunk : {Index(1), Index(16), L})
        worst = std::max(worst, (naive - ssd_chunked(inst, D, chunk)).cwiseAbs().maxCoeff());
      ++instances;
    }
  return {instances >= 50 && worst < 1e-10,
          std::to_string(instances) + " instances, max abs diff " + fmt("%.3g", worst)};
}

// 2 ------------------------------------------------------------------------
Outcome gradients() {
  double worst = 0;
  std::string worst_op;
  int checked = 0;
  auto record = [&](const std::string& op, double err) {
    ++checked;
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(500 + seed);
    auto a = T::parameter(randn(rng, 4, 3));
    auto b = T::parameter(randn(rng, 4, 3));
    auto row = T::parameter(randn(rng, 1, 3));
    auto m = T::parameter(randn(rng, 3, 5));
    auto n = T::parameter(randn(rng, 6, 3));
    auto chk = [&](const std::string& op, auto&& f, std::vector<T> in) {
      record(op, grad_check([&] { return project(f(), 7 + seed); }, std::move(in)));
    };
    chk("matmul", [&] { return matmul(a, m); }, {a, m});
    chk("matmul_nt", [&] { return matmul_nt(a, n); }, {a, n});
    chk("add", [&] { return add(a, b); }, {a, b});
    chk("sub", [&] { return sub(a, b); }, {a, b});
    chk("mul", [&] { return mul(a, b); }, {a, b});
    chk("add_row", [&] { return add_row(a, row); }, {a, row});
    chk("mul_row", [&] { return mul_row(a, row); }, {a, row});
    chk("scale", [&] { return scale(a, 1.7); }, {a});
    chk("neg", [&] { return neg(a); }, {a});
    chk("exp", [&] { return exp(a); }, {a});
    chk("silu", [&] { return silu(a); }, {a});
    chk("softplus", [&] { return softplus(a); }, {a});
    chk("transpose", [&] { return transpose(a); }, {a});
    chk("reshape", [&] { return reshape(a, 2, 6); }, {a});
    chk("slice_cols", [&] { return slice_cols(a, 1, 2); }, {a});
    chk("cumsum", [&] { return cumsum(a, 2); }, {a});
    record("sum", grad_check([&] { return sum(mul(a, a)); }, {a}));
    record("mean", grad_check([&] { return mean(exp(a)); }, {a}));

    auto x = T::parameter(randn(rng, 6, 5));
    auto g = T::parameter(randu(rng, 1, 5, 0.5, 1.5));
    auto bias = T::parameter(randn(rng, 1, 5));
    auto table = T::parameter(randn(rng, 7, 4));
    const std::vector<int> ids = {0, 3, 3, 6, 1, 2};
    const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1};
    const std::vector<Index> rows = {5, 0, 2, 2};
    chk("layer_norm", [&] { return layer_norm(x, g, bias); }, {x, g, bias});
    chk("embedding", [&] { return embedding(table, std::span<const int>(ids)); }, {table});
    chk("mean_pool", [&] { return mean_pool(x, 3, std::span<const std::uint8_t>(mask)); }, {x});
    chk("gather_rows", [&] { return gather_rows(x, std::span<const Index>(rows)); }, {x});
    const std::vector<int> targets = {0, 3, 2, 1, 4, 1};
    record("softmax_cross_entropy",
           grad_check([&] { return softmax_cross_entropy(x, std::span<const int>(targets), std::span<const std::uint8_t>(mask)); },
                      {x}));

    const Index L = 5;
    auto cx = T::parameter(randn(rng, 2 * L, 3));
    auto ck = T::parameter(randn(rng, 4, 3));
    auto cb = T::parameter(randn(rng, 1, 3));
    chk("conv1d_causal", [&] { return conv1d_causal(cx, ck, cb, L); }, {cx, ck, cb});

    const Index SL = 6, heads = 2, p = 2, s = 3;
    auto sx = T::parameter(randn(rng, 2 * SL, heads * p));
    auto sdt = T::parameter(randu(rng, 2 * SL, heads, 0.05, 0.6));
    auto sA = T::parameter(-randu(rng, 1, heads, 0.3, 2.0));
    auto sB = T::parameter(randn(rng, 2 * SL, heads * s, 0.5));
    auto sC = T::parameter(randn(rng, 2 * SL, heads * s, 0.5));
    auto sD = T::parameter(randn(rng, 1, heads));
    chk("ssd_scan", [&] { return ssd_scan(sx, sdt, sA, sB, sC, sD, SL, heads, 4); }, {sx, sdt, sA, sB, sC, sD});

    const Index c = 3;
    auto qx = T::parameter(randn(rng, 2 * L, c));
    auto qdt = T::parameter(randu(rng, 2 * L, c, 0.05, 0.6));
    auto qA = T::parameter(-randu(rng, c, 2, 0.3, 2.0));
    auto qB = T::parameter(randn(rng, 2 * L, 2, 0.5));
    auto qC = T::parameter(randn(rng, 2 * L, 2, 0.5));
    auto qD = T::parameter(randn(rng, 1, c));
    chk("selective_scan", [&] { return selective_scan(qx, qdt, qA, qB, qC, qD, L); }, {qx, qdt, qA, qB, qC, qD});
  }
  for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2}) {
    auto cfg = tiny(mixer, 8);
    cfg.n_layers = 1;
    cfg.d_model = 4;
    cfg.head_dim = 4;
    cfg.state_dim = 2;
    cfg.mlp_ratio = 2;
    cfg.chunk_len = 3;
    Backbone<double> m(cfg, 9);
    perturb(m, 10, 0.5);
    Rng rng(11);
    const auto batch = random_batch(rng, 2, 5, 8);
    std::vector<int> targets;
    for (std::size_t i = 0; i < batch.ids.size(); ++i) targets.push_back(static_cast<int>(rng.below(8)));
    const std::vector<std::uint8_t> mask(batch.ids.size(), 1);
    std::vector<T> params;
    for (auto& p : m.parameters()) params.push_back(p.tensor);
    record(std::string(to_string(mixer)) + " layer",
           grad_check(
               [&] {
                 return softmax_cross_entropy(m.lm_logits(m.forward_hidden(batch)), std::span<const int>(targets),
                                              std::span<const std::uint8_t>(mask));
               },
               params));
  }
  return {worst < 1e-4, std::to_string(checked) + " checks over 26 ops and 2 full layers, max rel err " +
                            fmt("%.3g", worst) + " (" + worst_op + ")"};
}

// 3 ------------------------------------------------------------------------
Outcome causality() {
  int cases = 0;
  bool ok = true;
  for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2})
    for (const auto& tok : {Tokenizer::character(), Tokenizer::kmer(6)}) {
      auto cfg = tiny(mixer, static_cast<Index>(tok.vocab_size()));
      Backbone<double> m(cfg, 3);
      perturb(m, 4, 0.2);
      Rng rng(5);
      std::string seq;
      for (int i = 0; i < 16 * tok.k(); ++i) seq += "ACGT"[rng.below(4)];
      const auto batch = make_batch(tok.encode(seq));
      const Index L = batch.seq_len;
      const auto base = m.lm_logits(m.forward_hidden(batch)).value();
      for (Index t = 0; t < L; ++t) {
        auto changed = batch;
        auto& id = changed.ids[static_cast<std::size_t>(t)];
        id = 3 + (id - 3 + 1) % static_cast<int>(tok.vocab_size() - 3);
        const auto out = m.lm_logits(m.forward_hidden(changed)).value();
        ok &= out.topRows(t) == base.topRows(t);
        ok &= out.row(t) != base.row(t);
        ++cases;
      }
    }
  return {ok, std::to_string(cases) + " perturbations over {mamba1, mamba2} x {char, kmer6}"};
}

// 4 ------------------------------------------------------------------------
Outcome tokenizer_laws() {
  Rng rng(7);
  std::string seq;
  for (int i = 0; i < 660; ++i) seq += "ACGT"[rng.below(4)];
  const auto ch = Tokenizer::character();
  const auto k6 = Tokenizer::kmer(6);
  bool ok = ch.encode(seq).size() == 660 && k6.encode(seq).size() == 110;
  int trips = 0;
  for (const auto& tok : {ch, Tokenizer::kmer(4), Tokenizer::kmer(5), k6}) {
    for (int rep = 0; rep < 20; ++rep) {
      std::string s;
      const auto len = static_cast<std::size_t>(tok.k()) * (1 + rng.below(120));
      for (std::size_t i = 0; i < len; ++i) s += "ACGT"[rng.below(4)];
      ok &= tok.decode(tok.encode(s)) == s;
      ++trips;
    }
    if (tok.kind() == TokenizerKind::kmer)
      ok &= tok.vocab_size() == (std::size_t(1) << (2 * tok.k())) + tok.specials().size();
  }
  ok &= ch.vocab_size() == 5 + ch.specials().size();
  return {ok, "660 -> 660 char / 110 kmer6 tokens, " + std::to_string(trips) +
                  " round trips, vocab 4^k+3 for k=4,5,6: " + std::to_string(Tokenizer::kmer(4).vocab_size()) + "/" +
                  std::to_string(Tokenizer::kmer(5).vocab_size()) + "/" + std::to_string(k6.vocab_size())};
}

// 5 ------------------------------------------------------------------------
Outcome calibration() {
  SynthSpec sp;
  sp.genera = 2;
  sp.species_per_genus = 2;
  sp.per_species = 4;
  sp.length = 120;
  const auto records = synthesize(sp);
  double worst_uniform = 0, worst_exp = 0;
  for (const auto& tok : {Tokenizer::character(), Tokenizer::kmer(4), Tokenizer::kmer(6)}) {
    auto cfg = tiny(MixerKind::mamba2, static_cast<Index>(tok.vocab_size()));
    const auto zero = Backbone<double>::zeros(cfg);
    worst_uniform = std::max(worst_uniform, std::abs(perplexity(zero, tok, records) - static_cast<double>(tok.vocab_size())));
    for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2}) {
      cfg.mixer = mixer;
      Backbone<double> m(cfg, 8);
      perturb(m, 9, 0.3);
      std::vector<std::size_t> idx(records.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      const double loss = ntp_loss(m, encode_batch(tok, records, idx)).item();
      worst_exp = std::max(worst_exp, std::abs(perplexity(m, tok, records) - std::exp(loss)));
    }
  }
  return {worst_uniform < 1e-6 && worst_exp < 1e-9,
          "|ppl - V| = " + fmt("%.3g", worst_uniform) + ", |ppl - exp(loss)| = " + fmt("%.3g", worst_exp)};
}

// 6 ------------------------------------------------------------------------
Outcome end_to_end() {
  auto cfg = ExperimentConfig::load(fs::path(BM_SOURCE_DIR) / "configs" / "tiny.conf");
  cfg.out = scratch("e2e");
  cfg.precision = Precision::f32;
  const bool spec_ok = cfg.synth.genera == 8 && cfg.synth.species_per_genus == 4 && cfg.synth.per_species == 30 &&
                       cfg.synth.noise == 0.02 && cfg.model.n_layers == 2 && cfg.model.d_model == 32 &&
                       cfg.model.head_dim == 16 && cfg.model.mixer == MixerKind::mamba2 &&
                       cfg.pretrain.objective == Objective::ntp && cfg.tokenizer_kind == "char";
  const auto m = run_pipeline(cfg);
  const auto bundle = load_bundle(cfg.out / "data");
  std::set<std::string> unseen_species, unseen_genera;
  for (const auto& r : bundle.unseen) {
    unseen_species.insert(*r.species);
    unseen_genera.insert(*r.genus);
  }
  const double chance = 1.0 / static_cast<double>(unseen_genera.size());
  const double drop = 1.0 - m.perplexity / m.initial_perplexity;
  const bool a = drop >= 0.30, b = m.finetune_acc >= 0.90, c = m.knn_acc >= 3.0 * chance;
  return {spec_ok && unseen_species.size() == 8 && a && b && c,
          "(a) held-out ppl " + fmt("%.4g", m.initial_perplexity) + " -> " + fmt("%.4g", m.perplexity) + " (" +
              fmt("%.1f", 100 * drop) + "% drop), (b) finetune acc " + fmt("%.4f", m.finetune_acc) +
              ", (c) 1-NN genus acc " + fmt("%.4f", m.knn_acc) + " on " + std::to_string(unseen_species.size()) +
              " unseen species (chance " + fmt("%.3f", chance) + ")"};
}

// 7 ------------------------------------------------------------------------
Outcome ablation_sweep() {
  const char* env = std::getenv("BM_SWEEP_CONFIG");
  const fs::path conf = env ? fs::path(env) : fs::path(BM_SOURCE_DIR) / "configs" / "sweep_smoke.conf";
  auto base = ExperimentConfig::load(conf);
  const auto dir = scratch("ablation");
  const auto res = run_sweep(dir, SweepKind::ablation, base);
  const auto csv = slurp(dir / "results.csv");
  std::istringstream in(csv);
  std::string header, line;
  std::getline(in, header);
  std::size_t rows = 0;
  while (std::getline(in, line)) rows += !line.empty();
  bool ok = res.complete && rows == 16 && res.rows.size() == 16 &&
            header.rfind("tokenizer,k,objective,mixer,finetune_acc,linear_probe_acc,knn_acc,perplexity", 0) == 0;
  std::string k6, chr;
  double k6_knn = 0, char_lp = 0;
  int n = 0;
  for (const auto& r : res.rows) {
    ok &= r.status == "ok";
    if (r.tokenizer == "kmer" && r.k == 6) {
      ok &= std::isfinite(r.knn_acc);
      k6 += (k6.empty() ? "" : " ") + fmt("%.3f", r.knn_acc);
      k6_knn += r.knn_acc;
      ++n;
    }
    if (r.tokenizer == "char") {
      ok &= std::isfinite(r.linear_probe_acc);
      chr += (chr.empty() ? "" : " ") + fmt("%.3f", r.linear_probe_acc);
      char_lp += r.linear_probe_acc;
    }
  }
  const char* order = k6_knn > char_lp ? "k6 1-NN above char LP" : "k6 1-NN not above char LP";
  return {ok, std::to_string(rows) + " rows; k=6 1-NN [" + k6 + "], char LP [" + chr + "]; " + order +
                  " (informational), budget " + conf.filename().string()};
}

// 8 ------------------------------------------------------------------------
Outcome probe_grid() {
  SynthSpec sp;
  const auto bundle = build_splits(synthesize(sp), SplitSpec{});
  const auto tok = Tokenizer::character();
  auto cfg = default_model();
  cfg.vocab_size = static_cast<Index>(tok.vocab_size());
  Backbone<float> model(cfg, 21);
  const auto hash = model.parameter_hash();
  const auto train = extract_embeddings(model, tok, bundle.ft_train);
  const auto test = extract_embeddings(model, tok, bundle.ft_test);
  const ProbeGrid grid;
  const auto res = linear_probe(train, test, grid);
  std::set<std::tuple<double, double, double>> seen;
  for (const auto& c : res.cells) seen.emplace(c.lr, c.momentum, c.weight_decay);
  std::set<std::tuple<double, double, double>> expect;
  for (double lr : {0.01, 0.1, 0.5})
    for (double mom : {0.2, 0.4, 0.6, 0.8})
      for (double wd : {1e-8, 1e-9, 1e-11}) expect.emplace(lr, mom, wd);
  const bool ok = res.cells.size() == 36 && seen == expect && model.parameter_hash() == hash;
  return {ok, std::to_string(res.cells.size()) + " cells, best " + fmt("lr %g", res.best_cell().lr) +
                  fmt(" mom %g", res.best_cell().momentum) + fmt(" wd %g", res.best_cell().weight_decay) +
                  fmt(", test acc %.3f", res.test_accuracy()) + ", backbone hash unchanged"};
}

// 9 ------------------------------------------------------------------------
Outcome knn_oracle() {
  Rng rng(31);
  const Index d = 24;
  EmbeddingSet train, test;
  train.vectors = randn(rng, 500, d);
  test.vectors = randn(rng, 500, d);
  // exact duplicates exercise the lowest-index tie rule
  for (Index i = 0; i < 20; ++i) train.vectors.row(250 + i) = train.vectors.row(i);
  for (Index i = 0; i < 20; ++i) test.vectors.row(i) = train.vectors.row(3 * i);
  for (Index i = 0; i < 500; ++i) {
    train.genus.push_back("g" + std::to_string(rng.below(10)));
    train.species.push_back("s");
    test.genus.push_back("g" + std::to_string(rng.below(10)));
    test.species.push_back("s");
  }
  int mismatches = 0;
  for (auto metric : {Metric::cosine, Metric::euclidean}) {
    const auto res = knn_probe(train, test, 1, metric);
    for (Index q = 0; q < 500; ++q) {
      Index best = -1;
      long double best_score = 0;
      for (Index i = 0; i < 500; ++i) {
        long double dot = 0, na = 0, nb = 0, dist = 0;
        for (Index j = 0; j < d; ++j) {
          const long double a = test.vectors(q, j), b = train.vectors(i, j);
          dot += a * b;
          na += a * a;
          nb += b * b;
          dist += (a - b) * (a - b);
        }
        const long double score = metric == Metric::cosine ? dot / std::sqrt(na * nb) : -dist;
        if (best < 0 || score > best_score) {
          best = i;
          best_score = score;
        }
      }
      mismatches += res.neighbors[static_cast<std::size_t>(q)] != best;
      mismatches += res.predictions[static_cast<std::size_t>(q)] != train.genus[static_cast<std::size_t>(best)];
    }
  }
  return {mismatches == 0, "500 x 500 queries, cosine and euclidean, " + std::to_string(mismatches) + " mismatches"};
}

// 10 -----------------------------------------------------------------------
Outcome determinism() {
  auto run = [](const std::string& name) {
    ExperimentConfig c;
    c.out = scratch(name);
    c.precision = Precision::f64;
    c.synth.genera = 4;
    c.synth.species_per_genus = 3;
    c.synth.per_species = 8;
    c.target_len = 120;
    c.model.d_model = 16;
    c.model.head_dim = 8;
    c.model.state_dim = 8;
    c.pretrain.max_epochs = 2;
    c.finetune.max_epochs = 2;
    c.probe.epochs = 10;
    run_pipeline(c);
    return slurp(c.out / "metrics.csv");
  };
  const auto a = run("det_a"), b = run("det_b");
  bool ok = !a.empty() && a == b;

  int exact = 0;
  for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2}) {
    const auto tok = Tokenizer::kmer(4);
    auto cfg = tiny(mixer, static_cast<Index>(tok.vocab_size()));
    Backbone<double> m(cfg, 41);
    perturb(m, 42, 0.3);
    Rng rng(43);
    m.attach_head(5, rng);
    const auto path = scratch("ckpt") / "m.ckpt";
    save_checkpoint(path, m, tok, TrainingState<double>{}, nlohmann::json::object());
    const auto back = load_checkpoint<double>(path);
    const auto batch = random_batch(rng, 3, 9, static_cast<Index>(tok.vocab_size()));
    const bool same = back.model.lm_logits(back.model.forward_hidden(batch)).value() ==
                          m.lm_logits(m.forward_hidden(batch)).value() &&
                      back.model.classify(batch).value() == m.classify(batch).value();
    exact += same;
  }
  ok &= exact == 2;
  return {ok, std::string("metrics.csv ") + (a == b ? "byte-identical" : "DIFFERS") + " across f64 reruns (" +
                  std::to_string(a.size()) + " bytes); checkpoint logits bit-exact for " + std::to_string(exact) +
                  "/2 mixers"};
}

// 11 -----------------------------------------------------------------------
Outcome scheduler() {
  const TrainConfig cfg;
  const std::int64_t total = 10000;
  const double w = cfg.warmup_frac * static_cast<double>(total);
  const double at_w = lr_at(cfg, static_cast<std::int64_t>(w), total);
  const double at_end = lr_at(cfg, total, total);
  const double left = schedule::warmup_branch(cfg, w, static_cast<double>(total));
  const double right = schedule::cosine_branch(cfg, w, static_cast<double>(total));
  const double jump = std::abs(left - right) / right;
  const bool ok = std::abs(at_w - 6e-4) <= 1e-12 * 6e-4 && std::abs(at_end - 6e-5) <= 1e-12 * 6e-5 && jump < 1e-12;
  return {ok, "lr(warmup end) = " + fmt("%.12g", at_w) + ", lr(final) = " + fmt("%.12g", at_end) +
                  ", junction rel gap " + fmt("%.3g", jump)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "SSD three-form equivalence", 30, ssd_equivalence},
      {2, "gradient correctness", 120, gradients},
      {3, "causality", 30, causality},
      {4, "tokenizer laws", 5, tokenizer_laws},
      {5, "uniform-model calibration", 10, calibration},
      {6, "end-to-end synthetic pipeline", 900, end_to_end},
      {7, "ablation sweep schema", 7200, ablation_sweep},
      {8, "probe grid fidelity", 300, probe_grid},
      {9, "1-NN oracle equivalence", 10, knn_oracle},
      {10, "determinism and persistence", 120, determinism},
      {11, "scheduler contract", 1, scheduler},
  };
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!pick.empty() && !pick.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs < c.budget_seconds;
    const bool pass = o.pass && in_budget;
    failed += !pass;
    std::printf("%s %2d %s: %s [%.1f s, budget %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_seconds, in_budget ? "" : ", OVER BUDGET");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
