#include "barcodemamba/probes.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "barcodemamba/param_io.hpp"

namespace bm {

namespace fs = std::filesystem;

void EmbeddingSet::validate() const {
  if (static_cast<Index>(species.size()) != vectors.rows() ||
      static_cast<Index>(genus.size()) != vectors.rows())
    throw ShapeError("embedding set: label count differs from row count");
  if (!vectors.allFinite()) throw NumericalError("embedding set contains non-finite values");
}

void save_embeddings(const fs::path& dir, const EmbeddingSet& set) {
  set.validate();
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "vectors.bin", std::ios::binary);
    write_param_container(out, {{"vectors", DType::f64, set.vectors}});
  }
  nlohmann::json j = {{"source", set.source}, {"species", set.species}, {"genus", set.genus}};
  std::ofstream(dir / "labels.json") << j.dump() << '\n';
}

EmbeddingSet load_embeddings(const fs::path& dir) {
  std::ifstream in(dir / "vectors.bin", std::ios::binary);
  if (!in) throw DataError("missing embeddings in " + dir.string());
  auto tensors = read_param_container(in);
  if (tensors.size() != 1) throw DataError("malformed embedding file in " + dir.string());
  std::ifstream lj(dir / "labels.json");
  if (!lj) throw DataError("missing embedding labels in " + dir.string());
  const auto j = nlohmann::json::parse(lj);
  EmbeddingSet s;
  s.vectors = std::move(tensors.front().values);
  s.species = j.at("species").get<std::vector<std::string>>();
  s.genus = j.at("genus").get<std::vector<std::string>>();
  s.source = j.at("source").get<std::string>();
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Linear probe

void ProbeGrid::validate() const {
  if (learning_rates.empty() || momenta.empty() || weight_decays.empty())
    throw ConfigError("probe grid: every axis needs at least one value");
  if (epochs < 1 || batch_size < 1) throw ConfigError("probe grid: epochs and batch_size must be >= 1");
  if (!(val_fraction > 0 && val_fraction < 1))
    throw ConfigError("probe grid: val_fraction must lie in (0, 1)");
}

nlohmann::json ProbeGrid::to_json() const {
  return {{"learning_rates", learning_rates}, {"momenta", momenta},
          {"weight_decays", weight_decays},   {"epochs", epochs},
          {"batch_size", batch_size},         {"val_fraction", val_fraction},
          {"seed", seed}};
}

std::vector<int> LinearModel::predict(const Matrix<double>& x) const {
  const Matrix<double> logits = (x * W).rowwise() + b;
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

LinearModel fit_linear(const Matrix<double>& x, const std::vector<int>& y, int num_classes,
                       double lr, double momentum, double weight_decay, int epochs,
                       int batch_size, std::uint64_t seed) {
  const Index n = x.rows(), d = x.cols(), K = num_classes;
  LinearModel m{Matrix<double>::Zero(d, K), RowVector<double>::Zero(K)};
  Matrix<double> vW = Matrix<double>::Zero(d, K);
  RowVector<double> vb = RowVector<double>::Zero(K);
  bool first = true;
  Rng rng(seed);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  Matrix<double> xb, p;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (Index s0 = 0; s0 < n; s0 += batch_size) {
      const Index bs = std::min<Index>(batch_size, n - s0);
      xb.resize(bs, d);
      for (Index i = 0; i < bs; ++i) xb.row(i) = x.row(order[static_cast<std::size_t>(s0 + i)]);
      p = (xb * m.W).rowwise() + m.b;
      for (Index i = 0; i < bs; ++i) {
        const double mx = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
        p(i, y[static_cast<std::size_t>(order[static_cast<std::size_t>(s0 + i)])]) -= 1.0;
      }
      p /= static_cast<double>(bs);
      Matrix<double> gW = xb.transpose() * p;
      gW += weight_decay * m.W;
      const RowVector<double> gb = p.colwise().sum();
      if (first) {
        vW = gW;
        vb = gb;
        first = false;
      } else {
        vW = momentum * vW + gW;
        vb = momentum * vb + gb;
      }
      m.W -= lr * vW;
      m.b -= lr * vb;
    }
  }
  return m;
}

namespace {

std::vector<std::string> labels_of(const EmbeddingSet& s, ProbeLabel which) {
  return which == ProbeLabel::species ? s.species : s.genus;
}

}  // namespace

LinearProbeResult linear_probe(const EmbeddingSet& train, const EmbeddingSet& test,
                               const ProbeGrid& grid, ProbeLabel label, int threads) {
  grid.validate();
  train.validate();
  test.validate();
  if (train.vectors.cols() != test.vectors.cols())
    throw ShapeError("linear probe: train and test dimensions differ");
  const auto train_labels = labels_of(train, label);
  const auto test_labels = labels_of(test, label);
  const std::set<std::string> classes(train_labels.begin(), train_labels.end());
  if (classes.size() < 2) throw DataError("linear probe needs at least two training classes");
  LinearProbeResult res;
  res.labels.assign(classes.begin(), classes.end());
  auto index_of = [&](const std::string& l) {
    const auto it = std::lower_bound(res.labels.begin(), res.labels.end(), l);
    if (it == res.labels.end() || *it != l)
      throw DataError("linear probe: test label '" + l + "' is absent from training labels");
    return static_cast<int>(it - res.labels.begin());
  };

  // Hold out a validation share of the training embeddings.
  const Index n = train.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  Rng rng(grid.seed);
  rng.shuffle(order);
  Index n_val = static_cast<Index>(std::llround(grid.val_fraction * static_cast<double>(n)));
  n_val = std::clamp<Index>(n_val, 1, n - 1);
  const Index n_fit = n - n_val;
  Matrix<double> x_fit(n_fit, train.vectors.cols()), x_val(n_val, train.vectors.cols());
  std::vector<int> y_fit, y_val;
  for (Index i = 0; i < n; ++i) {
    const Index r = order[static_cast<std::size_t>(i)];
    const int y = index_of(train_labels[static_cast<std::size_t>(r)]);
    if (i < n_fit) {
      x_fit.row(i) = train.vectors.row(r);
      y_fit.push_back(y);
    } else {
      x_val.row(i - n_fit) = train.vectors.row(r);
      y_val.push_back(y);
    }
  }
  std::vector<int> y_test;
  for (const auto& l : test_labels) y_test.push_back(index_of(l));

  const RowVector<double> mu = x_fit.colwise().mean();
  RowVector<double> sd = ((x_fit.rowwise() - mu).array().square().colwise().sum() /
                          static_cast<double>(n_fit))
                             .sqrt()
                             .matrix();
  for (Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1.0;
  auto standardize = [&](const Matrix<double>& m) -> Matrix<double> {
    return ((m.rowwise() - mu).array().rowwise() / sd.array()).matrix();
  };
  const Matrix<double> zf = standardize(x_fit), zv = standardize(x_val),
                       zt = standardize(test.vectors);

  for (double lr : grid.learning_rates)
    for (double mom : grid.momenta)
      for (double wd : grid.weight_decays) res.cells.push_back({lr, mom, wd, 0, 0});

  const int K = static_cast<int>(res.labels.size());
  auto run_cell = [&](std::size_t c) {
    auto& cell = res.cells[c];
    const auto model = fit_linear(zf, y_fit, K, cell.lr, cell.momentum, cell.weight_decay,
                                  grid.epochs, grid.batch_size, grid.seed + 1);
    if (!model.W.allFinite() || !model.b.allFinite()) return;  // diverged: accuracies stay 0
    cell.val_accuracy = accuracy(model.predict(zv), y_val);
    cell.test_accuracy = y_test.empty() ? 0.0 : accuracy(model.predict(zt), y_test);
  };
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(res.cells.size())));
  if (workers == 1) {
    for (std::size_t c = 0; c < res.cells.size(); ++c) run_cell(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t c; (c = next++) < res.cells.size();) run_cell(c);
      });
    for (auto& t : pool) t.join();
  }
  for (std::size_t c = 1; c < res.cells.size(); ++c)
    if (res.cells[c].val_accuracy > res.cells[res.best].val_accuracy) res.best = c;
  return res;
}

std::string LinearProbeResult::cells_csv() const {
  std::ostringstream out;
  out << "cell,lr,momentum,weight_decay,val_accuracy,test_accuracy\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    out << i << ',' << fmt_g(c.lr) << ',' << fmt_g(c.momentum) << ',' << fmt_g(c.weight_decay)
        << ',' << fmt_g(c.val_accuracy) << ',' << fmt_g(c.test_accuracy) << '\n';
  }
  return out.str();
}

nlohmann::json LinearProbeResult::summary() const {
  const auto& c = best_cell();
  return {{"cells", cells.size()},
          {"best_cell", best},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"val_accuracy", c.val_accuracy},
          {"test_accuracy", c.test_accuracy},
          {"num_classes", labels.size()}};
}

// ---------------------------------------------------------------------------
// Nearest neighbours

std::string_view to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

Metric parse_metric(std::string_view name) {
  if (name == "cosine") return Metric::cosine;
  if (name == "euclidean") return Metric::euclidean;
  throw ConfigError("unknown metric: " + std::string(name));
}

double knn_score(const double* a, const double* b, Index d, Metric metric) {
  if (metric == Metric::euclidean) {
    double s = 0;
    for (Index j = 0; j < d; ++j) {
      const double t = a[j] - b[j];
      s += t * t;
    }
    return -s;
  }
  double ab = 0, aa = 0, bb = 0;
  for (Index j = 0; j < d; ++j) {
    ab += a[j] * b[j];
    aa += a[j] * a[j];
    bb += b[j] * b[j];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

KnnResult knn_probe(const EmbeddingSet& train, const EmbeddingSet& test, int k, Metric metric) {
  if (train.size() == 0) throw DataError("k-NN probe: empty training set");
  if (k < 1) throw ConfigError("k-NN probe: k must be >= 1");
  train.validate();
  test.validate();
  const Index d = train.vectors.cols();
  if (test.vectors.cols() != d) throw ShapeError("k-NN probe: dimension mismatch");
  {
    const std::set<std::string> genera(train.genus.begin(), train.genus.end());
    for (const auto& g : test.genus)
      if (!genera.count(g))
        throw DataError("k-NN probe: test genus '" + g + "' does not occur in the training set");
  }
  const Index n = train.size(), q = test.size();
  const Index kk = std::min<Index>(k, n);

  // Approximate scores for every pair in one product, then exact re-scoring
  // of everything that could be within rounding of the selection boundary.
  const Matrix<double>& T = train.vectors;
  const Matrix<double>& Q = test.vectors;
  const Eigen::VectorXd tn = T.rowwise().squaredNorm();
  const Eigen::VectorXd qn = Q.rowwise().squaredNorm();
  const double tmax = n > 0 ? tn.maxCoeff() : 0.0;
  Matrix<double> approx = Q * T.transpose();
  if (metric == Metric::cosine) {
    for (Index i = 0; i < q; ++i)
      for (Index j = 0; j < n; ++j) {
        const double den = std::sqrt(qn(i)) * std::sqrt(tn(j));
        approx(i, j) = den == 0 ? 0.0 : approx(i, j) / den;
      }
  } else {
    for (Index i = 0; i < q; ++i)
      for (Index j = 0; j < n; ++j) approx(i, j) = -(qn(i) + tn(j) - 2.0 * approx(i, j));
  }

  KnnResult res;
  res.predictions.resize(static_cast<std::size_t>(q));
  res.neighbors.resize(static_cast<std::size_t>(q));
  std::vector<double> row(static_cast<std::size_t>(n));
  for (Index i = 0; i < q; ++i) {
    for (Index j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] = approx(i, j);
    std::vector<double> sorted = row;
    std::nth_element(sorted.begin(), sorted.begin() + (kk - 1), sorted.end(), std::greater<>());
    const double boundary = sorted[static_cast<std::size_t>(kk - 1)];
    const double tol = metric == Metric::cosine ? 1e-9 : 1e-9 * (qn(i) + tmax) + 1e-300;
    std::vector<std::pair<double, Index>> cand;
    for (Index j = 0; j < n; ++j)
      if (row[static_cast<std::size_t>(j)] >= boundary - tol)
        cand.emplace_back(knn_score(Q.row(i).data(), T.row(j).data(), d, metric), j);
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    cand.resize(static_cast<std::size_t>(kk));
    res.neighbors[static_cast<std::size_t>(i)] = cand.front().second;
    if (kk == 1) {
      res.predictions[static_cast<std::size_t>(i)] =
          train.genus[static_cast<std::size_t>(cand.front().second)];
      continue;
    }
    // Majority vote; candidates are already ordered nearest first, so the
    // first label to reach the top count is the nearest among tied labels.
    std::map<std::string, int> votes;
    for (const auto& c : cand) ++votes[train.genus[static_cast<std::size_t>(c.second)]];
    int top = 0;
    for (const auto& [g, v] : votes) top = std::max(top, v);
    for (const auto& c : cand) {
      const auto& g = train.genus[static_cast<std::size_t>(c.second)];
      if (votes[g] == top) {
        res.predictions[static_cast<std::size_t>(i)] = g;
        break;
      }
    }
  }
  std::size_t hit = 0;
  for (Index i = 0; i < q; ++i)
    hit += res.predictions[static_cast<std::size_t>(i)] == test.genus[static_cast<std::size_t>(i)];
  res.accuracy = q == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(q);
  return res;
}

}  // namespace bm
