#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "barcodemamba/training.hpp"

namespace bm {

// Pooled per-record embeddings with their labels.
struct EmbeddingSet {
  Matrix<double> vectors;  // count x d
  std::vector<std::string> species;
  std::vector<std::string> genus;
  std::string source;  // checkpoint identifier

  Index size() const { return vectors.rows(); }
  void validate() const;
};

// vectors.bin holds the matrix as a parameter container; labels.json holds
// labels and source.
void save_embeddings(const std::filesystem::path& dir, const EmbeddingSet& set);
EmbeddingSet load_embeddings(const std::filesystem::path& dir);

template <typename S>
EmbeddingSet extract_embeddings(const Backbone<S>& model, const Tokenizer& tok,
                                const std::vector<BarcodeRecord>& records,
                                Pooling pooling = Pooling::mean, const std::string& source = "",
                                int batch_size = 32) {
  check_vocab_agreement(model.config(), tok);
  NoGradGuard ng;
  EmbeddingSet out;
  out.source = source;
  out.vectors.resize(static_cast<Index>(records.size()), model.config().d_model);
  for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(records.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      idx.push_back(j);
    const auto pooled = model.embed_sequence(encode_batch(tok, records, idx), pooling).value();
    out.vectors.middleRows(static_cast<Index>(i), pooled.rows()) = pooled.template cast<double>();
  }
  for (const auto& r : records) {
    out.species.push_back(r.species.value_or(""));
    out.genus.push_back(r.genus.value_or(""));
  }
  out.validate();
  return out;
}

// exp of the mean next-token negative log-likelihood over every predicted
// position of the record set.
template <typename S>
double perplexity(const Backbone<S>& model, const Tokenizer& tok,
                  const std::vector<BarcodeRecord>& records) {
  if (records.empty()) throw DataError("perplexity of an empty record set");
  check_vocab_agreement(model.config(), tok);
  const auto [total, count] = ntp_nll_sum(model, tok, records);
  return std::exp(total / static_cast<double>(count));
}

struct ProbeGrid {
  std::vector<double> learning_rates = {0.01, 0.1, 0.5};
  std::vector<double> momenta = {0.2, 0.4, 0.6, 0.8};
  std::vector<double> weight_decays = {1e-8, 1e-9, 1e-11};
  int epochs = 50;
  int batch_size = 32;
  double val_fraction = 0.10;
  std::uint64_t seed = 0;

  std::size_t size() const {
    return learning_rates.size() * momenta.size() * weight_decays.size();
  }
  void validate() const;
  nlohmann::json to_json() const;
};

struct ProbeCell {
  double lr = 0, momentum = 0, weight_decay = 0;
  double val_accuracy = 0;
  double test_accuracy = 0;
};

struct LinearProbeResult {
  std::vector<ProbeCell> cells;  // grid order: lr, then momentum, then weight decay
  std::size_t best = 0;
  std::vector<std::string> labels;

  const ProbeCell& best_cell() const { return cells.at(best); }
  double test_accuracy() const { return best_cell().test_accuracy; }
  std::string cells_csv() const;
  nlohmann::json summary() const;
};

enum class ProbeLabel { species, genus };

// Trains one softmax layer per grid cell with momentum SGD on standardized
// embeddings, selects the cell by accuracy on a held-out share of `train`,
// and reports every cell's test accuracy.
LinearProbeResult linear_probe(const EmbeddingSet& train, const EmbeddingSet& test,
                               const ProbeGrid& grid = {}, ProbeLabel label = ProbeLabel::species,
                               int threads = 1);

// One cell of the grid, fitted on `fit` and scored on `eval`; features are
// expected to be standardized already.
struct LinearModel {
  Matrix<double> W;  // d x K
  RowVector<double> b;
  std::vector<int> predict(const Matrix<double>& x) const;
};
LinearModel fit_linear(const Matrix<double>& x, const std::vector<int>& y, int num_classes,
                       double lr, double momentum, double weight_decay, int epochs,
                       int batch_size, std::uint64_t seed);

enum class Metric { cosine, euclidean };

std::string_view to_string(Metric m);
Metric parse_metric(std::string_view name);

struct KnnResult {
  std::vector<std::string> predictions;
  std::vector<Index> neighbors;  // nearest train row per query
  double accuracy = 0;
};

// Genus-level k-NN: each query takes the majority genus among its k nearest
// train vectors (k = 1: the nearest one). Ties in distance go to the lower
// train index; ties in the vote go to the label whose best neighbor is
// nearest.
KnnResult knn_probe(const EmbeddingSet& train, const EmbeddingSet& test, int k = 1,
                    Metric metric = Metric::cosine);

// Canonical per-pair score used for final neighbor decisions: cosine
// similarity or negated squared euclidean distance (larger is nearer).
double knn_score(const double* a, const double* b, Index d, Metric metric);

}  // namespace bm
