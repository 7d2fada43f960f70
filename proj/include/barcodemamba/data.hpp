#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "barcodemamba/common.hpp"

namespace bm {

inline constexpr std::size_t kDefaultTargetLength = 660;

struct BarcodeRecord {
  std::string record_id;
  std::string sequence;  // over {A,C,G,T,N}
  std::optional<std::string> species;
  std::optional<std::string> genus;

  bool labeled() const { return species.has_value() && genus.has_value(); }
  bool operator==(const BarcodeRecord&) const = default;
};

enum class TableFormat { tsv, csv, fasta };

TableFormat parse_table_format(std::string_view name);
std::string_view to_string(TableFormat f);

struct ColumnNames {
  std::string id = "processid";
  std::string sequence = "nucleotides";
  std::string species = "species";
  std::string genus = "genus";
};

// Uppercase, and map everything outside {A,C,G,T} to N.
std::string normalize_sequence(std::string_view raw);

// Right-truncate or right-pad with N to exactly target_len.
std::string fix_length(std::string_view seq, std::size_t target_len = kDefaultTargetLength);

std::string reverse_complement(std::string_view seq);

std::vector<BarcodeRecord> load_records(const std::filesystem::path& path, TableFormat format,
                                        std::size_t target_len = kDefaultTargetLength,
                                        const ColumnNames& columns = {});

void write_records(const std::filesystem::path& path, const std::vector<BarcodeRecord>& records,
                   TableFormat format = TableFormat::tsv, const ColumnNames& columns = {});

struct SplitSpec {
  double pretrain_train_frac = 0.95;
  double ft_train_frac = 0.70;
  double ft_test_frac = 0.20;
  double ft_val_frac = 0.10;
  // Species withheld per genus for the unseen partition. Only genera with at
  // least two species contribute, so the genus stays represented in ft_train.
  int unseen_species_per_genus = 1;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SplitSpec from_json(const nlohmann::json& j);
};

struct DatasetBundle {
  std::vector<BarcodeRecord> pretrain_train;
  std::vector<BarcodeRecord> pretrain_val;
  std::vector<BarcodeRecord> ft_train;
  std::vector<BarcodeRecord> ft_test;
  std::vector<BarcodeRecord> ft_val;
  std::vector<BarcodeRecord> unseen;

  bool operator==(const DatasetBundle&) const = default;
};

// Partition names in persistence order.
inline constexpr std::string_view kPartitionNames[] = {"pretrain_train", "pretrain_val", "ft_train",
                                                       "ft_test",        "ft_val",       "unseen"};

const std::vector<BarcodeRecord>& partition(const DatasetBundle& b, std::string_view name);
std::vector<BarcodeRecord>& partition(DatasetBundle& b, std::string_view name);

DatasetBundle build_splits(const std::vector<BarcodeRecord>& records, const SplitSpec& spec);

// Writes one TSV per partition plus manifest.json. Returns the manifest.
nlohmann::json save_bundle(const std::filesystem::path& dir, const DatasetBundle& bundle,
                           const SplitSpec& spec, std::size_t target_len);
DatasetBundle load_bundle(const std::filesystem::path& dir);

// Hash over the canonical serialization of a bundle's contents.
std::uint64_t bundle_hash(const DatasetBundle& bundle);

}  // namespace bm
