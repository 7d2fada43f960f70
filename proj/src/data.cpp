#include "barcodemamba/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace bm {

namespace fs = std::filesystem;

TableFormat parse_table_format(std::string_view name) {
  if (name == "tsv") return TableFormat::tsv;
  if (name == "csv") return TableFormat::csv;
  if (name == "fasta" || name == "fa") return TableFormat::fasta;
  throw ConfigError("unknown table format: " + std::string(name));
}

std::string_view to_string(TableFormat f) {
  switch (f) {
    case TableFormat::tsv:
      return "tsv";
    case TableFormat::csv:
      return "csv";
    case TableFormat::fasta:
      return "fasta";
  }
  return "?";
}

std::string normalize_sequence(std::string_view raw) {
  std::string out(raw.size(), 'N');
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(raw[i])));
    if (c == 'A' || c == 'C' || c == 'G' || c == 'T') out[i] = c;
  }
  return out;
}

std::string fix_length(std::string_view seq, std::size_t target_len) {
  if (target_len == 0) throw ConfigError("fix_length: target_len must be positive");
  std::string out(seq.substr(0, target_len));
  out.resize(target_len, 'N');
  return out;
}

std::string reverse_complement(std::string_view seq) {
  std::string out(seq.rbegin(), seq.rend());
  for (char& c : out) {
    switch (c) {
      case 'A':
        c = 'T';
        break;
      case 'T':
        c = 'A';
        break;
      case 'C':
        c = 'G';
        break;
      case 'G':
        c = 'C';
        break;
      default:
        c = 'N';
    }
  }
  return out;
}

namespace {

std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (sep == ',' && c == '"') {
      if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else {
        quoted = !quoted;
      }
    } else if (c == sep && !quoted) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
  return s.substr(b);
}

std::optional<std::string> label_or_none(std::string s) {
  s = trim(std::move(s));
  if (s.empty() || s == "NA" || s == "None" || s == "nan") return std::nullopt;
  return s;
}

std::vector<BarcodeRecord> load_tabular(std::ifstream& in, char sep, std::size_t target_len,
                                        const ColumnNames& cols, const fs::path& path) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty dataset: " + path.string());
  const auto header = split_line(trim(line), sep);
  auto find = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == name) return i;
    return std::nullopt;
  };
  const auto id_col = find(cols.id);
  const auto seq_col = find(cols.sequence);
  if (!id_col) throw DataError("missing required column '" + cols.id + "' in " + path.string());
  if (!seq_col)
    throw DataError("missing required column '" + cols.sequence + "' in " + path.string());
  const auto sp_col = find(cols.species);
  const auto ge_col = find(cols.genus);

  std::vector<BarcodeRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto f = split_line(line, sep);
    const std::size_t need = std::max(*id_col, *seq_col) + 1;
    if (f.size() < need)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": too few fields");
    BarcodeRecord r;
    r.record_id = trim(f[*id_col]);
    r.sequence = fix_length(normalize_sequence(trim(f[*seq_col])), target_len);
    if (sp_col && *sp_col < f.size()) r.species = label_or_none(f[*sp_col]);
    if (ge_col && *ge_col < f.size()) r.genus = label_or_none(f[*ge_col]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<BarcodeRecord> load_fasta(std::ifstream& in, std::size_t target_len) {
  std::vector<BarcodeRecord> out;
  std::string line, raw;
  std::optional<BarcodeRecord> cur;
  auto flush = [&] {
    if (!cur) return;
    cur->sequence = fix_length(normalize_sequence(raw), target_len);
    out.push_back(std::move(*cur));
    cur.reset();
    raw.clear();
  };
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    if (line[0] == '>') {
      flush();
      auto parts = split_line(line.substr(1), '|');
      BarcodeRecord r;
      r.record_id = trim(parts[0]);
      if (parts.size() > 1) r.species = label_or_none(parts[1]);
      if (parts.size() > 2) r.genus = label_or_none(parts[2]);
      cur = std::move(r);
    } else if (cur) {
      raw += line;
    }
  }
  flush();
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

}  // namespace

std::vector<BarcodeRecord> load_records(const fs::path& path, TableFormat format,
                                        std::size_t target_len, const ColumnNames& columns) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<BarcodeRecord> out;
  switch (format) {
    case TableFormat::tsv:
      out = load_tabular(in, '\t', target_len, columns, path);
      break;
    case TableFormat::csv:
      out = load_tabular(in, ',', target_len, columns, path);
      break;
    case TableFormat::fasta:
      out = load_fasta(in, target_len);
      break;
  }
  if (out.empty()) throw DataError("empty dataset: " + path.string());
  return out;
}

void write_records(const fs::path& path, const std::vector<BarcodeRecord>& records,
                   TableFormat format, const ColumnNames& cols) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  if (format == TableFormat::fasta) {
    for (const auto& r : records) {
      out << '>' << r.record_id << '|' << r.species.value_or("") << '|' << r.genus.value_or("")
          << '\n'
          << r.sequence << '\n';
    }
    return;
  }
  const char sep = format == TableFormat::csv ? ',' : '\t';
  auto field = [&](const std::string& s) { return sep == ',' ? csv_field(s) : s; };
  out << field(cols.id) << sep << field(cols.sequence) << sep << field(cols.species) << sep
      << field(cols.genus) << '\n';
  for (const auto& r : records) {
    out << field(r.record_id) << sep << r.sequence << sep << field(r.species.value_or(""))
        << sep << field(r.genus.value_or("")) << '\n';
  }
}

void SplitSpec::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!(pretrain_train_frac > 0.0 && pretrain_train_frac < 1.0))
    throw ConfigError("pretrain_train_frac must lie in (0, 1)");
  if (!in_unit(ft_train_frac) || !in_unit(ft_test_frac) || !in_unit(ft_val_frac))
    throw ConfigError("fine-tune fractions must lie in [0, 1]");
  if (std::abs(ft_train_frac + ft_test_frac + ft_val_frac - 1.0) > 1e-9)
    throw ConfigError("fine-tune fractions must sum to 1");
  if (unseen_species_per_genus < 0) throw ConfigError("unseen_species_per_genus must be >= 0");
}

nlohmann::json SplitSpec::to_json() const {
  return {{"pretrain_train_frac", pretrain_train_frac},
          {"ft_train_frac", ft_train_frac},
          {"ft_test_frac", ft_test_frac},
          {"ft_val_frac", ft_val_frac},
          {"unseen_species_per_genus", unseen_species_per_genus},
          {"seed", seed},
          {"shuffle", Rng::kName}};
}

SplitSpec SplitSpec::from_json(const nlohmann::json& j) {
  SplitSpec s;
  s.pretrain_train_frac = j.at("pretrain_train_frac").get<double>();
  s.ft_train_frac = j.at("ft_train_frac").get<double>();
  s.ft_test_frac = j.at("ft_test_frac").get<double>();
  s.ft_val_frac = j.at("ft_val_frac").get<double>();
  s.unseen_species_per_genus = j.at("unseen_species_per_genus").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

const std::vector<BarcodeRecord>& partition(const DatasetBundle& b, std::string_view name) {
  return partition(const_cast<DatasetBundle&>(b), name);
}

std::vector<BarcodeRecord>& partition(DatasetBundle& b, std::string_view name) {
  if (name == "pretrain_train") return b.pretrain_train;
  if (name == "pretrain_val") return b.pretrain_val;
  if (name == "ft_train") return b.ft_train;
  if (name == "ft_test") return b.ft_test;
  if (name == "ft_val") return b.ft_val;
  if (name == "unseen") return b.unseen;
  throw std::invalid_argument("unknown partition " + std::string(name));
}

DatasetBundle build_splits(const std::vector<BarcodeRecord>& records, const SplitSpec& spec) {
  spec.validate();
  {
    std::set<std::string> ids;
    for (const auto& r : records)
      if (!ids.insert(r.record_id).second)
        throw DataError("duplicate record_id '" + r.record_id + "'");
  }
  Rng rng(spec.seed);
  DatasetBundle b;

  // Hold out whole species, only from genera that keep another species.
  std::map<std::string, std::set<std::string>> species_by_genus;
  for (const auto& r : records)
    if (r.labeled()) species_by_genus[*r.genus].insert(*r.species);
  std::set<std::string> held_out;
  if (spec.unseen_species_per_genus > 0) {
    if (species_by_genus.empty())
      throw DataError("unseen split requested but no record carries species and genus labels");
    for (const auto& [genus, species] : species_by_genus) {
      if (species.size() < 2) continue;
      std::vector<std::string> pool(species.begin(), species.end());
      rng.shuffle(pool);
      const auto take =
          std::min<std::size_t>(static_cast<std::size_t>(spec.unseen_species_per_genus),
                                pool.size() - 1);
      held_out.insert(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
    if (held_out.empty())
      throw DataError(
          "cannot build unseen split: every genus has a single species, so no species can be "
          "held out while keeping its genus represented");
  }

  std::vector<std::size_t> pretrain_pool, ft_pool;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.labeled() && held_out.count(*r.species)) {
      b.unseen.push_back(r);
      continue;
    }
    pretrain_pool.push_back(i);
    if (r.labeled()) ft_pool.push_back(i);
  }

  rng.shuffle(pretrain_pool);
  const auto n_pre = pretrain_pool.size();
  const auto n_pre_train =
      static_cast<std::size_t>(std::llround(spec.pretrain_train_frac * static_cast<double>(n_pre)));
  for (std::size_t i = 0; i < n_pre; ++i)
    (i < n_pre_train ? b.pretrain_train : b.pretrain_val).push_back(records[pretrain_pool[i]]);

  if (ft_pool.size() < 3)
    throw DataError("insufficient labeled data: need at least 3 labeled records outside unseen");
  rng.shuffle(ft_pool);
  // Every species keeps one record in ft_train, so test/val labels are known.
  std::vector<std::size_t> order;
  std::vector<std::size_t> rest;
  std::set<std::string> seen_species;
  for (auto i : ft_pool) {
    if (seen_species.insert(*records[i].species).second)
      order.push_back(i);
    else
      rest.push_back(i);
  }
  const auto n_species = order.size();
  order.insert(order.end(), rest.begin(), rest.end());
  const auto n = order.size();
  const auto n_train =
      static_cast<std::size_t>(std::llround(spec.ft_train_frac * static_cast<double>(n)));
  const auto n_test =
      static_cast<std::size_t>(std::llround(spec.ft_test_frac * static_cast<double>(n)));
  if (n_train < n_species)
    throw DataError("insufficient labeled data: ft_train cannot hold one record per species");
  if (n_train + n_test > n) throw DataError("insufficient labeled data for fine-tune partitions");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = records[order[i]];
    if (i < n_train)
      b.ft_train.push_back(r);
    else if (i < n_train + n_test)
      b.ft_test.push_back(r);
    else
      b.ft_val.push_back(r);
  }
  return b;
}

std::uint64_t bundle_hash(const DatasetBundle& bundle) {
  std::uint64_t h = fnv1a("bundle", 6);
  for (auto name : kPartitionNames) {
    h = fnv1a(name.data(), name.size(), h);
    for (const auto& r : partition(bundle, name)) {
      for (const std::string& s :
           {r.record_id, r.sequence, r.species.value_or("\x01"), r.genus.value_or("\x01")}) {
        h = fnv1a(s.data(), s.size(), h);
        h = fnv1a("\0", 1, h);
      }
    }
  }
  return h;
}

nlohmann::json save_bundle(const fs::path& dir, const DatasetBundle& bundle, const SplitSpec& spec,
                           std::size_t target_len) {
  fs::create_directories(dir);
  nlohmann::json counts = nlohmann::json::object();
  for (auto name : kPartitionNames) {
    const auto& part = partition(bundle, name);
    write_records(dir / (std::string(name) + ".tsv"), part);
    counts[std::string(name)] = part.size();
  }
  nlohmann::json manifest = {{"format_version", 1},
                             {"split", spec.to_json()},
                             {"seed", spec.seed},
                             {"target_len", target_len},
                             {"counts", counts},
                             {"content_hash", hex64(bundle_hash(bundle))}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  return manifest;
}

DatasetBundle load_bundle(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing bundle manifest " + manifest_path.string());
  const auto manifest = nlohmann::json::parse(in);
  const auto target_len = manifest.at("target_len").get<std::size_t>();
  DatasetBundle b;
  for (auto name : kPartitionNames) {
    const auto expected = manifest.at("counts").at(std::string(name)).get<std::size_t>();
    if (expected == 0) continue;
    partition(b, name) =
        load_records(dir / (std::string(name) + ".tsv"), TableFormat::tsv, target_len);
    if (partition(b, name).size() != expected)
      throw DataError("bundle partition " + std::string(name) + " does not match manifest count");
  }
  return b;
}

}  // namespace bm
