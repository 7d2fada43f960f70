#include "barcodemamba/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "barcodemamba/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bm {

std::string_view to_string(DataSource s) {
  switch (s) {
    case DataSource::synth: return "synth";
    case DataSource::file: return "file";
    case DataSource::bundle: return "bundle";
  }
  return "?";
}

DataSource parse_data_source(std::string_view name) {
  if (name == "synth") return DataSource::synth;
  if (name == "file") return DataSource::file;
  if (name == "bundle") return DataSource::bundle;
  throw ConfigError("unknown data source: " + std::string(name));
}

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision: " + std::string(name) + " (expected f32 or f64)");
}

std::string_view to_string(SweepKind k) { return k == SweepKind::ablation ? "ablation" : "scaling"; }

SweepKind parse_sweep_kind(std::string_view name) {
  if (name == "ablation") return SweepKind::ablation;
  if (name == "scaling") return SweepKind::scaling;
  throw ConfigError("unknown sweep kind: " + std::string(name));
}

BackboneConfig default_model() {
  BackboneConfig c;
  c.d_model = 32;
  c.n_layers = 2;
  c.head_dim = 16;
  c.state_dim = 16;
  c.vocab_size = 0;
  return c;
}

// ---- config ---------------------------------------------------------------

Tokenizer ExperimentConfig::tokenizer() const { return Tokenizer::build(tokenizer_kind, tokenizer_k); }

BackboneConfig ExperimentConfig::backbone() const {
  BackboneConfig c = model;
  c.vocab_size = static_cast<Index>(tokenizer().vocab_size());
  c.num_classes = 0;
  return c;
}

SynthSpec ExperimentConfig::synth_spec() const {
  SynthSpec s = synth;
  s.length = target_len;
  s.seed = seed;
  return s;
}

SplitSpec ExperimentConfig::split_spec() const {
  SplitSpec s = split;
  s.seed = seed;
  return s;
}

TrainConfig ExperimentConfig::pretrain_config() const {
  TrainConfig t = pretrain;
  t.seed = seed + 1;
  t.pooling = pooling;
  return t;
}

TrainConfig ExperimentConfig::finetune_config() const {
  TrainConfig t = finetune;
  t.objective = Objective::ntp;
  t.seed = seed + 2;
  t.pooling = pooling;
  return t;
}

ProbeGrid ExperimentConfig::probe_grid() const {
  ProbeGrid g = probe;
  g.seed = seed + 3;
  return g;
}

void ExperimentConfig::validate() const {
  if (run_id.empty()) throw ConfigError("run_id must not be empty");
  const auto tok = tokenizer();
  if (model.vocab_size != 0 && model.vocab_size != static_cast<Index>(tok.vocab_size()))
    throw ConfigError("model.vocab_size = " + std::to_string(model.vocab_size) +
                      " does not match the " + tok.name() + " tokenizer vocabulary (" +
                      std::to_string(tok.vocab_size()) + ")");
  backbone().validate();
  if (source == DataSource::synth)
    synth_spec().validate();
  else if (data_path.empty())
    throw ConfigError("data.path is required for data.source = " + std::string(to_string(source)));
  if (tok.encoded_length(target_len) < 2)
    throw ConfigError("data.target_len is too short for the tokenizer (needs at least 2 tokens)");
  split_spec().validate();
  pretrain_config().validate();
  finetune_config().validate();
  probe_grid().validate();
  if (probe_threads < 1) throw ConfigError("probe.threads must be >= 1");
  if (knn_k < 1) throw ConfigError("knn.k must be >= 1");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Shortest decimal form that parses back to the same double.
std::string fmt_exact(double v) {
  for (int p = 1; p <= 17; ++p) {
    const auto s = fmt_g(v, p);
    if (std::strtod(s.c_str(), nullptr) == v) return s;
  }
  return fmt_g(v, 17);
}

double parse_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  const double x = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(x))
    throw ConfigError("config key " + std::string(key) + ": not a number: '" + s + "'");
  return x;
}

template <typename I>
I parse_int(std::string_view key, std::string_view v) {
  I x{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key " + std::string(key) + ": not an integer: '" + std::string(v) + "'");
  return x;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("config key " + std::string(key) + ": expected true or false");
}

std::vector<double> parse_list(std::string_view key, std::string_view v) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    const auto comma = v.find(',', pos);
    const auto item = trim(v.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    out.push_back(parse_double(key, item));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_exact(v[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<std::string(ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <typename Ref>
Field real(std::string key, Ref ref) {
  return {key, [ref](ExperimentConfig& c) { return fmt_exact(ref(c)); },
          [ref, key](ExperimentConfig& c, std::string_view v) { ref(c) = parse_double(key, v); }};
}

template <typename Ref>
Field integer(std::string key, Ref ref) {
  using I = std::remove_reference_t<decltype(ref(std::declval<ExperimentConfig&>()))>;
  return {key, [ref](ExperimentConfig& c) { return std::to_string(ref(c)); },
          [ref, key](ExperimentConfig& c, std::string_view v) { ref(c) = parse_int<I>(key, v); }};
}

template <typename Ref>
Field text(std::string key, Ref ref) {
  return {key, [ref](ExperimentConfig& c) { return std::string(ref(c)); },
          [ref](ExperimentConfig& c, std::string_view v) { ref(c) = std::string(v); }};
}

template <typename Ref>
Field flag(std::string key, Ref ref) {
  return {key, [ref](ExperimentConfig& c) { return std::string(ref(c) ? "true" : "false"); },
          [ref, key](ExperimentConfig& c, std::string_view v) { ref(c) = parse_bool(key, v); }};
}

template <typename Ref, typename Parse>
Field named(std::string key, Ref ref, Parse parse) {
  return {key, [ref](ExperimentConfig& c) { return std::string(to_string(ref(c))); },
          [ref, parse](ExperimentConfig& c, std::string_view v) { ref(c) = parse(v); }};
}

void train_fields(std::vector<Field>& f, const std::string& prefix,
                  TrainConfig ExperimentConfig::*m) {
  auto at = [m](auto member) { return [m, member](ExperimentConfig& c) -> auto& { return (c.*m).*member; }; };
  f.push_back(real(prefix + "lr", at(&TrainConfig::lr)));
  f.push_back(real(prefix + "weight_decay", at(&TrainConfig::weight_decay)));
  f.push_back(real(prefix + "beta1", at(&TrainConfig::beta1)));
  f.push_back(real(prefix + "beta2", at(&TrainConfig::beta2)));
  f.push_back(real(prefix + "adam_eps", at(&TrainConfig::adam_eps)));
  f.push_back(real(prefix + "warmup_frac", at(&TrainConfig::warmup_frac)));
  f.push_back(real(prefix + "final_lr_frac", at(&TrainConfig::final_lr_frac)));
  f.push_back(integer(prefix + "max_epochs", at(&TrainConfig::max_epochs)));
  f.push_back(integer(prefix + "batch_size", at(&TrainConfig::batch_size)));
  f.push_back(integer(prefix + "patience", at(&TrainConfig::patience)));
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> f;
#define BM_REF(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }
    f.push_back(text("run_id", BM_REF(run_id)));
    f.push_back(integer("seed", BM_REF(seed)));
    f.push_back(named("precision", BM_REF(precision), parse_precision));
    f.push_back({"out", [](ExperimentConfig& c) { return c.out.string(); },
                 [](ExperimentConfig& c, std::string_view v) { c.out = std::string(v); }});
    f.push_back(named("data.source", BM_REF(source), parse_data_source));
    f.push_back({"data.path", [](ExperimentConfig& c) { return c.data_path.string(); },
                 [](ExperimentConfig& c, std::string_view v) { c.data_path = std::string(v); }});
    f.push_back(named("data.format", BM_REF(data_format), parse_table_format));
    f.push_back(integer("data.target_len", BM_REF(target_len)));
    f.push_back(text("data.column.id", BM_REF(columns.id)));
    f.push_back(text("data.column.sequence", BM_REF(columns.sequence)));
    f.push_back(text("data.column.species", BM_REF(columns.species)));
    f.push_back(text("data.column.genus", BM_REF(columns.genus)));
    f.push_back(integer("synth.genera", BM_REF(synth.genera)));
    f.push_back(integer("synth.species_per_genus", BM_REF(synth.species_per_genus)));
    f.push_back(integer("synth.per_species", BM_REF(synth.per_species)));
    f.push_back(real("synth.noise", BM_REF(synth.noise)));
    f.push_back(integer("synth.motifs_per_genus", BM_REF(synth.motifs_per_genus)));
    f.push_back(integer("synth.motif_len", BM_REF(synth.motif_len)));
    f.push_back(real("synth.species_fraction", BM_REF(synth.species_fraction)));
    f.push_back(integer("synth.species_segment_len", BM_REF(synth.species_segment_len)));
    f.push_back(real("split.pretrain_train_frac", BM_REF(split.pretrain_train_frac)));
    f.push_back(real("split.ft_train_frac", BM_REF(split.ft_train_frac)));
    f.push_back(real("split.ft_test_frac", BM_REF(split.ft_test_frac)));
    f.push_back(real("split.ft_val_frac", BM_REF(split.ft_val_frac)));
    f.push_back(integer("split.unseen_species_per_genus", BM_REF(split.unseen_species_per_genus)));
    f.push_back(text("tokenizer.kind", BM_REF(tokenizer_kind)));
    f.push_back(integer("tokenizer.k", BM_REF(tokenizer_k)));
    f.push_back(integer("model.d_model", BM_REF(model.d_model)));
    f.push_back(integer("model.n_layers", BM_REF(model.n_layers)));
    f.push_back(integer("model.head_dim", BM_REF(model.head_dim)));
    f.push_back({"model.vocab_size",
                 [](ExperimentConfig& c) {
                   return c.model.vocab_size == 0 ? std::string("auto") : std::to_string(c.model.vocab_size);
                 },
                 [](ExperimentConfig& c, std::string_view v) {
                   c.model.vocab_size = v == "auto" ? 0 : parse_int<Index>("model.vocab_size", v);
                 }});
    f.push_back(named("model.mixer", BM_REF(model.mixer), parse_mixer));
    f.push_back(integer("model.mlp_ratio", BM_REF(model.mlp_ratio)));
    f.push_back(integer("model.state_dim", BM_REF(model.state_dim)));
    f.push_back(integer("model.expand", BM_REF(model.expand)));
    f.push_back(integer("model.conv_width", BM_REF(model.conv_width)));
    f.push_back(integer("model.chunk_len", BM_REF(model.chunk_len)));
    f.push_back(named("pretrain.objective", BM_REF(pretrain.objective), parse_objective));
    train_fields(f, "pretrain.", &ExperimentConfig::pretrain);
    f.push_back(real("pretrain.mlm_mask_ratio", BM_REF(pretrain.mlm_mask_ratio)));
    f.push_back(real("pretrain.rc_augment_prob", BM_REF(pretrain.rc_augment_prob)));
    train_fields(f, "finetune.", &ExperimentConfig::finetune);
    f.push_back(flag("finetune.freeze_backbone", BM_REF(finetune.freeze_backbone)));
    f.push_back(named("pooling", BM_REF(pooling), parse_pooling));
    f.push_back({"probe.learning_rates", [](ExperimentConfig& c) { return fmt_list(c.probe.learning_rates); },
                 [](ExperimentConfig& c, std::string_view v) { c.probe.learning_rates = parse_list("probe.learning_rates", v); }});
    f.push_back({"probe.momenta", [](ExperimentConfig& c) { return fmt_list(c.probe.momenta); },
                 [](ExperimentConfig& c, std::string_view v) { c.probe.momenta = parse_list("probe.momenta", v); }});
    f.push_back({"probe.weight_decays", [](ExperimentConfig& c) { return fmt_list(c.probe.weight_decays); },
                 [](ExperimentConfig& c, std::string_view v) { c.probe.weight_decays = parse_list("probe.weight_decays", v); }});
    f.push_back(integer("probe.epochs", BM_REF(probe.epochs)));
    f.push_back(integer("probe.batch_size", BM_REF(probe.batch_size)));
    f.push_back(real("probe.val_fraction", BM_REF(probe.val_fraction)));
    f.push_back(integer("probe.threads", BM_REF(probe_threads)));
    f.push_back(integer("knn.k", BM_REF(knn_k)));
    f.push_back(named("knn.metric", BM_REF(knn_metric), parse_metric));
#undef BM_REF
    return f;
  }();
  return f;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields())
    if (f.key == key) return f.set(cfg, trim(value));
  throw ConfigError("unknown config key: " + std::string(key));
}

std::string ExperimentConfig::to_text() const {
  auto copy = *this;
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(copy) + "\n";
  return out;
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const auto line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(std::string_view(line).substr(0, eq));
    if (!seen.insert(key).second)
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key " + key);
    try {
      set_config_value(cfg, key, std::string_view(line).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_text();
}

// ---- metrics rows ---------------------------------------------------------

namespace {

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_or_nan(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() || it->is_null() ? std::numeric_limits<double>::quiet_NaN() : it->get<double>();
}

std::string cell(double v) { return std::isfinite(v) ? fmt_g(v) : ""; }

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto c = line.find(',', pos);
    out.push_back(trim(line.substr(pos, c == std::string_view::npos ? std::string_view::npos : c - pos)));
    if (c == std::string_view::npos) break;
    pos = c + 1;
  }
  return out;
}

}  // namespace

json RunMetrics::to_json() const {
  return {{"tokenizer", tokenizer},
          {"k", k},
          {"objective", objective},
          {"mixer", mixer},
          {"finetune_acc", num_or_null(finetune_acc)},
          {"linear_probe_acc", num_or_null(linear_probe_acc)},
          {"knn_acc", num_or_null(knn_acc)},
          {"perplexity", num_or_null(perplexity)},
          {"initial_perplexity", num_or_null(initial_perplexity)},
          {"n_layers", n_layers},
          {"d_model", d_model},
          {"params", params},
          {"status", status}};
}

RunMetrics RunMetrics::from_json(const json& j) {
  RunMetrics m;
  m.tokenizer = j.at("tokenizer").get<std::string>();
  m.k = j.at("k").get<int>();
  m.objective = j.at("objective").get<std::string>();
  m.mixer = j.at("mixer").get<std::string>();
  m.finetune_acc = num_or_nan(j, "finetune_acc");
  m.linear_probe_acc = num_or_nan(j, "linear_probe_acc");
  m.knn_acc = num_or_nan(j, "knn_acc");
  m.perplexity = num_or_nan(j, "perplexity");
  m.initial_perplexity = num_or_nan(j, "initial_perplexity");
  m.n_layers = j.at("n_layers").get<Index>();
  m.d_model = j.at("d_model").get<Index>();
  m.params = j.at("params").get<Index>();
  m.status = j.at("status").get<std::string>();
  return m;
}

std::string results_row(const RunMetrics& m) {
  return m.tokenizer + "," + std::to_string(m.k) + "," + m.objective + "," + m.mixer + "," +
         cell(m.finetune_acc) + "," + cell(m.linear_probe_acc) + "," + cell(m.knn_acc) + "," +
         cell(m.perplexity) + "," + std::to_string(m.n_layers) + "," + std::to_string(m.d_model) +
         "," + std::to_string(m.params) + "," + m.status;
}

RunMetrics parse_results_row(std::string_view line) {
  const auto f = split_csv(line);
  if (f.size() != 12) throw DataError("results row has " + std::to_string(f.size()) + " fields, expected 12");
  auto num = [](const std::string& s) {
    return s.empty() ? std::numeric_limits<double>::quiet_NaN() : parse_double("results", s);
  };
  RunMetrics m;
  try {
    m.tokenizer = f[0];
    m.k = parse_int<int>("k", f[1]);
    m.objective = f[2];
    m.mixer = f[3];
    m.finetune_acc = num(f[4]);
    m.linear_probe_acc = num(f[5]);
    m.knn_acc = num(f[6]);
    m.perplexity = num(f[7]);
    m.n_layers = parse_int<Index>("n_layers", f[8]);
    m.d_model = parse_int<Index>("d_model", f[9]);
    m.params = parse_int<Index>("params", f[10]);
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed results row: ") + e.what());
  }
  m.status = f[11];
  return m;
}

std::string results_csv(const std::vector<RunMetrics>& rows) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) out += results_row(r) + "\n";
  return out;
}

// ---- pipeline stages ------------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  return json::parse(in);
}

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw DataError("cannot write " + path.string());
  }
  void operator()(const json& j) { out_ << j.dump() << "\n" << std::flush; }

 private:
  std::ofstream out_;
};

RunMetrics describe(const ExperimentConfig& cfg) {
  RunMetrics m;
  const auto tok = cfg.tokenizer();
  m.tokenizer = tok.kind() == TokenizerKind::character ? "char" : "kmer";
  m.k = tok.k();
  m.objective = std::string(to_string(cfg.pretrain.objective));
  m.mixer = std::string(to_string(cfg.model.mixer));
  m.n_layers = cfg.model.n_layers;
  m.d_model = cfg.model.d_model;
  m.params = parameter_count(cfg.backbone());
  return m;
}

const std::vector<BarcodeRecord>& heldout(const DatasetBundle& b) {
  return b.unseen.empty() ? b.pretrain_val : b.unseen;
}

void begin_stage(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out);
  cfg.save(cfg.out / "config.txt");
}

fs::path require_pretrained(const ExperimentConfig& cfg) {
  const auto path = cfg.out / "pretrain.ckpt";
  if (!fs::exists(path))
    throw ConfigError("no pretrained checkpoint at " + path.string() + " (run pretrain first)");
  return path;
}

template <typename S>
Checkpoint<S> load_pretrained(const ExperimentConfig& cfg) {
  const auto path = require_pretrained(cfg);
  auto ck = load_checkpoint<S>(path);
  if (!(ck.tokenizer == cfg.tokenizer()))
    throw ConfigError("checkpoint tokenizer " + ck.tokenizer.name() + " does not match the config");
  if (!(ck.model.config() == cfg.backbone()))
    throw ConfigError("checkpoint model config does not match the config");
  return ck;
}

template <typename S>
json pretrain_stage(const ExperimentConfig& cfg, const DatasetBundle& bundle) {
  const auto tok = cfg.tokenizer();
  const auto tc = cfg.pretrain_config();
  Backbone<S> model(cfg.backbone(), cfg.init_seed());
  const auto& held = heldout(bundle);
  const double init_ppl = std::exp(evaluate_loss(model, tok, held, tc));
  JsonlLog log(cfg.out / "pretrain.jsonl");
  TrainingState<S> state;
  const auto res = pretrain(model, tok, bundle, tc, &state, std::ref(log));
  const double ppl = std::exp(evaluate_loss(model, tok, held, tc));
  json history = json::array();
  for (const auto& r : res.history) history.push_back(r.val_perplexity);
  json summary = {{"objective", to_string(tc.objective)},
                  {"initial_perplexity", init_ppl},
                  {"perplexity", ppl},
                  {"perplexity_set", bundle.unseen.empty() ? "pretrain_val" : "unseen"},
                  {"best_epoch", res.best_epoch},
                  {"epochs_run", res.epochs_run},
                  {"stopped_early", res.stopped_early},
                  {"best_val_loss", res.best_val_loss},
                  {"params", model.parameter_count()},
                  {"parameter_hash", hex64(model.parameter_hash())}};
  json meta = {{"objective", to_string(tc.objective)},
               {"epochs", res.epochs_run},
               {"best_epoch", res.best_epoch},
               {"val_perplexity_history", history},
               {"pooling", to_string(cfg.pooling)},
               {"run_id", cfg.run_id}};
  save_checkpoint(cfg.out / "pretrain.ckpt", model, tok, state, meta);
  write_text(cfg.out / "pretrain.json", summary.dump(2) + "\n");
  return summary;
}

template <typename S>
json finetune_stage(const ExperimentConfig& cfg, const DatasetBundle& bundle) {
  auto ck = load_pretrained<S>(cfg);
  const auto tc = cfg.finetune_config();
  JsonlLog log(cfg.out / "finetune.jsonl");
  const auto res = finetune(ck.model, ck.tokenizer, bundle, tc, std::ref(log));
  json summary = {{"test_accuracy", res.test_accuracy},
                  {"best_val_accuracy", res.best_val_accuracy},
                  {"best_epoch", res.best_epoch},
                  {"epochs_run", res.epochs_run},
                  {"stopped_early", res.stopped_early},
                  {"classes", res.labels.size()},
                  {"test_records", bundle.ft_test.size()}};
  json meta = ck.metadata;
  meta["finetune"] = summary;
  meta["labels"] = res.labels;
  save_checkpoint(cfg.out / "finetune.ckpt", ck.model, ck.tokenizer, TrainingState<S>{}, meta);
  write_text(cfg.out / "finetune.json", summary.dump(2) + "\n");
  return summary;
}

template <typename S>
json probe_stage(const ExperimentConfig& cfg, const DatasetBundle& bundle) {
  const auto ck = load_pretrained<S>(cfg);
  const auto hash_before = ck.model.parameter_hash();
  const std::string source = cfg.run_id + "/pretrain.ckpt";
  const auto train = extract_embeddings(ck.model, ck.tokenizer, bundle.ft_train, cfg.pooling, source);
  const auto test = extract_embeddings(ck.model, ck.tokenizer, bundle.ft_test, cfg.pooling, source);
  save_embeddings(cfg.out / "embeddings" / "ft_train", train);
  save_embeddings(cfg.out / "embeddings" / "ft_test", test);
  const auto lp = linear_probe(train, test, cfg.probe_grid(), ProbeLabel::species, cfg.probe_threads);
  write_text(cfg.out / "probe_cells.csv", lp.cells_csv());
  json summary = {{"linear_probe", lp.summary()}};
  if (!bundle.unseen.empty()) {
    const auto unseen = extract_embeddings(ck.model, ck.tokenizer, bundle.unseen, cfg.pooling, source);
    save_embeddings(cfg.out / "embeddings" / "unseen", unseen);
    const auto kr = knn_probe(train, unseen, cfg.knn_k, cfg.knn_metric);
    std::set<std::string> genera(unseen.genus.begin(), unseen.genus.end());
    summary["knn"] = {{"k", cfg.knn_k},
                      {"metric", to_string(cfg.knn_metric)},
                      {"accuracy", kr.accuracy},
                      {"queries", unseen.size()},
                      {"chance", 1.0 / static_cast<double>(genera.size())}};
  } else {
    summary["knn"] = nullptr;
  }
  if (ck.model.parameter_hash() != hash_before) throw NumericalError("probing modified the backbone");
  summary["parameter_hash"] = hex64(hash_before);
  write_text(cfg.out / "probe.json", summary.dump(2) + "\n");
  return summary;
}

template <typename F>
auto dispatch(Precision p, F&& f) {
  return p == Precision::f64 ? f(double{}) : f(float{});
}

}  // namespace

DatasetBundle prepare_data(const ExperimentConfig& cfg) {
  begin_stage(cfg);
  if (cfg.source == DataSource::bundle) return load_bundle(cfg.data_path);
  const auto records = cfg.source == DataSource::synth
                           ? synthesize(cfg.synth_spec())
                           : load_records(cfg.data_path, cfg.data_format, cfg.target_len, cfg.columns);
  const auto spec = cfg.split_spec();
  auto bundle = build_splits(records, spec);
  save_bundle(cfg.out / "data", bundle, spec, cfg.target_len);
  return bundle;
}

DatasetBundle run_bundle(const ExperimentConfig& cfg) {
  if (cfg.source == DataSource::bundle) return load_bundle(cfg.data_path);
  if (fs::exists(cfg.out / "data" / "manifest.json")) return load_bundle(cfg.out / "data");
  return prepare_data(cfg);
}

json run_pretrain(const ExperimentConfig& cfg) {
  begin_stage(cfg);
  const auto bundle = run_bundle(cfg);
  return dispatch(cfg.precision, [&](auto s) { return pretrain_stage<decltype(s)>(cfg, bundle); });
}

json run_finetune(const ExperimentConfig& cfg) {
  cfg.validate();
  require_pretrained(cfg);
  begin_stage(cfg);
  const auto bundle = run_bundle(cfg);
  return dispatch(cfg.precision, [&](auto s) { return finetune_stage<decltype(s)>(cfg, bundle); });
}

json run_probe(const ExperimentConfig& cfg) {
  cfg.validate();
  require_pretrained(cfg);
  begin_stage(cfg);
  const auto bundle = run_bundle(cfg);
  return dispatch(cfg.precision, [&](auto s) { return probe_stage<decltype(s)>(cfg, bundle); });
}

RunMetrics collect_metrics(const ExperimentConfig& cfg) {
  auto m = describe(cfg);
  if (fs::exists(cfg.out / "pretrain.json")) {
    const auto j = read_json(cfg.out / "pretrain.json");
    m.perplexity = j.at("perplexity").get<double>();
    m.initial_perplexity = j.at("initial_perplexity").get<double>();
  }
  if (fs::exists(cfg.out / "finetune.json"))
    m.finetune_acc = read_json(cfg.out / "finetune.json").at("test_accuracy").get<double>();
  if (fs::exists(cfg.out / "probe.json")) {
    const auto j = read_json(cfg.out / "probe.json");
    m.linear_probe_acc = j.at("linear_probe").at("test_accuracy").get<double>();
    if (!j.at("knn").is_null()) m.knn_acc = j.at("knn").at("accuracy").get<double>();
  }
  write_text(cfg.out / "metrics.csv", results_csv({m}));
  write_text(cfg.out / "metrics.json", m.to_json().dump(2) + "\n");
  return m;
}

RunMetrics run_pipeline(const ExperimentConfig& cfg) {
  begin_stage(cfg);
  for (const char* stale : {"pretrain.json", "finetune.json", "probe.json", "metrics.csv"})
    fs::remove(cfg.out / stale);
  const auto bundle = prepare_data(cfg);
  dispatch(cfg.precision, [&](auto s) {
    using S = decltype(s);
    pretrain_stage<S>(cfg, bundle);
    finetune_stage<S>(cfg, bundle);
    probe_stage<S>(cfg, bundle);
    return 0;
  });
  return collect_metrics(cfg);
}

// ---- sweeps ---------------------------------------------------------------

std::vector<SweepCell> sweep_cells(SweepKind kind, const ExperimentConfig& base,
                                   const std::vector<std::pair<Index, Index>>& scaling_grid) {
  std::vector<SweepCell> cells;
  auto with_tokenizer = [&](ExperimentConfig c, int k) {
    c.tokenizer_kind = k == 1 ? "char" : "kmer";
    c.tokenizer_k = k == 1 ? base.tokenizer_k : k;
    c.model.vocab_size = 0;
    return c;
  };
  auto tok_name = [](int k) { return k == 1 ? std::string("char") : "kmer" + std::to_string(k); };
  if (kind == SweepKind::ablation) {
    for (int k : {1, 4, 5, 6})
      for (auto obj : {Objective::ntp, Objective::mlm})
        for (auto mixer : {MixerKind::mamba1, MixerKind::mamba2}) {
          auto c = with_tokenizer(base, k);
          c.pretrain.objective = obj;
          c.model.mixer = mixer;
          const auto id = tok_name(k) + "-" + std::string(to_string(obj)) + "-" + std::string(to_string(mixer));
          c.run_id = id;
          cells.push_back({id, c});
        }
  } else {
    for (int k : {1, 6})
      for (const auto& [n, d] : scaling_grid) {
        auto c = with_tokenizer(base, k);
        c.model.n_layers = n;
        c.model.d_model = d;
        const auto id = tok_name(k) + "-n" + std::to_string(n) + "-d" + std::to_string(d);
        c.run_id = id;
        cells.push_back({id, c});
      }
  }
  return cells;
}

std::vector<LedgerEntry> read_ledger(const fs::path& path) {
  std::vector<LedgerEntry> out;
  std::ifstream in(path);
  if (!in) return out;
  for (std::string line; std::getline(in, line);) {
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      // torn final line from an interrupted write
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw DataError("corrupt sweep ledger line in " + path.string());
    }
    out.push_back({j.at("cell").get<std::string>(), RunMetrics::from_json(j.at("metrics")),
                   j.value("error", std::string())});
  }
  return out;
}

namespace {

// Cuts an unterminated final line left by an interrupted append.
void drop_torn_tail(const fs::path& path) {
  if (!fs::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  const std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (s.empty() || s.back() == '\n') return;
  const auto cut = s.rfind('\n');
  in.close();
  fs::resize_file(path, cut == std::string::npos ? 0 : cut + 1);
}

}  // namespace

SweepResult run_sweep(const fs::path& dir, SweepKind kind, const ExperimentConfig& base,
                      const SweepOptions& opts,
                      const std::vector<std::pair<Index, Index>>& scaling_grid) {
  if (opts.workers < 1) throw ConfigError("sweep needs at least one worker");
  auto cells = sweep_cells(kind, base, scaling_grid);
  for (auto& c : cells) {
    c.config.out = dir / "cells" / c.id;
    c.config.validate();
  }
  const auto ledger_path = dir / "ledger.jsonl";
  auto done = read_ledger(ledger_path);
  if (!done.empty() && !opts.resume)
    throw ConfigError("sweep directory " + dir.string() + " already has a ledger (use --resume)");
  fs::create_directories(dir);
  drop_torn_tail(ledger_path);
  base.save(dir / "base.conf");
  {
    json ids = json::array();
    for (const auto& c : cells) ids.push_back(c.id);
    write_text(dir / "sweep.json", json{{"kind", to_string(kind)}, {"cells", ids}}.dump(2) + "\n");
  }

  std::set<std::string> recorded;
  for (const auto& e : done) recorded.insert(e.cell);
  std::vector<const SweepCell*> pending;
  for (const auto& c : cells)
    if (!recorded.count(c.id)) pending.push_back(&c);

  SweepResult res;
  res.skipped = cells.size() - pending.size();
  std::mutex ledger_mu;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> executed{0};
  auto worker = [&] {
    while (true) {
      const auto i = next.fetch_add(1);
      if (i >= pending.size()) return;
      if (opts.max_cells && i >= opts.max_cells) return;
      const auto& c = *pending[i];
      if (opts.on_cell_start) {
        std::lock_guard lk(ledger_mu);
        opts.on_cell_start(c);
      }
      RunMetrics m;
      std::string error;
      try {
        m = run_pipeline(c.config);
      } catch (const std::exception& e) {
        m = describe(c.config);
        m.status = "failed";
        error = e.what();
      }
      json entry = {{"cell", c.id}, {"status", m.status}, {"metrics", m.to_json()}};
      if (!error.empty()) entry["error"] = error;
      const auto line = entry.dump() + "\n";
      std::lock_guard lk(ledger_mu);
      std::ofstream out(ledger_path, std::ios::app | std::ios::binary);
      out.write(line.data(), static_cast<std::streamsize>(line.size()));
      out.flush();
      if (!out) throw DataError("cannot append to " + ledger_path.string());
      ++executed;
    }
  };
  const int width = std::max(1, std::min<int>(opts.workers, static_cast<int>(pending.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < width; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  res.executed = executed;

  std::map<std::string, RunMetrics> by_cell;
  for (const auto& e : read_ledger(ledger_path)) by_cell.emplace(e.cell, e.metrics);
  res.complete = true;
  for (const auto& c : cells) {
    const auto it = by_cell.find(c.id);
    if (it == by_cell.end()) {
      res.complete = false;
      continue;
    }
    res.rows.push_back(it->second);
  }
  if (res.complete) write_text(dir / "results.csv", results_csv(res.rows));
  return res;
}

// ---- report ---------------------------------------------------------------

std::vector<RunMetrics> collect_results(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("results directory not found: " + dir.string());
  std::vector<fs::path> files;
  if (fs::exists(dir / "results.csv")) {
    files.push_back(dir / "results.csv");
  } else {
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().filename() == "metrics.csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  }
  std::vector<RunMetrics> rows;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    if (!std::getline(in, line) || trim(line) != kResultsHeader)
      throw DataError("unexpected header in " + f.string());
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      auto m = parse_results_row(line);
      if (m.status == "ok") rows.push_back(std::move(m));
    }
  }
  if (rows.empty()) throw DataError("no completed runs under " + dir.string());
  return rows;
}

std::vector<ScalingSeries> scaling_series(const std::vector<RunMetrics>& rows) {
  std::map<std::string, std::vector<SeriesPoint>> groups;
  for (const auto& r : rows) {
    if (!std::isfinite(r.linear_probe_acc) || !std::isfinite(r.knn_acc)) continue;
    const auto name = r.tokenizer == "char" ? std::string("char") : r.tokenizer + std::to_string(r.k);
    groups[name].push_back({r.params, r.n_layers, r.d_model, r.linear_probe_acc, r.knn_acc});
  }
  std::vector<ScalingSeries> out;
  for (auto& [name, pts] : groups) {
    std::stable_sort(pts.begin(), pts.end(), [](const SeriesPoint& a, const SeriesPoint& b) {
      return std::tie(a.params, a.n_layers, a.d_model) < std::tie(b.params, b.n_layers, b.d_model);
    });
    out.push_back({name, std::move(pts)});
  }
  return out;
}

namespace {

std::string fx(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string short_count(Index n) {
  char buf[32];
  if (n >= 1000000)
    std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(n) / 1e6);
  else if (n >= 1000)
    std::snprintf(buf, sizeof buf, "%.1fK", static_cast<double>(n) / 1e3);
  else
    std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(n));
  return buf;
}

}  // namespace

std::string scaling_svg(const ScalingSeries& series) {
  constexpr double W = 640, H = 400, left = 70, right = 160, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  double lo = 0, hi = 0;
  if (!series.points.empty()) {
    lo = std::log10(static_cast<double>(std::max<Index>(1, series.points.front().params)));
    hi = std::log10(static_cast<double>(std::max<Index>(1, series.points.back().params)));
  }
  auto xpos = [&](Index p) {
    if (hi - lo < 1e-12) return left + pw / 2;
    return left + pw * (std::log10(static_cast<double>(std::max<Index>(1, p))) - lo) / (hi - lo);
  };
  auto ypos = [&](double acc) { return top + ph * (1.0 - std::clamp(acc, 0.0, 1.0)); };

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
    << "  <title>" << xml_escape("Scaling: " + series.tokenizer) << "</title>\n"
    << "  <rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
    << "  <text x=\"" << fx(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << xml_escape("Classification accuracy vs parameters (" + series.tokenizer + ")") << "</text>\n";

  s << "  <g stroke=\"black\" stroke-width=\"1\">\n"
    << "    <line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\"/>\n"
    << "    <line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\"/>\n"
    << "  </g>\n";
  s << "  <g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int t = 0; t <= 100; t += 20) {
    const double y = ypos(t / 100.0);
    s << "    <line x1=\"" << left - 4 << "\" y1=\"" << fx(y) << "\" x2=\"" << left << "\" y2=\"" << fx(y)
      << "\" stroke=\"black\"/>\n"
      << "    <text x=\"" << left - 8 << "\" y=\"" << fx(y + 4) << "\" text-anchor=\"end\">" << t << "</text>\n";
  }
  for (const auto& p : series.points) {
    const double x = xpos(p.params);
    s << "    <line x1=\"" << fx(x) << "\" y1=\"" << top + ph << "\" x2=\"" << fx(x) << "\" y2=\"" << top + ph + 4
      << "\" stroke=\"black\"/>\n"
      << "    <text x=\"" << fx(x) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
      << short_count(p.params) << "</text>\n";
  }
  s << "    <text x=\"" << fx(left + pw / 2) << "\" y=\"" << H - 16
    << "\" text-anchor=\"middle\">Parameters</text>\n"
    << "    <text x=\"18\" y=\"" << fx(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << fx(top + ph / 2) << ")\">Accuracy (%)</text>\n"
    << "  </g>\n";

  struct Line {
    const char* name;
    const char* color;
    double SeriesPoint::*acc;
  };
  const Line lines[] = {{"Linear probe", "#1f77b4", &SeriesPoint::linear_probe_acc},
                        {"1-NN probe", "#ff7f0e", &SeriesPoint::knn_acc}};
  int li = 0;
  for (const auto& l : lines) {
    std::string pts;
    for (const auto& p : series.points) pts += (pts.empty() ? "" : " ") + fx(xpos(p.params)) + "," + fx(ypos(p.*l.acc));
    s << "  <g stroke=\"" << l.color << "\" fill=\"" << l.color << "\">\n";
    if (series.points.size() > 1)
      s << "    <polyline points=\"" << pts << "\" fill=\"none\" stroke-width=\"2\"/>\n";
    for (const auto& p : series.points)
      s << "    <circle cx=\"" << fx(xpos(p.params)) << "\" cy=\"" << fx(ypos(p.*l.acc)) << "\" r=\"4\"/>\n";
    s << "  </g>\n";
    const double ly = top + 20 + 22 * li++;
    s << "  <line x1=\"" << W - right + 16 << "\" y1=\"" << fx(ly) << "\" x2=\"" << W - right + 40 << "\" y2=\""
      << fx(ly) << "\" stroke=\"" << l.color << "\" stroke-width=\"2\"/>\n"
      << "  <text x=\"" << W - right + 46 << "\" y=\"" << fx(ly + 4)
      << "\" font-family=\"sans-serif\" font-size=\"12\">" << l.name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

json write_report(const fs::path& results_dir, const fs::path& out) {
  const auto rows = collect_results(results_dir);
  const auto series = scaling_series(rows);
  fs::create_directories(out);
  json summary = {{"runs", rows.size()}, {"series", json::array()}};
  for (const auto& s : series) {
    std::string csv = "params,n_layers,d_model,linear_probe_acc,knn_acc\n";
    for (const auto& p : s.points)
      csv += std::to_string(p.params) + "," + std::to_string(p.n_layers) + "," + std::to_string(p.d_model) +
             "," + fmt_g(p.linear_probe_acc) + "," + fmt_g(p.knn_acc) + "\n";
    write_text(out / ("scaling_" + s.tokenizer + ".csv"), csv);
    write_text(out / ("scaling_" + s.tokenizer + ".svg"), scaling_svg(s));
    const auto best_lp = std::max_element(s.points.begin(), s.points.end(), [](auto& a, auto& b) {
      return a.linear_probe_acc < b.linear_probe_acc;
    });
    const auto best_knn = std::max_element(s.points.begin(), s.points.end(), [](auto& a, auto& b) {
      return a.knn_acc < b.knn_acc;
    });
    summary["series"].push_back({{"tokenizer", s.tokenizer},
                                 {"points", s.points.size()},
                                 {"best_linear_probe", {{"params", best_lp->params}, {"accuracy", best_lp->linear_probe_acc}}},
                                 {"best_knn", {{"params", best_knn->params}, {"accuracy", best_knn->knn_acc}}}});
  }
  json table = json::array();
  for (const auto& r : rows) table.push_back(r.to_json());
  summary["results"] = table;
  write_text(out / "summary.json", summary.dump(2) + "\n");
  return summary;
}

}  // namespace bm
