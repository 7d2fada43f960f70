#pragma once

// Checkpoint file: "BMCKPT01" u64 header_len, JSON header (config, tokenizer,
// dtype, training state scalars, metadata), then the parameter container with
// model parameters followed by optimizer moments ("optim.m.*", "optim.v.*").

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"

#include "barcodemamba/backbone.hpp"
#include "barcodemamba/param_io.hpp"
#include "barcodemamba/tokenizer.hpp"

namespace bm {

inline constexpr char kCheckpointMagic[8] = {'B', 'M', 'C', 'K', 'P', 'T', '0', '1'};

template <typename S>
struct TrainingState {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::map<std::string, Matrix<S>> first_moment;
  std::map<std::string, Matrix<S>> second_moment;
};

template <typename S>
struct Checkpoint {
  Backbone<S> model;
  Tokenizer tokenizer;
  TrainingState<S> state;
  nlohmann::json metadata = nlohmann::json::object();
};

// Throws unless the tokenizer's vocabulary matches the model's embedding.
inline void check_vocab_agreement(const BackboneConfig& cfg, const Tokenizer& tok) {
  if (static_cast<Index>(tok.vocab_size()) != cfg.vocab_size)
    throw ConfigError("tokenizer vocabulary (" + std::to_string(tok.vocab_size()) +
                      ") does not match backbone vocab_size (" + std::to_string(cfg.vocab_size) +
                      ")");
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Backbone<S>& model,
                     const Tokenizer& tokenizer, const TrainingState<S>& state,
                     const nlohmann::json& metadata) {
  check_vocab_agreement(model.config(), tokenizer);
  nlohmann::json header = {{"format", "barcodemamba-checkpoint"},
                           {"version", 1},
                           {"dtype", to_string(dtype_of<S>())},
                           {"config", model.config().to_json()},
                           {"tokenizer", tokenizer.to_json()},
                           {"step", state.step},
                           {"seed", state.seed},
                           {"metadata", metadata}};
  std::vector<StoredTensor> tensors;
  auto push = [&](const std::string& name, const Matrix<S>& m) {
    tensors.push_back({name, dtype_of<S>(), m.template cast<double>()});
  };
  for (const auto& p : model.parameters()) push(p.name, p.tensor.value());
  for (const auto& [name, m] : state.first_moment) push("optim.m." + name, m);
  for (const auto& [name, m] : state.second_moment) push("optim.v." + name, m);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::string text = header.dump();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  io::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_param_container(out, tensors);
}

inline nlohmann::json read_checkpoint_header(std::istream& in, const std::string& what) {
  char magic[8];
  if (!in.read(magic, 8) || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw DataError(what + " is not a checkpoint (bad magic)");
  std::string text(io::get_u64(in), '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(text.size())))
    throw DataError("truncated checkpoint header in " + what);
  return nlohmann::json::parse(text);
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  const auto header = read_checkpoint_header(in, path.string());
  const auto cfg = BackboneConfig::from_json(header.at("config"));
  auto tok = Tokenizer::from_json(header.at("tokenizer"));
  check_vocab_agreement(cfg, tok);
  auto tensors = read_param_container(in);

  Checkpoint<S> ck{Backbone<S>::zeros(cfg), std::move(tok), {}, header.value("metadata", nlohmann::json::object())};
  ck.state.step = header.at("step").get<std::int64_t>();
  ck.state.seed = header.at("seed").get<std::uint64_t>();
  std::map<std::string, Matrix<double>*> by_name;
  for (auto& t : tensors) by_name[t.name] = &t.values;
  for (auto& p : ck.model.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint is missing parameter " + p.name);
    const auto& v = *it->second;
    if (v.rows() != p.tensor.rows() || v.cols() != p.tensor.cols())
      throw DataError("checkpoint parameter " + p.name + " has the wrong shape");
    p.tensor.mutable_value() = v.template cast<S>();
    by_name.erase(it);
  }
  for (auto& [name, values] : by_name) {
    if (name.rfind("optim.m.", 0) == 0)
      ck.state.first_moment[name.substr(8)] = values->template cast<S>();
    else if (name.rfind("optim.v.", 0) == 0)
      ck.state.second_moment[name.substr(8)] = values->template cast<S>();
    else
      throw DataError("checkpoint has unexpected parameter " + name);
  }
  return ck;
}

// Reads only the JSON header (e.g. to decide the precision to load with).
inline nlohmann::json peek_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  return read_checkpoint_header(in, path.string());
}

}  // namespace bm
