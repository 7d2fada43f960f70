#include "barcodemamba/backbone.hpp"

namespace bm {

std::string_view to_string(MixerKind k) { return k == MixerKind::mamba1 ? "mamba1" : "mamba2"; }

MixerKind parse_mixer(std::string_view name) {
  if (name == "mamba1" || name == "mamba") return MixerKind::mamba1;
  if (name == "mamba2") return MixerKind::mamba2;
  throw ConfigError("unknown mixer: " + std::string(name));
}

std::string_view to_string(Pooling p) { return p == Pooling::mean ? "mean" : "last"; }

Pooling parse_pooling(std::string_view name) {
  if (name == "mean") return Pooling::mean;
  if (name == "last") return Pooling::last;
  throw ConfigError("unknown pooling: " + std::string(name));
}

void BackboneConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("backbone config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1 || head_dim < 1) fail("d_model and head_dim must be positive");
  if (d_model % head_dim != 0) fail("d_model must be divisible by head_dim");
  if (vocab_size < 5) fail("vocab_size must be >= 5");
  if (mlp_ratio < 1 || state_dim < 1 || expand < 1 || conv_width < 1 || chunk_len < 1)
    fail("mlp_ratio, state_dim, expand, conv_width and chunk_len must be positive");
  if (num_classes < 0) fail("num_classes must be >= 0");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"d_model", d_model},     {"n_layers", n_layers},   {"head_dim", head_dim},
          {"vocab_size", vocab_size}, {"mixer", to_string(mixer)}, {"mlp_ratio", mlp_ratio},
          {"state_dim", state_dim}, {"expand", expand},       {"conv_width", conv_width},
          {"chunk_len", chunk_len}, {"num_classes", num_classes}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.d_model = j.at("d_model").get<Index>();
  c.n_layers = j.at("n_layers").get<Index>();
  c.head_dim = j.at("head_dim").get<Index>();
  c.vocab_size = j.at("vocab_size").get<Index>();
  c.mixer = parse_mixer(j.at("mixer").get<std::string>());
  c.mlp_ratio = j.at("mlp_ratio").get<Index>();
  c.state_dim = j.at("state_dim").get<Index>();
  c.expand = j.at("expand").get<Index>();
  c.conv_width = j.at("conv_width").get<Index>();
  c.chunk_len = j.at("chunk_len").get<Index>();
  c.num_classes = j.at("num_classes").get<Index>();
  c.validate();
  return c;
}

Index parameter_count(const BackboneConfig& c) {
  const Index d = c.d_model, I = c.inner_dim(), h = c.heads(), s = c.state_dim,
              w = c.conv_width, md = c.mlp_ratio * d, r = c.dt_rank();
  Index mixer = 0;
  if (c.mixer == MixerKind::mamba2) {
    mixer = d * (2 * I + 2 * h * s + h) + (w + 1) * (I + 2 * h * s) + 3 * h + I * d;
  } else {
    mixer = d * 2 * I + (w + 1) * I + I * (r + 2 * s) + r * I + I + I * s + I + I * d;
  }
  const Index block = 4 * d + d * md + md + md * d + d + mixer;
  Index total = c.vocab_size * d + c.n_layers * block + 2 * d;
  if (c.num_classes > 0) total += d * c.num_classes + c.num_classes;
  return total;
}

TokenBatch make_batch(const std::vector<TokenSeq>& seqs) {
  if (seqs.empty()) throw DataError("cannot batch zero sequences");
  TokenBatch b;
  b.seq_len = static_cast<Index>(seqs.front().size());
  b.ids.reserve(seqs.size() * seqs.front().size());
  for (const auto& s : seqs) {
    if (static_cast<Index>(s.size()) != b.seq_len)
      throw DataError("sequences in a batch must share one length");
    b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
    b.mask.insert(b.mask.end(), s.pad_mask.begin(), s.pad_mask.end());
  }
  return b;
}

TokenBatch make_batch(const TokenSeq& seq) { return make_batch(std::vector<TokenSeq>{seq}); }

}  // namespace bm
