#include "barcodemamba/synth.hpp"

#include <cmath>
#include <cstdio>

namespace bm {

namespace {

constexpr char kBases[] = {'A', 'C', 'G', 'T'};

std::string random_bases(Rng& rng, std::size_t n) {
  std::string s(n, 'A');
  for (auto& c : s) c = kBases[rng.below(4)];
  return s;
}

// A base different from c, uniformly among the other three.
char substitute(char c, Rng& rng) {
  int idx = 0;
  while (kBases[idx] != c) ++idx;
  return kBases[(idx + 1 + static_cast<int>(rng.below(3))) % 4];
}

std::string pad_index(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", i);
  return buf;
}

}  // namespace

void SynthSpec::validate() const {
  if (genera < 1 || species_per_genus < 1 || per_species < 1)
    throw ConfigError("synth: genera, species_per_genus and per_species must be >= 1");
  if (!(noise >= 0.0 && noise < 1.0)) throw ConfigError("synth: noise must lie in [0, 1)");
  if (length < 1) throw ConfigError("synth: length must be >= 1");
  if (motifs_per_genus < 1 || motif_len < 1 || species_segment_len < 1)
    throw ConfigError("synth: motif sizes must be >= 1");
  if (!(species_fraction >= 0.0 && species_fraction <= 1.0))
    throw ConfigError("synth: species_fraction must lie in [0, 1]");
}

nlohmann::json SynthSpec::to_json() const {
  return {{"genera", genera},
          {"species_per_genus", species_per_genus},
          {"per_species", per_species},
          {"noise", noise},
          {"seed", seed},
          {"length", length},
          {"motifs_per_genus", motifs_per_genus},
          {"motif_len", motif_len},
          {"species_fraction", species_fraction},
          {"species_segment_len", species_segment_len}};
}

std::vector<BarcodeRecord> synthesize(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<BarcodeRecord> out;
  out.reserve(static_cast<std::size_t>(spec.genera * spec.species_per_genus * spec.per_species));
  const auto L = spec.length;
  const auto seg = static_cast<std::size_t>(spec.species_segment_len);
  const auto n_segments = static_cast<std::size_t>(
      std::llround(spec.species_fraction * static_cast<double>(L) / static_cast<double>(seg)));
  for (int g = 0; g < spec.genera; ++g) {
    Rng grng = rng.fork(static_cast<std::uint64_t>(g));
    std::vector<std::string> library;
    for (int m = 0; m < spec.motifs_per_genus; ++m)
      library.push_back(random_bases(grng, static_cast<std::size_t>(spec.motif_len)));
    std::string tmpl;
    while (tmpl.size() < L) tmpl += library[grng.below(library.size())];
    tmpl.resize(L);
    const std::string genus = "Genus" + pad_index(g);

    for (int s = 0; s < spec.species_per_genus; ++s) {
      Rng srng = grng.fork(static_cast<std::uint64_t>(1000 + s));
      std::string sp = tmpl;
      for (std::size_t k = 0; k < n_segments && L >= seg; ++k) {
        const auto start = static_cast<std::size_t>(srng.below(L - seg + 1));
        const auto motif = random_bases(srng, seg);
        sp.replace(start, seg, motif);
      }
      const std::string species = genus + " sp" + pad_index(s);
      for (int i = 0; i < spec.per_species; ++i) {
        std::string seq = sp;
        if (spec.noise > 0)
          for (auto& c : seq)
            if (srng.bernoulli(spec.noise)) c = substitute(c, srng);
        out.push_back({"SYN" + pad_index(g) + pad_index(s) + "-" + std::to_string(i), seq, species,
                       genus});
      }
    }
  }
  return out;
}

}  // namespace bm
