#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

#include "barcodemamba/data.hpp"

namespace bm {

// Generator for labeled toy barcodes. Each genus draws a small library of
// motifs and tiles a template from them; each species overwrites a few
// segments of its genus template with its own sub-motifs; every record then
// receives independent per-base substitutions with probability `noise`.
struct SynthSpec {
  int genera = 8;
  int species_per_genus = 4;
  int per_species = 30;
  double noise = 0.02;
  std::uint64_t seed = 0;
  std::size_t length = kDefaultTargetLength;
  int motifs_per_genus = 6;
  int motif_len = 10;
  double species_fraction = 0.11;  // share of positions rewritten per species
  int species_segment_len = 6;

  void validate() const;
  nlohmann::json to_json() const;
};

std::vector<BarcodeRecord> synthesize(const SynthSpec& spec);

}  // namespace bm
