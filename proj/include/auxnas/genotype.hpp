#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "auxnas/layers.hpp"
#include "auxnas/tensor_io.hpp"

namespace auxnas {

// One auxiliary cell: two input locations, one adaptor per input, one
// aggregator. Locations 0..P-1 are encoder taps; P + c is the output of the
// c-th cell in generation order (task-major).
struct AuxCell {
  int in1 = 0, in2 = 0;
  AdaptorOp op1 = AdaptorOp::sep_conv3x3, op2 = AdaptorOp::sep_conv3x3;
  AggOp agg = AggOp::sum;
  bool operator==(const AuxCell&) const = default;
};

struct Genotype {
  int P = 0;
  std::vector<std::vector<AuxCell>> tasks;  // tasks[t][p], t in task-list order

  int T() const { return static_cast<int>(tasks.size()); }
  bool operator==(const Genotype&) const = default;
};

using TokenSeq = std::vector<int>;

inline constexpr int kTokensPerCell = 5;

enum class TokenRole { loc, adaptor, aggregator };

inline TokenRole role_at(int pos) {
  const int r = pos % kTokensPerCell;
  return r < 2 ? TokenRole::loc : r < 4 ? TokenRole::adaptor : TokenRole::aggregator;
}

inline int sequence_length(int P, int T) { return kTokensPerCell * P * T; }
inline int loc_vocab(int P, int T) { return P + P * T; }

inline int cell_location(int P, int t, int p) { return P + t * P + p; }

// Availability rule for cell (t, p), both 0-based: encoder taps, plus the
// outputs of cells (t', p') with p' < p and t' <= t (t' < t when strict).
inline bool location_available(int loc, int t, int p, int P, int T, bool strict) {
  if (loc < 0) return false;
  if (loc < P) return true;
  const int c = loc - P;
  const int tp = c / P, pp = c % P;
  if (tp >= T) return false;
  return pp < p && (strict ? tp < t : tp <= t);
}

inline std::vector<std::uint8_t> location_mask(int t, int p, int P, int T, bool strict) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(loc_vocab(P, T)));
  for (int l = 0; l < loc_vocab(P, T); ++l) m[static_cast<std::size_t>(l)] = location_available(l, t, p, P, T, strict);
  return m;
}

// Throws GenotypeError on any availability or vocabulary violation.
inline void check_availability(const Genotype& g, bool strict = false) {
  if (g.P < 1) throw GenotypeError("genotype needs P >= 1");
  if (g.T() < 1) throw GenotypeError("genotype needs at least one task");
  for (int t = 0; t < g.T(); ++t) {
    const auto& cells = g.tasks[static_cast<std::size_t>(t)];
    if (static_cast<int>(cells.size()) != g.P)
      throw GenotypeError("task " + std::to_string(t + 1) + " has " + std::to_string(cells.size()) + " cells, expected " +
                          std::to_string(g.P));
    for (int p = 0; p < g.P; ++p) {
      const auto& c = cells[static_cast<std::size_t>(p)];
      for (int loc : {c.in1, c.in2})
        if (!location_available(loc, t, p, g.P, g.T(), strict))
          throw GenotypeError("cell (" + std::to_string(t + 1) + "," + std::to_string(p) + ") references unavailable location " +
                              std::to_string(loc));
      for (auto op : {c.op1, c.op2})
        if (static_cast<int>(op) < 0 || static_cast<int>(op) >= kNumAdaptorOps) throw GenotypeError("adaptor op out of range");
      if (static_cast<int>(c.agg) < 0 || static_cast<int>(c.agg) >= kNumAggOps) throw GenotypeError("aggregator out of range");
    }
  }
}

// Channel bookkeeping: skip_connect must see exactly c_aux channels. Cell
// outputs always carry c_aux; taps carry their stage width.
inline void check_channels(const Genotype& g, const std::vector<int>& tap_channels, int c_aux) {
  if (static_cast<int>(tap_channels.size()) != g.P)
    throw GenotypeError("genotype has P=" + std::to_string(g.P) + " but the model exposes " +
                        std::to_string(tap_channels.size()) + " taps");
  for (int t = 0; t < g.T(); ++t)
    for (int p = 0; p < g.P; ++p) {
      const auto& c = g.tasks[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
      for (auto [loc, op] : {std::pair{c.in1, c.op1}, std::pair{c.in2, c.op2}}) {
        const int ch = loc < g.P ? tap_channels[static_cast<std::size_t>(loc)] : c_aux;
        if (!layers::adaptor_accepts(op, ch, c_aux))
          throw GenotypeError("skip_connect on location " + std::to_string(loc) + " with " + std::to_string(ch) +
                              " channels");
      }
    }
}

// ---------------------------------------------------------------------------
// Token codec

inline Genotype decode_tokens(const TokenSeq& seq, int P, int T, bool strict = false) {
  if (P < 1 || T < 1) throw CodecError("P and T must be positive");
  if (static_cast<int>(seq.size()) != sequence_length(P, T))
    throw CodecError("token sequence has length " + std::to_string(seq.size()) + ", expected " +
                     std::to_string(sequence_length(P, T)));
  Genotype g{P, {}};
  std::size_t i = 0;
  for (int t = 0; t < T; ++t) {
    auto& cells = g.tasks.emplace_back();
    for (int p = 0; p < P; ++p) {
      const int in1 = seq[i], in2 = seq[i + 1], a1 = seq[i + 2], a2 = seq[i + 3], ag = seq[i + 4];
      i += kTokensPerCell;
      for (int a : {a1, a2})
        if (a < 0 || a >= kNumAdaptorOps) throw GenotypeError("adaptor token " + std::to_string(a) + " out of range");
      if (ag < 0 || ag >= kNumAggOps) throw GenotypeError("aggregator token " + std::to_string(ag) + " out of range");
      cells.push_back({in1, in2, static_cast<AdaptorOp>(a1), static_cast<AdaptorOp>(a2), static_cast<AggOp>(ag)});
    }
  }
  check_availability(g, strict);
  return g;
}

inline TokenSeq encode_genotype(const Genotype& g, bool strict = false) {
  try {
    check_availability(g, strict);
  } catch (const GenotypeError& e) {
    throw CodecError(std::string("cannot encode invalid genotype: ") + e.what());
  }
  TokenSeq seq;
  seq.reserve(static_cast<std::size_t>(sequence_length(g.P, g.T())));
  for (const auto& cells : g.tasks)
    for (const auto& c : cells)
      seq.insert(seq.end(), {c.in1, c.in2, static_cast<int>(c.op1), static_cast<int>(c.op2), static_cast<int>(c.agg)});
  return seq;
}

// Uniformly random availability-valid genotype (channel validity not implied).
inline Genotype random_genotype(int P, int T, Rng& rng, bool strict = false) {
  Genotype g{P, {}};
  for (int t = 0; t < T; ++t) {
    auto& cells = g.tasks.emplace_back();
    for (int p = 0; p < P; ++p) {
      std::vector<int> avail;
      for (int l = 0; l < loc_vocab(P, T); ++l)
        if (location_available(l, t, p, P, T, strict)) avail.push_back(l);
      auto pick = [&] { return avail[rng.below(static_cast<std::uint32_t>(avail.size()))]; };
      AuxCell c;
      c.in1 = pick();
      c.in2 = pick();
      c.op1 = static_cast<AdaptorOp>(rng.below(kNumAdaptorOps));
      c.op2 = static_cast<AdaptorOp>(rng.below(kNumAdaptorOps));
      c.agg = static_cast<AggOp>(rng.below(kNumAggOps));
      cells.push_back(c);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// JSON: {"P", "T", "op_vocab_version", "cells": [[in1,in2,op1,op2,agg], ...]}
// with cells in generation order.

inline nlohmann::json genotype_to_json(const Genotype& g) {
  nlohmann::json cells = nlohmann::json::array();
  for (int v : encode_genotype(g)) {
    if (cells.empty() || cells.back().size() == kTokensPerCell) cells.push_back(nlohmann::json::array());
    cells.back().push_back(v);
  }
  return {{"P", g.P}, {"T", g.T()}, {"op_vocab_version", kOpVocabVersion}, {"cells", cells}};
}

inline Genotype genotype_from_json(const nlohmann::json& j, bool strict = false) {
  try {
    const int P = j.at("P").get<int>(), T = j.at("T").get<int>();
    if (j.at("op_vocab_version").get<int>() != kOpVocabVersion) throw CodecError("unsupported op_vocab_version");
    TokenSeq seq;
    for (const auto& cell : j.at("cells")) {
      if (!cell.is_array() || cell.size() != kTokensPerCell) throw CodecError("each cell must have 5 tokens");
      for (const auto& v : cell) seq.push_back(v.get<int>());
    }
    return decode_tokens(seq, P, T, strict);
  } catch (const nlohmann::json::exception& e) {
    throw CodecError(std::string("genotype json: ") + e.what());
  }
}

inline void write_genotype(const std::filesystem::path& path, const Genotype& g) {
  io::write_file(path, genotype_to_json(g).dump(2) + "\n");
}

inline Genotype read_genotype(const std::filesystem::path& path, bool strict = false) {
  const std::string text = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CodecError(path.string() + ": " + e.what());
  }
  return genotype_from_json(j, strict);
}

inline std::string describe(const Genotype& g) { return genotype_to_json(g).at("cells").dump(); }

}  // namespace auxnas
