#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stmgt/tensor.hpp"

namespace stmgt {

/// The four zone relations, in canonical order.
enum class Relation : int { SpatialAdjacency = 0, Functional = 1, Demographic = 2, TransportSupply = 3 };

inline constexpr std::array<Relation, 4> kAllRelations{
    Relation::SpatialAdjacency, Relation::Functional, Relation::Demographic, Relation::TransportSupply};

const char* relation_name(Relation r);
/// Accepts the names produced by relation_name; ConfigError otherwise.
Relation parse_relation(const std::string& name);

inline constexpr double kDefaultSimilarityThreshold = 0.8;

/// Zone attributes used for a similarity graph: N zones by m features.
struct ZoneFeatureTable {
  std::vector<std::string> zone_ids;
  std::size_t n_features = 0;
  std::vector<double> values;  // row-major N x m

  std::size_t n_zones() const { return zone_ids.size(); }
  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * n_features, n_features};
  }
  /// Reorders rows so zone ids are lexicographically sorted.
  void sort_by_zone();
};

/// Unweighted, undirected zone graph without self-loops.
struct ZoneGraph {
  Relation kind = Relation::SpatialAdjacency;
  std::vector<std::string> zone_ids;
  std::size_t n = 0;
  std::vector<std::uint8_t> adjacency;  // N x N, entries 0/1

  std::uint8_t edge(std::size_t i, std::size_t j) const { return adjacency[i * n + j]; }
  std::size_t edge_count() const;  // undirected edges
  double density() const;          // edges / (N choose 2)
  /// Throws ContractError unless symmetric, binary and zero-diagonal.
  void validate() const;
};

/// Symmetric-normalised self-looped adjacency D^-1/2 (A + I) D^-1/2.
struct NormalizedGraph {
  Relation kind = Relation::SpatialAdjacency;
  std::size_t n = 0;
  std::vector<double> a_hat;

  double at(std::size_t i, std::size_t j) const { return a_hat[i * n + j]; }
  Tensor tensor() const { return Tensor({n, n}, a_hat); }
  /// Relabels nodes: result(i, j) = this(perm[i], perm[j]).
  NormalizedGraph permuted(std::span<const std::size_t> perm) const;
};

/// Ordered normalised graphs sharing one zone ordering.
struct RelationSet {
  std::vector<std::string> zone_ids;
  std::vector<NormalizedGraph> graphs;
  double threshold = kDefaultSimilarityThreshold;

  std::size_t size() const { return graphs.size(); }
  std::size_t n_nodes() const { return graphs.empty() ? zone_ids.size() : graphs.front().n; }
  std::vector<Relation> kinds() const;
  bool contains(Relation r) const;
  /// Copy without relation r.
  RelationSet without(Relation r) const;
};

/// Sample Pearson correlation. Zero-variance input gives 0.
double pearson(std::span<const double> u, std::span<const double> v);

/// Edge (i, j), i != j, iff pearson(row_i, row_j) > threshold.
ZoneGraph build_similarity_graph(const ZoneFeatureTable& features, double threshold, Relation kind);

/// Symmetric binary adjacency from an undirected edge list over `zone_ids`.
/// Duplicates and reversed pairs collapse; self-pairs are ignored.
ZoneGraph build_adjacency_graph(const std::vector<std::pair<std::string, std::string>>& edges,
                                const std::vector<std::string>& zone_ids);

NormalizedGraph normalize(const ZoneGraph& g);

/// Normalises each graph and orders them canonically.
RelationSet fuse(const std::vector<ZoneGraph>& graphs, double threshold = kDefaultSimilarityThreshold);

// ---- file formats ----

/// CSV: `zone_id,<feature>...`. Rows come back sorted by zone id.
ZoneFeatureTable read_zone_features(const std::string& path);

/// CSV: `zone_a,zone_b`.
std::vector<std::pair<std::string, std::string>> read_edge_list(const std::string& path);

/// Writes `<relation>.csv` (dense N x N, 17 significant digits) per relation
/// plus `manifest.json` (relation order, N, threshold, zone ids).
void export_relation_set(const RelationSet& relations, const std::string& dir);
RelationSet load_relation_set(const std::string& dir);

}  // namespace stmgt
