#include "stmgt/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stmgt/csv.hpp"
#include "stmgt/error.hpp"

namespace stmgt {

const char* relation_name(Relation r) {
  switch (r) {
    case Relation::SpatialAdjacency: return "spatial_adjacency";
    case Relation::Functional: return "functional";
    case Relation::Demographic: return "demographic";
    case Relation::TransportSupply: return "transport_supply";
  }
  return "?";
}

Relation parse_relation(const std::string& name) {
  for (auto r : kAllRelations)
    if (name == relation_name(r)) return r;
  throw ConfigError("unknown relation '" + name +
                    "' (expected spatial_adjacency, functional, demographic or transport_supply)");
}

void ZoneFeatureTable::sort_by_zone() {
  std::vector<std::size_t> order(zone_ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return zone_ids[a] < zone_ids[b]; });
  std::vector<std::string> ids;
  std::vector<double> vals;
  for (auto i : order) {
    ids.push_back(zone_ids[i]);
    auto r = row(i);
    vals.insert(vals.end(), r.begin(), r.end());
  }
  zone_ids = std::move(ids);
  values = std::move(vals);
}

std::size_t ZoneGraph::edge_count() const {
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) count += edge(i, j);
  return count;
}

double ZoneGraph::density() const {
  if (n < 2) return 0.0;
  return static_cast<double>(edge_count()) / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

void ZoneGraph::validate() const {
  if (adjacency.size() != n * n) throw ContractError("zone graph: adjacency is not N x N");
  for (std::size_t i = 0; i < n; ++i) {
    if (edge(i, i) != 0) throw ContractError("zone graph: non-zero diagonal at node " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      if (edge(i, j) > 1) throw ContractError("zone graph: non-binary entry");
      if (edge(i, j) != edge(j, i))
        throw ContractError("zone graph: asymmetric entry (" + std::to_string(i) + ", " +
                            std::to_string(j) + ")");
    }
  }
}

NormalizedGraph NormalizedGraph::permuted(std::span<const std::size_t> perm) const {
  if (perm.size() != n) throw DimensionError("permutation length does not match graph size");
  NormalizedGraph out{kind, n, std::vector<double>(n * n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.a_hat[i * n + j] = at(perm[i], perm[j]);
  return out;
}

std::vector<Relation> RelationSet::kinds() const {
  std::vector<Relation> k;
  for (const auto& g : graphs) k.push_back(g.kind);
  return k;
}

bool RelationSet::contains(Relation r) const {
  return std::any_of(graphs.begin(), graphs.end(), [r](const auto& g) { return g.kind == r; });
}

RelationSet RelationSet::without(Relation r) const {
  RelationSet out = *this;
  std::erase_if(out.graphs, [r](const auto& g) { return g.kind == r; });
  return out;
}

double pearson(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw DimensionError("pearson: length mismatch " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  if (u.size() < 2) throw ContractError("pearson: need at least 2 observations");
  const auto n = static_cast<double>(u.size());
  double mu = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    mu += u[i];
    mv += v[i];
  }
  mu /= n;
  mv /= n;
  double cov = 0.0, su = 0.0, sv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double du = u[i] - mu, dv = v[i] - mv;
    cov += du * dv;
    su += du * du;
    sv += dv * dv;
  }
  if (su == 0.0 || sv == 0.0) return 0.0;
  return std::clamp(cov / std::sqrt(su * sv), -1.0, 1.0);
}

ZoneGraph build_similarity_graph(const ZoneFeatureTable& features, double threshold, Relation kind) {
  const std::size_t n = features.n_zones();
  if (n < 2) throw ContractError("similarity graph needs at least 2 zones, got " + std::to_string(n));
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("similarity threshold must lie in (0, 1), got " + csv::format_double(threshold));
  ZoneGraph g{kind, features.zone_ids, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (pearson(features.row(i), features.row(j)) > threshold)
        g.adjacency[i * n + j] = g.adjacency[j * n + i] = 1;
  return g;
}

ZoneGraph build_adjacency_graph(const std::vector<std::pair<std::string, std::string>>& edges,
                                const std::vector<std::string>& zone_ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < zone_ids.size(); ++i) index.emplace(zone_ids[i], i);
  const std::size_t n = zone_ids.size();
  ZoneGraph g{Relation::SpatialAdjacency, zone_ids, n, std::vector<std::uint8_t>(n * n, 0)};
  auto lookup = [&](const std::string& id) {
    auto it = index.find(id);
    if (it == index.end()) throw IngestionError("edge list references unknown zone id '" + id + "'");
    return it->second;
  };
  for (const auto& [a, b] : edges) {
    const auto i = lookup(a), j = lookup(b);
    if (i == j) continue;
    g.adjacency[i * n + j] = g.adjacency[j * n + i] = 1;
  }
  return g;
}

NormalizedGraph normalize(const ZoneGraph& g) {
  g.validate();
  const std::size_t n = g.n;
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 1.0;  // self-loop
    for (std::size_t j = 0; j < n; ++j) deg += g.edge(i, j);
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  NormalizedGraph out{g.kind, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double a = (i == j) ? 1.0 : static_cast<double>(g.edge(i, j));
      if (a != 0.0) out.a_hat[i * n + j] = inv_sqrt_deg[i] * a * inv_sqrt_deg[j];
    }
  return out;
}

RelationSet fuse(const std::vector<ZoneGraph>& graphs, double threshold) {
  if (graphs.empty()) throw ContractError("fuse: no graphs given");
  const std::size_t n = graphs.front().n;
  std::set<Relation> seen;
  for (const auto& g : graphs) {
    if (g.n != n)
      throw DimensionError("fuse: graph " + std::string(relation_name(g.kind)) + " has " +
                           std::to_string(g.n) + " nodes, expected " + std::to_string(n));
    if (!graphs.front().zone_ids.empty() && !g.zone_ids.empty() && g.zone_ids != graphs.front().zone_ids)
      throw DimensionError("fuse: graph " + std::string(relation_name(g.kind)) +
                           " uses a different zone ordering");
    if (!seen.insert(g.kind).second)
      throw ConfigError("fuse: duplicate relation " + std::string(relation_name(g.kind)));
  }
  RelationSet out;
  out.threshold = threshold;
  for (const auto& g : graphs)
    if (!g.zone_ids.empty()) out.zone_ids = g.zone_ids;
  for (auto r : kAllRelations)
    for (const auto& g : graphs)
      if (g.kind == r) out.graphs.push_back(normalize(g));
  return out;
}

ZoneFeatureTable read_zone_features(const std::string& path) {
  auto table = csv::read(path);
  if (table.header.empty() || table.header.front() != "zone_id")
    throw IngestionError(path + ": first column must be 'zone_id'");
  if (table.header.size() < 2) throw IngestionError(path + ": no feature columns");
  ZoneFeatureTable out;
  out.n_features = table.header.size() - 1;
  std::set<std::string> ids;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row[0].empty())
      throw IngestionError(path + ":" + std::to_string(table.line_numbers[r]) + ": empty zone_id");
    if (!ids.insert(row[0]).second)
      throw IngestionError(path + ":" + std::to_string(table.line_numbers[r]) + ": duplicate zone_id '" +
                           row[0] + "'");
    out.zone_ids.push_back(row[0]);
    for (std::size_t c = 1; c < row.size(); ++c) out.values.push_back(csv::to_double(row[c], table, r));
  }
  out.sort_by_zone();
  return out;
}

std::vector<std::pair<std::string, std::string>> read_edge_list(const std::string& path) {
  auto table = csv::read(path);
  const auto a = table.column("zone_a");
  const auto b = table.column("zone_b");
  std::vector<std::pair<std::string, std::string>> edges;
  for (const auto& row : table.rows) edges.emplace_back(row[a], row[b]);
  return edges;
}

void export_relation_set(const RelationSet& relations, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "stmgt-relations";
  manifest["version"] = 1;
  manifest["n_nodes"] = relations.n_nodes();
  manifest["threshold"] = relations.threshold;
  manifest["zone_ids"] = relations.zone_ids;
  manifest["relations"] = nlohmann::json::array();
  for (const auto& g : relations.graphs) {
    std::string name = relation_name(g.kind);
    manifest["relations"].push_back(name);
    std::string text;
    for (std::size_t i = 0; i < g.n; ++i) {
      for (std::size_t j = 0; j < g.n; ++j) {
        if (j) text += ',';
        text += csv::format_double(g.at(i, j));
      }
      text += '\n';
    }
    csv::write_text(dir + "/" + name + ".csv", text);
  }
  csv::write_text(dir + "/manifest.json", manifest.dump(2) + "\n");
}

RelationSet load_relation_set(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw IngestionError("cannot open " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(dir + "/manifest.json: " + e.what());
  }
  RelationSet out;
  try {
    out.threshold = manifest.at("threshold").get<double>();
    out.zone_ids = manifest.at("zone_ids").get<std::vector<std::string>>();
    const auto n = manifest.at("n_nodes").get<std::size_t>();
    if (out.zone_ids.size() != n) throw IngestionError(dir + "/manifest.json: zone_ids length differs from n_nodes");
    for (const auto& name : manifest.at("relations")) {
      const auto kind = parse_relation(name.get<std::string>());
      const std::string path = dir + "/" + name.get<std::string>() + ".csv";
      std::ifstream f(path);
      if (!f) throw IngestionError("cannot open " + path);
      NormalizedGraph g{kind, n, {}};
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t cols = 0;
        while (std::getline(ss, cell, ',')) {
          auto table = csv::Table{};
          table.source = path;
          table.line_numbers = {line_no};
          g.a_hat.push_back(csv::to_double(cell, table, 0));
          ++cols;
        }
        if (cols != n) throw IngestionError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(n) + " columns");
      }
      if (g.a_hat.size() != n * n) throw IngestionError(path + ": expected " + std::to_string(n) + " rows");
      out.graphs.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(dir + "/manifest.json: " + e.what());
  }
  return out;
}

}  // namespace stmgt
