#include <algorithm>
#include <limits>
#include <map>
#include <numeric>

#include "tsal/common.hpp"
#include "tsal/datapipe.hpp"

namespace tsal {

namespace {

struct Dsu {
  std::vector<std::size_t> parent;
  explicit Dsu(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

// Single-linkage node: leaves are points, internal nodes join two or more
// children at distance eps.
struct HNode {
  double eps = 0.0;
  std::vector<std::size_t> children;
  std::size_t size = 1;
};

struct Condensed {
  double birth = 0.0;  // lambda
  double stability = 0.0;
  std::vector<std::size_t> points;  // all members at birth
  std::vector<std::size_t> children;
  int parent = -1;
};

constexpr double kMinEps = 1e-12;

double lambda_of(double eps) { return 1.0 / std::max(eps, kMinEps); }

}  // namespace

HdbscanResult hdbscan(std::span<const SphPoint> points, int min_cluster_size, int min_samples,
                      bool allow_single_cluster) {
  if (min_cluster_size < 2) throw ConfigError("min_cluster_size must be at least 2");
  if (min_samples < 1) throw ConfigError("min_samples must be at least 1");
  const std::size_t n = points.size();
  HdbscanResult result;
  result.labels.assign(n, -1);
  if (n < static_cast<std::size_t>(min_samples) || n < 2) return result;

  std::vector<double> dist(n * n);
  parallel_for(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) dist[i * n + j] = i == j ? 0.0 : haversine(points[i], points[j]);
  });

  std::vector<double> core(n);
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> row(dist.begin() + static_cast<std::ptrdiff_t>(i * n),
                            dist.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    std::nth_element(row.begin(), row.begin() + (min_samples - 1), row.end());
    core[i] = row[min_samples - 1];
  });
  auto mreach = [&](std::size_t i, std::size_t j) { return std::max({core[i], core[j], dist[i * n + j]}); };

  // Prim
  struct Edge {
    double w;
    std::size_t a, b;
  };
  std::vector<Edge> mst;
  mst.reserve(n - 1);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> from(n, 0);
  std::vector<bool> in(n, false);
  std::size_t cur = 0;
  in[0] = true;
  for (std::size_t k = 1; k < n; ++k) {
    std::size_t next = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (in[j]) continue;
      const double w = mreach(cur, j);
      if (w < best[j]) {
        best[j] = w;
        from[j] = cur;
      }
      if (next == n || best[j] < best[next]) next = j;
    }
    in[next] = true;
    mst.push_back({best[next], from[next], next});
    cur = next;
  }
  std::sort(mst.begin(), mst.end(), [](const Edge& x, const Edge& y) { return x.w < y.w; });

  // hierarchy with equal-weight merges grouped
  std::vector<HNode> nodes(n);
  Dsu dsu(n);
  std::vector<std::size_t> node_of(n);
  std::iota(node_of.begin(), node_of.end(), std::size_t{0});
  for (std::size_t g = 0; g < mst.size();) {
    std::size_t e = g;
    while (e < mst.size() && mst[e].w == mst[g].w) ++e;
    std::map<std::size_t, std::size_t> local;  // dsu root -> local id
    std::vector<std::size_t> roots;
    auto id_of = [&](std::size_t r) {
      auto [it, fresh] = local.emplace(r, roots.size());
      if (fresh) roots.push_back(r);
      return it->second;
    };
    std::vector<std::pair<std::size_t, std::size_t>> links;
    for (std::size_t k = g; k < e; ++k) links.emplace_back(id_of(dsu.find(mst[k].a)), id_of(dsu.find(mst[k].b)));
    Dsu group(roots.size());
    for (auto [a, b] : links) group.unite(a, b);
    std::map<std::size_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < roots.size(); ++i) members[group.find(i)].push_back(i);
    for (auto& [gid, ids] : members) {
      if (ids.size() < 2) continue;
      HNode node;
      node.eps = mst[g].w;
      node.size = 0;
      for (std::size_t i : ids) {
        node.children.push_back(node_of[roots[i]]);
        node.size += nodes[node_of[roots[i]]].size;
      }
      for (std::size_t i = 1; i < ids.size(); ++i) dsu.unite(roots[ids[i]], roots[ids[0]]);
      node_of[dsu.find(roots[ids[0]])] = nodes.size();
      nodes.push_back(std::move(node));
    }
    g = e;
  }
  const std::size_t root = nodes.size() - 1;

  auto leaves = [&](std::size_t x) {
    std::vector<std::size_t> out, stack{x};
    while (!stack.empty()) {
      const std::size_t y = stack.back();
      stack.pop_back();
      if (y < n)
        out.push_back(y);
      else
        for (std::size_t c : nodes[y].children) stack.push_back(c);
    }
    return out;
  };

  // condensed tree, top down
  const std::size_t mcs = static_cast<std::size_t>(min_cluster_size);
  std::vector<Condensed> clusters;
  clusters.push_back({0.0, 0.0, leaves(root), {}, -1});
  struct Work {
    std::size_t node;
    std::size_t cluster;
  };
  std::vector<Work> work{{root, 0}};
  while (!work.empty()) {
    const auto [x, c] = work.back();
    work.pop_back();
    const double lam = lambda_of(nodes[x].eps);
    std::vector<std::size_t> big;
    for (std::size_t ch : nodes[x].children)
      if (nodes[ch].size >= mcs) big.push_back(ch);
    for (std::size_t ch : nodes[x].children) {
      if (nodes[ch].size >= mcs) continue;
      clusters[c].stability += static_cast<double>(nodes[ch].size) * (lam - clusters[c].birth);
    }
    if (big.size() == 1) {
      work.push_back({big[0], c});
    } else if (big.size() >= 2) {
      for (std::size_t ch : big) {
        clusters[c].stability += static_cast<double>(nodes[ch].size) * (lam - clusters[c].birth);
        const std::size_t id = clusters.size();
        clusters.push_back({lam, 0.0, leaves(ch), {}, static_cast<int>(c)});
        clusters[c].children.push_back(id);
        work.push_back({ch, id});
      }
    }
  }

  // excess of mass, children always have larger ids than parents
  std::vector<double> subtree(clusters.size(), 0.0);
  std::vector<bool> selected(clusters.size(), false);
  const std::size_t first = allow_single_cluster ? 0 : 1;
  for (std::size_t c = clusters.size(); c-- > first;) {
    double child_sum = 0.0;
    for (std::size_t ch : clusters[c].children) child_sum += subtree[ch];
    if (clusters[c].children.empty() || clusters[c].stability >= child_sum) {
      selected[c] = true;
      subtree[c] = clusters[c].stability;
      std::vector<std::size_t> stack(clusters[c].children.begin(), clusters[c].children.end());
      while (!stack.empty()) {
        const std::size_t d = stack.back();
        stack.pop_back();
        selected[d] = false;
        for (std::size_t e2 : clusters[d].children) stack.push_back(e2);
      }
    } else {
      subtree[c] = child_sum;
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> order;  // first point, cluster
  for (std::size_t c = first; c < clusters.size(); ++c)
    if (selected[c])
      order.emplace_back(*std::min_element(clusters[c].points.begin(), clusters[c].points.end()), c);
  std::sort(order.begin(), order.end());
  for (std::size_t k = 0; k < order.size(); ++k)
    for (std::size_t p : clusters[order[k].second].points) result.labels[p] = static_cast<int>(k);
  result.clusters = static_cast<int>(order.size());
  return result;
}

}  // namespace tsal
