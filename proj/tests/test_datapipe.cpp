#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>

#include "doctest.h"
#include "tsal/common.hpp"
#include "tsal/datapipe.hpp"

using namespace tsal;
namespace fs = std::filesystem;

namespace {

// Top-down reference: components of threshold graphs over mutual
// reachability, condensed and selected directly from the definitions.
std::vector<int> hdbscan_oracle(const std::vector<SphPoint>& pts, int mcs, int ms) {
  const std::size_t n = pts.size();
  std::vector<int> labels(n, -1);
  if (n < static_cast<std::size_t>(ms) || n < 2) return labels;
  std::vector<std::vector<double>> D(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) D[i][j] = i == j ? 0.0 : haversine(pts[i], pts[j]);
  std::vector<double> core(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = D[i];
    std::sort(row.begin(), row.end());
    core[i] = row[ms - 1];
  }
  auto M = [&](std::size_t i, std::size_t j) { return std::max({core[i], core[j], D[i][j]}); };

  using Set = std::vector<std::size_t>;
  auto components = [&](const Set& s, const std::function<bool(double)>& keep) {
    std::vector<Set> out;
    std::vector<bool> seen(s.size(), false);
    for (std::size_t a = 0; a < s.size(); ++a) {
      if (seen[a]) continue;
      Set comp{s[a]};
      std::vector<std::size_t> queue{a};
      seen[a] = true;
      while (!queue.empty()) {
        const std::size_t u = queue.back();
        queue.pop_back();
        for (std::size_t b = 0; b < s.size(); ++b)
          if (!seen[b] && keep(M(s[u], s[b]))) {
            seen[b] = true;
            queue.push_back(b);
            comp.push_back(s[b]);
          }
      }
      out.push_back(comp);
    }
    return out;
  };
  auto level = [&](const Set& s) {
    if (s.size() < 2) return 0.0;
    std::set<double> ws;
    for (std::size_t a : s)
      for (std::size_t b : s)
        if (a != b) ws.insert(M(a, b));
    for (double t : ws)
      if (components(s, [t](double w) { return w <= t; }).size() == 1) return t;
    return *ws.rbegin();
  };
  auto lam = [](double e) { return 1.0 / std::max(e, 1e-12); };

  struct C {
    double birth, stab = 0;
    Set pts;
    std::vector<int> kids;
  };
  std::vector<C> cl;
  std::function<void(const Set&, int)> process = [&](const Set& s, int c) {
    const double eps = level(s);
    const double l = lam(eps);
    const auto kids = components(s, [eps](double w) { return w < eps; });
    std::vector<Set> big;
    for (const auto& k : kids) {
      if (k.size() >= static_cast<std::size_t>(mcs))
        big.push_back(k);
      else
        cl[c].stab += k.size() * (l - cl[c].birth);
    }
    if (big.size() == 1) {
      process(big[0], c);
    } else if (big.size() >= 2) {
      for (const auto& b : big) {
        cl[c].stab += b.size() * (l - cl[c].birth);
        cl.push_back({l, 0, b, {}});
        const int d = static_cast<int>(cl.size()) - 1;
        cl[c].kids.push_back(d);
        process(b, d);
      }
    }
  };
  Set all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  cl.push_back({0.0, 0, all, {}});
  process(all, 0);

  std::vector<int> chosen;
  std::function<double(int, std::vector<int>&)> select = [&](int c, std::vector<int>& picked) {
    std::vector<int> below;
    double sum = 0;
    for (int k : cl[c].kids) sum += select(k, below);
    if (c != 0 && (cl[c].kids.empty() || cl[c].stab >= sum)) {
      picked.push_back(c);
      return cl[c].stab;
    }
    picked.insert(picked.end(), below.begin(), below.end());
    return sum;
  };
  select(0, chosen);
  std::vector<std::pair<std::size_t, int>> order;
  for (int c : chosen) order.emplace_back(*std::min_element(cl[c].pts.begin(), cl[c].pts.end()), c);
  std::sort(order.begin(), order.end());
  for (std::size_t k = 0; k < order.size(); ++k)
    for (std::size_t p : cl[order[k].second].pts) labels[p] = static_cast<int>(k);
  return labels;
}

std::vector<SphPoint> cap(Rng& rng, SphPoint center, double radius_deg, int count) {
  std::vector<SphPoint> out;
  const Vec3 c = to_unit(center);
  while (static_cast<int>(out.size()) < count) {
    const SphPoint p{std::asin(rng.uniform(-1, 1)), rng.uniform(-kPi, kPi)};
    const Vec3 u = to_unit(p);
    if (std::acos(std::clamp(u.x * c.x + u.y * c.y + u.z * c.z, -1.0, 1.0)) <= deg2rad(radius_deg)) out.push_back(p);
  }
  return out;
}

std::vector<SphPoint> clustered_instance(Rng& rng, int n) {
  std::vector<SphPoint> pts;
  const int groups = 1 + static_cast<int>(rng.below(4));
  while (static_cast<int>(pts.size()) < n) {
    const SphPoint c{rng.uniform(-1.2, 1.2), rng.uniform(-kPi, kPi)};
    const int k = std::min(n - static_cast<int>(pts.size()), 2 + static_cast<int>(rng.below(n / groups + 2)));
    for (const auto& p : cap(rng, c, rng.uniform(3, 25), k)) pts.push_back(p);
  }
  return pts;
}

FrameCluster fc(double lat_deg, double lon_deg, std::size_t tag) {
  return {{deg2rad(lat_deg), deg2rad(lon_deg)}, {tag}};
}

}  // namespace

TEST_CASE("hdbscan finds two antipodal caps") {
  Rng rng(1);
  auto pts = cap(rng, {0.3, 0.5}, 5.0, 50);
  for (const auto& p : cap(rng, {-0.3, 0.5 - kPi}, 5.0, 50)) pts.push_back(p);
  const auto r = hdbscan(pts, 10, 5);
  CHECK(r.clusters == 2);
  int noise = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    noise += r.labels[i] < 0;
    if (r.labels[i] >= 0) CHECK(r.labels[i] == (i < 50 ? 0 : 1));
  }
  CHECK(noise == 0);
}

TEST_CASE("hdbscan single cap needs the single-cluster option") {
  Rng rng(4);
  const auto pts = cap(rng, {0.2, 1.0}, 5.0, 60);
  CHECK(hdbscan(pts, 10, 5, true).clusters == 1);
  for (int l : hdbscan(pts, 10, 5, true).labels) CHECK(l == 0);
  // two separated caps still beat the root
  auto two = pts;
  for (const auto& p : cap(rng, {-0.2, -1.5}, 5.0, 60)) two.push_back(p);
  CHECK(hdbscan(two, 10, 5, true).clusters == 2);
  CHECK(hdbscan(two, 10, 5, true).labels == hdbscan(two, 10, 5).labels);
}

TEST_CASE("hdbscan with too few points is all noise") {
  const std::vector<SphPoint> pts{{0, 0}, {0.01, 0}, {0, 0.01}};
  const auto r = hdbscan(pts, 2, 5);
  CHECK(r.clusters == 0);
  for (int l : r.labels) CHECK(l == -1);
  CHECK_THROWS_AS(hdbscan(pts, 1, 1), ConfigError);
}

TEST_CASE("hdbscan matches the threshold-graph oracle") {
  Rng rng(2024);
  int with_clusters = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const int n = 8 + static_cast<int>(rng.below(23));
    const auto pts = clustered_instance(rng, n);
    const int mcs = 2 + static_cast<int>(rng.below(5));
    const int ms = 1 + static_cast<int>(rng.below(5));
    const auto got = hdbscan(pts, mcs, ms).labels;
    const auto want = hdbscan_oracle(pts, mcs, ms);
    INFO("instance " << inst << " n=" << n << " mcs=" << mcs << " ms=" << ms);
    CHECK(got == want);
    with_clusters += *std::max_element(want.begin(), want.end()) >= 0;
  }
  CHECK(with_clusters >= 10);
}

TEST_CASE("hdbscan groups equal-distance merges") {
  // evenly spaced points on the equator: every neighbour link ties
  std::vector<SphPoint> pts;
  for (int i = 0; i < 12; ++i) pts.push_back({0.0, -kPi + i * kPi / 48});
  for (int i = 0; i < 12; ++i) pts.push_back({0.0, i * kPi / 48});
  for (int ms : {1, 2, 3})
    for (int mcs : {2, 3, 5}) CHECK(hdbscan(pts, mcs, ms).labels == hdbscan_oracle(pts, mcs, ms));
}

TEST_CASE("hdbscan partitions are invariant to input order") {
  Rng rng(5);
  for (int inst = 0; inst < 5; ++inst) {
    auto pts = clustered_instance(rng, 40);
    const auto a = hdbscan(pts, 4, 3).labels;
    std::vector<std::size_t> perm(pts.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<SphPoint> shuffled;
    for (std::size_t p : perm) shuffled.push_back(pts[p]);
    const auto b = hdbscan(shuffled, 4, 3).labels;
    std::map<int, int> map;
    for (std::size_t k = 0; k < perm.size(); ++k) {
      const int la = a[perm[k]], lb = b[k];
      CHECK((la < 0) == (lb < 0));
      if (la < 0) continue;
      auto [it, fresh] = map.emplace(la, lb);
      CHECK(it->second == lb);
    }
  }
}

TEST_CASE("subvolumes: stationary and parallel clusters") {
  std::vector<std::vector<FrameCluster>> one(10, {fc(10, 20, 1)});
  auto ev = form_subvolumes(one, deg2rad(15), 8);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0].start == 0);
  CHECK(ev[0].end == 9);

  std::vector<std::vector<FrameCluster>> two(10, {fc(0, 0, 1), fc(0, 90, 2)});
  ev = form_subvolumes(two, deg2rad(15), 8);
  REQUIRE(ev.size() == 2);
  for (const auto& e : ev) CHECK(e.length() == 10);
  CHECK(ev[0].members[3] == std::vector<std::size_t>{1});
  CHECK(ev[1].members[3] == std::vector<std::size_t>{2});
}

TEST_CASE("subvolumes bridge gaps of at most gap_fill frames") {
  const int gap = 3;
  auto seq = [&](int missing) {
    std::vector<std::vector<FrameCluster>> frames;
    for (int f = 0; f < 4; ++f) frames.push_back({fc(0, 0, 7)});
    for (int f = 0; f < missing; ++f) frames.push_back({});
    for (int f = 0; f < 4; ++f) frames.push_back({fc(0, 8, 9)});
    return frames;
  };
  auto ev = form_subvolumes(seq(gap), deg2rad(15), gap);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0].length() == 4 + gap + 4);
  for (int f = 4; f < 4 + gap; ++f) {
    CHECK(ev[0].bridged[f]);
    CHECK(ev[0].members[f] == std::vector<std::size_t>{7});
    CHECK(rad2deg(ev[0].centroids[f].lon) == doctest::Approx(8.0 * (f - 3) / (gap + 1)).epsilon(1e-6));
  }
  CHECK_FALSE(ev[0].bridged[4 + gap]);
  CHECK(form_subvolumes(seq(gap + 1), deg2rad(15), gap).size() == 2);
}

TEST_CASE("subvolume assignment is exclusive") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<FrameCluster>> frames(15);
    std::size_t tag = 0;
    for (auto& f : frames) {
      const int k = static_cast<int>(rng.below(4));
      for (int c = 0; c < k; ++c) f.push_back(fc(rng.uniform(-20, 20), rng.uniform(-30, 30), tag++));
    }
    const auto ev = form_subvolumes(frames, deg2rad(15), 2);
    std::map<std::size_t, int> uses;
    for (const auto& e : ev)
      for (std::size_t k = 0; k < e.members.size(); ++k)
        if (!e.bridged[k]) ++uses[e.members[k][0]];
    CHECK(uses.size() == tag);
    for (const auto& [t, u] : uses) CHECK(u == 1);
  }
}

TEST_CASE("split_event_maps") {
  const ErpGrid grid{32, 64};
  std::vector<Fixation> fx{{{0.0, -1.0}, 1.0}, {{0.2, 1.0}, 1.0}};
  const auto gt = spherical_gaussian_smooth(fx, grid, 5.0);

  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt.values[i] > 0.0f) support.push_back(i);
  const auto whole = split_event_maps(gt, {support}, 5.0);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0].values == gt.values);

  std::vector<std::size_t> west, east;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt.values[i] >= 0.3f) ((i % 64) < 32 ? west : east).push_back(i);
  REQUIRE(!west.empty());
  REQUIRE(!east.empty());
  const auto parts = split_event_maps(gt, {west, east}, 5.0, false);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    CHECK((parts[0].values[i] == 0.0f || parts[1].values[i] == 0.0f));
    if (gt.values[i] >= 0.3f) CHECK(parts[0].values[i] + parts[1].values[i] == gt.values[i]);
  }
  CHECK_THROWS_AS(split_event_maps(gt, {west, {}}, 5.0), Error);
}

TEST_CASE("window shift counts") {
  SalientEvent e;
  e.start = 3;
  e.end = 10;
  CHECK(window_shift_augment(e, 8).size() == 1);
  e.end = 14;
  const auto t = window_shift_augment(e, 8);
  CHECK(t.size() == 5);
  for (const auto& x : t) CHECK((x.gt_frame() >= e.start && x.gt_frame() <= e.end && x.window_start >= e.start));
  e.end = 5;
  CHECK_THROWS_AS(window_shift_augment(e, 8), Error);

  Rng rng(3);
  for (int k = 0; k < 1000; ++k) {
    const int F = 1 + static_cast<int>(rng.below(16));
    SalientEvent r;
    r.start = static_cast<int>(rng.below(100));
    r.end = r.start + F - 1 + static_cast<int>(rng.below(200));
    CHECK(window_shift_augment(r, F).size() == static_cast<std::size_t>(r.length() - F + 1));
  }
}

TEST_CASE("kfold split") {
  std::vector<std::string> ids;
  for (int i = 0; i < 160; ++i) ids.push_back("video" + std::to_string(i));
  const auto a = kfold_split(ids, 5, 42);
  REQUIRE(a.folds.size() == 5);
  std::set<std::string> all;
  for (const auto& f : a.folds) {
    CHECK(f.size() == 32);
    all.insert(f.begin(), f.end());
  }
  CHECK(all.size() == 160);
  CHECK(kfold_split(ids, 5, 42).folds == a.folds);
  CHECK(kfold_split(ids, 5, 43).folds != a.folds);

  ids.resize(17);
  const auto b = kfold_split(ids, 5, 1);
  std::size_t lo = 99, hi = 0;
  for (const auto& f : b.folds) lo = std::min(lo, f.size()), hi = std::max(hi, f.size());
  CHECK(hi - lo <= 1);
  ids.push_back(ids[0]);
  CHECK_THROWS_AS(kfold_split(ids, 5, 1), Error);

  const auto path = fs::temp_directory_path() / "tsal_folds.json";
  write_folds(path, a);
  CHECK(read_folds(path).folds == a.folds);
}

namespace {

void write_video(const fs::path& dir, int frames, bool captions) {
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "fixations");
  for (int f = 0; f < frames; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "%04d.png", f);
    Image img(3, 32, 64, 0.2f);
    write_png_rgb(dir / "frames" / name, img);
    SaliencyMap fix(32, 64);
    fix.at(10, 20 + f / 4) = 1.0f;
    fix.at(20, 50) = 1.0f;
    write_png_gray(dir / "fixations" / name, fix);
  }
  if (captions) {
    std::ofstream os(dir / "captions.tsv");
    os << "0\ta person walking\n";
  }
}

}  // namespace

TEST_CASE("dataset build writes the store and manifest") {
  const auto root = fs::temp_directory_path() / "tsal_dataset_build";
  fs::remove_all(root);
  write_video(root / "videos" / "alpha", 12, true);
  write_video(root / "videos" / "beta", 12, false);
  PipelineConfig cfg;
  cfg.frames = 4;
  cfg.min_cluster_size = 5;
  cfg.min_samples = 3;
  const auto summary = build_dataset(root / "videos", root / "store", cfg);
  REQUIRE(summary.videos.size() == 1);
  REQUIRE(summary.skipped.size() == 1);
  CHECK(summary.skipped[0].first == "beta");
  const auto& v = summary.videos[0];
  CHECK(v.events_found == 2);
  CHECK(v.discarded_no_caption == 1);
  CHECK(v.triplets == 12 - 4 + 1);
  CHECK(fs::exists(root / "store" / "manifest.json"));
  CHECK(fs::exists(root / "store" / "alpha" / "0" / "0.gt.png"));

  const auto triplets = read_triplet_store(root / "store" / "manifest.json");
  REQUIRE(triplets.size() == 9);
  CHECK(triplets[0].frames.size() == 4);
  CHECK(triplets[0].text == "a person walking");
  const auto gt = read_png_gray(triplets[8].gt);
  CHECK(gt.height == 32);
  // the event map keeps the walking fixation and drops the other one
  CHECK(gt.at(10, 22) == 1.0f);
  CHECK(gt.at(20, 50) == 0.0f);
}
