#include "tsal/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tsal/common.hpp"

namespace tsal {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- per-frame clustering -------------------------------------------------------

std::vector<FrameCluster> cluster_frame(const SaliencyMap& smoothed, const PipelineConfig& cfg, Rng& rng) {
  const ErpGrid grid{smoothed.height, smoothed.width};
  grid.validate();
  float mx = 0.0f;
  for (float v : smoothed.values) mx = std::max(mx, v);
  if (mx <= 0.0f) return {};
  std::vector<std::size_t> salient;
  for (std::size_t i = 0; i < smoothed.size(); ++i)
    if (smoothed.values[i] / mx >= cfg.threshold) salient.push_back(i);

  auto point_of = [&](std::size_t idx) {
    return erp_pixel_center(grid, static_cast<int>(idx / grid.width), static_cast<int>(idx % grid.width));
  };

  // weighted subsample without replacement (exponential keys)
  std::vector<std::size_t> sample = salient;
  if (salient.size() > cfg.max_points) {
    std::vector<std::pair<double, std::size_t>> keys;
    keys.reserve(salient.size());
    for (std::size_t idx : salient) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      keys.emplace_back(std::log(u) / smoothed.values[idx], idx);
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(cfg.max_points), keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    sample.clear();
    for (std::size_t k = 0; k < cfg.max_points; ++k) sample.push_back(keys[k].second);
    std::sort(sample.begin(), sample.end());
  }
  std::vector<SphPoint> pts;
  pts.reserve(sample.size());
  for (std::size_t idx : sample) pts.push_back(point_of(idx));
  const auto hd = hdbscan(pts, cfg.min_cluster_size, cfg.min_samples, cfg.single_cluster);
  if (hd.clusters == 0) return {};

  // every salient pixel takes the label of its nearest sampled point
  std::vector<int> label(salient.size(), -1);
  parallel_for(salient.size(), [&](std::size_t i) {
    const SphPoint p = point_of(salient[i]);
    double best = 1e9;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const double d = haversine(p, pts[k]);
      if (d < best) {
        best = d;
        label[i] = hd.labels[k];
      }
    }
  });
  std::vector<FrameCluster> out(hd.clusters);
  std::vector<Vec3> acc(hd.clusters);
  for (std::size_t i = 0; i < salient.size(); ++i) {
    if (label[i] < 0) continue;
    auto& c = out[label[i]];
    c.members.push_back(salient[i]);
    const Vec3 u = to_unit(point_of(salient[i]));
    const double w = smoothed.values[salient[i]];
    acc[label[i]].x += w * u.x;
    acc[label[i]].y += w * u.y;
    acc[label[i]].z += w * u.z;
  }
  for (int k = 0; k < hd.clusters; ++k) out[k].centroid = from_unit(acc[k]);
  return out;
}

// ---- sub-volumes ------------------------------------------------------------------

namespace {

// Great-circle interpolation.
SphPoint interpolate(SphPoint a, SphPoint b, double s) {
  const Vec3 u = to_unit(a), v = to_unit(b);
  const double omega = haversine(a, b);
  if (omega < 1e-12) return a;
  const double wa = std::sin((1 - s) * omega) / std::sin(omega), wb = std::sin(s * omega) / std::sin(omega);
  return from_unit({wa * u.x + wb * v.x, wa * u.y + wb * v.y, wa * u.z + wb * v.z});
}

}  // namespace

std::vector<SalientEvent> form_subvolumes(const std::vector<std::vector<FrameCluster>>& per_frame, double tau,
                                          int gap_fill) {
  if (gap_fill < 0) throw ConfigError("gap_fill must be nonnegative");
  std::vector<SalientEvent> events;
  for (int f = 0; f < static_cast<int>(per_frame.size()); ++f) {
    const auto& clusters = per_frame[f];
    struct Cand {
      double d;
      std::size_t event, cluster;
    };
    std::vector<Cand> cands;
    for (std::size_t e = 0; e < events.size(); ++e) {
      const int missing = f - events[e].end - 1;
      if (missing < 0 || missing > gap_fill) continue;
      for (std::size_t c = 0; c < clusters.size(); ++c) {
        const double d = haversine(events[e].centroids.back(), clusters[c].centroid);
        if (d <= tau) cands.push_back({d, e, c});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.event != b.event) return a.event < b.event;
      return a.cluster < b.cluster;
    });
    std::vector<bool> event_used(events.size(), false), cluster_used(clusters.size(), false);
    for (const auto& c : cands) {
      if (event_used[c.event] || cluster_used[c.cluster]) continue;
      event_used[c.event] = cluster_used[c.cluster] = true;
      auto& ev = events[c.event];
      const int gap = f - ev.end - 1;
      const SphPoint from = ev.centroids.back();
      const auto held = ev.members.back();
      for (int g = 1; g <= gap; ++g) {
        ev.centroids.push_back(interpolate(from, clusters[c.cluster].centroid, double(g) / (gap + 1)));
        ev.members.push_back(held);
        ev.bridged.push_back(true);
      }
      ev.centroids.push_back(clusters[c.cluster].centroid);
      ev.members.push_back(clusters[c.cluster].members);
      ev.bridged.push_back(false);
      ev.end = f;
    }
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      if (cluster_used[c]) continue;
      SalientEvent ev;
      ev.id = static_cast<int>(events.size());
      ev.start = ev.end = f;
      ev.centroids.push_back(clusters[c].centroid);
      ev.members.push_back(clusters[c].members);
      ev.bridged.push_back(false);
      events.push_back(std::move(ev));
    }
  }
  return events;
}

// ---- per-event maps ---------------------------------------------------------------

std::vector<SaliencyMap> split_event_maps(const SaliencyMap& gt, const std::vector<std::vector<std::size_t>>& members,
                                          double sigma_deg, bool renormalize) {
  const ErpGrid grid{gt.height, gt.width};
  grid.validate();
  for (std::size_t e = 0; e < members.size(); ++e)
    if (members[e].empty()) throw Error("split_event_maps: event " + std::to_string(e) + " has no member pixels");
  const double r = deg2rad(3.0 * sigma_deg);
  const std::size_t n = gt.size();
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<int> owner(n, -1);
  const double row_h = kPi / grid.height;
  for (std::size_t e = 0; e < members.size(); ++e) {
    for (std::size_t idx : members[e]) {
      if (idx >= n) throw Error("split_event_maps: member pixel out of range");
      const int my = static_cast<int>(idx / grid.width), mx = static_cast<int>(idx % grid.width);
      const SphPoint m = erp_pixel_center(grid, my, mx);
      const int y0 = std::max(0, static_cast<int>(std::floor((kPi / 2 - (m.lat + r)) / row_h)) - 1);
      const int y1 = std::min(grid.height - 1, static_cast<int>(std::ceil((kPi / 2 - (m.lat - r)) / row_h)) + 1);
      for (int y = y0; y <= y1; ++y) {
        const double lat = erp_pixel_center(grid, y, 0).lat;
        int half = grid.width / 2;
        const double denom = std::cos(m.lat) * std::cos(lat);
        if (denom > 1e-12) {
          const double c = (std::cos(r) - std::sin(m.lat) * std::sin(lat)) / denom;
          if (c > 1.0) continue;
          if (c > -1.0) half = static_cast<int>(std::ceil(std::acos(c) / (2 * kPi) * grid.width)) + 1;
        }
        half = std::min(half, grid.width / 2);
        const int hi = half == grid.width / 2 ? half - 1 : half;
        for (int dx = -half; dx <= hi; ++dx) {
          const int x = ((mx + dx) % grid.width + grid.width) % grid.width;
          const std::size_t k = static_cast<std::size_t>(y) * grid.width + x;
          const double d = haversine(m, erp_pixel_center(grid, y, x));
          if (d > r + 1e-12) continue;
          if (d < best[k] || (d == best[k] && static_cast<int>(e) < owner[k])) {
            best[k] = d;
            owner[k] = static_cast<int>(e);
          }
        }
      }
    }
  }
  std::vector<SaliencyMap> out(members.size(), SaliencyMap(gt.height, gt.width));
  for (std::size_t k = 0; k < n; ++k)
    if (owner[k] >= 0) out[owner[k]].values[k] = gt.values[k];
  if (renormalize)
    for (auto& m : out) max_normalize(m);
  return out;
}

// ---- triplets and folds -------------------------------------------------------------

std::vector<EventTriplet> window_shift_augment(const SalientEvent& event, int frames, const std::string& video) {
  if (frames <= 0) throw ConfigError("window length must be positive");
  if (event.length() < frames)
    throw Error("event " + std::to_string(event.id) + " spans " + std::to_string(event.length()) +
                " frames, fewer than the window length " + std::to_string(frames));
  std::vector<EventTriplet> out;
  for (int s = event.start; s + frames - 1 <= event.end; ++s)
    out.push_back({video, event.id, s, frames, event.description});
  return out;
}

FoldSpec kfold_split(std::vector<std::string> ids, int k, std::uint64_t seed) {
  if (k <= 0) throw ConfigError("fold count must be positive");
  if (ids.empty()) throw Error("kfold_split: no video ids");
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw Error("kfold_split: duplicate video id");
  if (static_cast<std::size_t>(k) > ids.size())
    throw Error("kfold_split: " + std::to_string(k) + " folds for " + std::to_string(ids.size()) + " videos");
  Rng rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  FoldSpec spec;
  const std::size_t base = ids.size() / k, extra = ids.size() % k;
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    spec.folds.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                            ids.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return spec;
}

void write_folds(const fs::path& path, const FoldSpec& folds) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << json{{"folds", folds.folds}}.dump(2) << "\n";
}

FoldSpec read_folds(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  try {
    const auto j = json::parse(is);
    return {j.at("folds").get<std::vector<std::vector<std::string>>>()};
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---- dataset build ------------------------------------------------------------------

namespace {

std::vector<fs::path> list_png(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::map<int, std::string> read_captions(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  std::map<int, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": missing tab");
    try {
      out[std::stoi(line.substr(0, tab))] = line.substr(tab + 1);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad event id");
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

}  // namespace

DatasetSummary build_dataset(const fs::path& videos, const fs::path& out, const PipelineConfig& cfg) {
  if (!fs::is_directory(videos)) throw Error("not a directory: " + videos.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(videos))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  fs::create_directories(out);

  DatasetSummary summary;
  json jvideos = json::array(), jtriplets = json::array(), jskipped = json::array();
  for (const auto& dir : dirs) {
    const std::string id = dir.filename().string();
    const auto frames = list_png(dir / "frames");
    const auto fixations = list_png(dir / "fixations");
    auto skip = [&](const std::string& reason) {
      std::cerr << "warning: skipping video " << id << ": " << reason << "\n";
      summary.skipped.emplace_back(id, reason);
      jskipped.push_back({{"id", id}, {"reason", reason}});
    };
    if (!fs::exists(dir / "captions.tsv")) {
      skip("no caption file");
      continue;
    }
    if (frames.empty() || frames.size() != fixations.size()) {
      skip("frame and fixation counts differ");
      continue;
    }
    const auto captions = read_captions(dir / "captions.tsv");
    const int nf = static_cast<int>(frames.size());

    std::vector<SaliencyMap> smoothed(nf);
    parallel_for(nf, [&](std::size_t f) {
      const auto counts = read_png_gray(fixations[f]);
      const auto fx = fixations_from_map(counts);
      smoothed[f] = spherical_gaussian_smooth(fx, ErpGrid{counts.height, counts.width}, cfg.sigma_deg);
    });
    std::vector<std::vector<FrameCluster>> clusters(nf);
    for (int f = 0; f < nf; ++f) {
      Rng rng(fnv1a(id.data(), id.size(), cfg.seed) ^ static_cast<std::uint64_t>(f));
      clusters[f] = cluster_frame(smoothed[f], cfg, rng);
    }
    auto events = form_subvolumes(clusters, deg2rad(cfg.tau_deg), cfg.gap_fill);

    VideoStats st;
    st.id = id;
    st.frames = nf;
    st.events_found = static_cast<int>(events.size());
    std::map<int, std::vector<SaliencyMap>> split_cache;
    auto event_map = [&](int frame, int event) -> const SaliencyMap& {
      auto it = split_cache.find(frame);
      if (it == split_cache.end()) {
        std::vector<std::vector<std::size_t>> mem;
        for (const auto& ev : events)
          if (ev.covers(frame)) mem.push_back(ev.members[frame - ev.start]);
        it = split_cache.emplace(frame, split_event_maps(smoothed[frame], mem, cfg.sigma_deg)).first;
      }
      int k = 0;
      for (const auto& ev : events) {
        if (ev.id == event) break;
        if (ev.covers(frame)) ++k;
      }
      return it->second[k];
    };

    json jevents = json::array();
    for (auto& ev : events) {
      const auto cap = captions.find(ev.id);
      json je{{"id", ev.id}, {"start", ev.start}, {"end", ev.end}, {"triplets", 0}};
      if (cap == captions.end()) {
        ++st.discarded_no_caption;
        je["discarded"] = "no caption";
        jevents.push_back(je);
        continue;
      }
      ev.description = cap->second;
      je["description"] = ev.description;
      if (ev.length() < cfg.frames) {
        ++st.discarded_too_short;
        je["discarded"] = "shorter than window";
        jevents.push_back(je);
        continue;
      }
      const auto triplets = window_shift_augment(ev, cfg.frames, id);
      const fs::path edir = out / id / std::to_string(ev.id);
      fs::create_directories(edir);
      for (const auto& t : triplets) {
        const std::string stem = std::to_string(t.window_start);
        std::ostringstream lst;
        for (int f = t.window_start; f <= t.gt_frame(); ++f) lst << fs::absolute(frames[f]).string() << "\n";
        write_text(edir / (stem + ".frames.lst"), lst.str());
        write_text(edir / (stem + ".text.txt"), t.text);
        write_png_gray(edir / (stem + ".gt.png"), event_map(t.gt_frame(), ev.id));
        jtriplets.push_back({{"video", id}, {"event", ev.id}, {"window_start", t.window_start},
                             {"prefix", (fs::path(id) / std::to_string(ev.id) / stem).generic_string()}});
      }
      st.triplets += static_cast<int>(triplets.size());
      je["triplets"] = triplets.size();
      jevents.push_back(je);
    }
    summary.triplets += st.triplets;
    summary.videos.push_back(st);
    jvideos.push_back({{"id", id},
                       {"frames", st.frames},
                       {"events_found", st.events_found},
                       {"triplets_emitted", st.triplets},
                       {"discarded_events", st.discarded_no_caption + st.discarded_too_short},
                       {"events", jevents}});
  }

  json manifest{{"config",
                 {{"sigma_deg", cfg.sigma_deg},
                  {"threshold", cfg.threshold},
                  {"max_points", cfg.max_points},
                  {"min_cluster_size", cfg.min_cluster_size},
                  {"min_samples", cfg.min_samples},
                  {"single_cluster", cfg.single_cluster},
                  {"tau_deg", cfg.tau_deg},
                  {"gap_fill", cfg.gap_fill},
                  {"frames", cfg.frames},
                  {"seed", cfg.seed}}},
                {"videos", jvideos},
                {"skipped", jskipped},
                {"triplets", jtriplets},
                {"totals", {{"videos", summary.videos.size()}, {"skipped", summary.skipped.size()},
                            {"triplets", summary.triplets}}}};
  std::ofstream os(out / "manifest.json");
  if (!os) throw Error("cannot write manifest in " + out.string());
  os << manifest.dump(2) << "\n";
  return summary;
}

std::vector<StoredTriplet> read_triplet_store(const fs::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw Error("cannot read " + manifest.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
  const fs::path root = manifest.parent_path();
  std::vector<StoredTriplet> out;
  for (const auto& t : j.at("triplets")) {
    const fs::path prefix = root / t.at("prefix").get<std::string>();
    StoredTriplet s;
    s.video = t.at("video").get<std::string>();
    std::ifstream lst(prefix.string() + ".frames.lst");
    if (!lst) throw Error("missing " + prefix.string() + ".frames.lst");
    for (std::string line; std::getline(lst, line);)
      if (!line.empty()) s.frames.emplace_back(line);
    std::ifstream txt(prefix.string() + ".text.txt");
    if (!txt) throw Error("missing " + prefix.string() + ".text.txt");
    std::stringstream ss;
    ss << txt.rdbuf();
    s.text = ss.str();
    s.gt = prefix.string() + ".gt.png";
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tsal
