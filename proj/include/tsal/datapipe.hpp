#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsal/geometry.hpp"
#include "tsal/image.hpp"
#include "tsal/random.hpp"

namespace tsal {

// ---- clustering -------------------------------------------------------------

struct HdbscanResult {
  std::vector<int> labels;  // -1 for noise, clusters numbered by first member index
  int clusters = 0;
};

/// HDBSCAN under the great-circle metric: core distance to the min_samples-th
/// nearest point (counting the point itself), mutual reachability, minimum
/// spanning tree, single-linkage hierarchy (equal-distance merges grouped),
/// condensed tree at min_cluster_size, excess-of-mass selection. The root
/// takes part in the selection only with allow_single_cluster; when it wins,
/// every point belongs to it.
HdbscanResult hdbscan(std::span<const SphPoint> points, int min_cluster_size, int min_samples,
                      bool allow_single_cluster = false);

struct PipelineConfig {
  double sigma_deg = 5.0;
  double threshold = 0.3;        // of the max-normalized smoothed map
  std::size_t max_points = 2000; // per frame, weighted subsample above this
  int min_cluster_size = 25;
  int min_samples = 10;
  bool single_cluster = true;    // a frame with one salient region yields one cluster
  double tau_deg = 15.0;         // centroid matching radius
  int gap_fill = 8;              // frames
  int frames = 8;                // F
  std::uint64_t seed = 0;
};

/// One salient region in one frame. Members are ERP pixel indices (y * W + x).
struct FrameCluster {
  SphPoint centroid;
  std::vector<std::size_t> members;
};

/// Clusters the salient pixels (>= threshold) of a max-normalized map.
std::vector<FrameCluster> cluster_frame(const SaliencyMap& smoothed, const PipelineConfig& cfg, Rng& rng);

// ---- events -----------------------------------------------------------------

struct SalientEvent {
  int id = 0;
  int start = 0;  // first frame
  int end = 0;    // last frame, inclusive
  std::vector<SphPoint> centroids;                // one per frame in [start, end]
  std::vector<std::vector<std::size_t>> members;  // one per frame in [start, end]
  std::vector<bool> bridged;                      // frame filled by interpolation
  std::string description;

  int length() const { return end - start + 1; }
  bool covers(int frame) const { return frame >= start && frame <= end; }
};

/// Greedy frame-to-frame linking: candidate (event, cluster) pairs within tau
/// are taken in order of increasing distance, each side at most once. Events
/// unseen for at most gap_fill frames may still be matched; the gap is filled
/// with interpolated centroids and the last observed members.
std::vector<SalientEvent> form_subvolumes(const std::vector<std::vector<FrameCluster>>& per_frame, double tau,
                                          int gap_fill);

/// Per-event copies of gt restricted to each event's members dilated by
/// 3 sigma. A pixel reached by several events goes to the nearest one.
std::vector<SaliencyMap> split_event_maps(const SaliencyMap& gt,
                                          const std::vector<std::vector<std::size_t>>& members, double sigma_deg,
                                          bool renormalize = true);

// ---- triplets and folds -------------------------------------------------------

struct EventTriplet {
  std::string video;
  int event = 0;
  int window_start = 0;
  int frames = 0;      // F
  std::string text;
  int gt_frame() const { return window_start + frames - 1; }
};

/// One triplet per stride-1 window of F frames lying inside the event span.
std::vector<EventTriplet> window_shift_augment(const SalientEvent& event, int frames, const std::string& video = {});

struct FoldSpec {
  std::vector<std::vector<std::string>> folds;
};

FoldSpec kfold_split(std::vector<std::string> ids, int k, std::uint64_t seed);
void write_folds(const std::filesystem::path& path, const FoldSpec& folds);
FoldSpec read_folds(const std::filesystem::path& path);

// ---- dataset build ------------------------------------------------------------

struct VideoStats {
  std::string id;
  int frames = 0;
  int events_found = 0;
  int triplets = 0;
  int discarded_no_caption = 0;
  int discarded_too_short = 0;
};

struct DatasetSummary {
  std::vector<VideoStats> videos;
  std::vector<std::pair<std::string, std::string>> skipped;  // id, reason
  int triplets = 0;
};

/// Reads `<videos>/<id>/frames/*.png`, `<id>/fixations/*.png` and
/// `<id>/captions.tsv`, writes `<out>/<id>/<event>/<window_start>.{frames.lst,
/// text.txt,gt.png}` and `<out>/manifest.json`.
DatasetSummary build_dataset(const std::filesystem::path& videos, const std::filesystem::path& out,
                             const PipelineConfig& cfg);

struct StoredTriplet {
  std::string video;
  std::vector<std::filesystem::path> frames;
  std::string text;
  std::filesystem::path gt;
};

/// Triplets listed in a manifest written by build_dataset.
std::vector<StoredTriplet> read_triplet_store(const std::filesystem::path& manifest);

}  // namespace tsal
