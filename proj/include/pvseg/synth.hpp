#pragma once

// Synthetic thermal PV scenes with per-pixel ground truth, and the overlap
// metrics used to score a label map against them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "pvseg/imaging.hpp"
#include "pvseg/network.hpp"

namespace pvseg {

enum class PixelClass : int { background = 0, panel = 1, hotspot = 2, snail_trail = 3 };

std::string to_string(PixelClass c);

struct Point {
  double x = 0;
  double y = 0;
};

/// Radial Gaussian bright blob; pixels within `radius` of the center belong to it.
struct Hotspot {
  Point center;
  double radius = 1;
  double peak = 0.75;
};

/// Thin bright ribbon along a polyline; pixels within thickness / 2 belong to it.
struct SnailTrail {
  std::vector<Point> polyline;
  double thickness = 3;
  double intensity = 0.65;
};

/// rows x cols rectangular cells separated by `gap` pixels, top-left at origin.
struct PanelGrid {
  int rows = 0;
  int cols = 0;
  int cell_width = 0;
  int cell_height = 0;
  int gap = 0;
  int origin_x = 0;
  int origin_y = 0;
};

struct SceneSpec {
  int width = 0;
  int height = 0;
  PanelGrid grid;
  double background_level = 0.15;
  double panel_level = 0.45;
  double noise_sigma = 0.02;
  std::vector<Hotspot> hotspots;
  std::vector<SnailTrail> trails;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on out-of-bounds geometry or intensities.
  void validate() const;
};

using PixelMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct GroundTruth {
  LabelMap classes;  // PixelClass values

  PixelMask mask(PixelClass c) const { return classes.array() == static_cast<int>(c); }
  Index count(PixelClass c) const { return mask(c).count(); }
};

struct Scene {
  ImageGray image;
  GroundTruth truth;
};

/// Deterministic in spec (including spec.seed, which drives the noise).
Scene generate_scene(const SceneSpec& spec);

/// Built-in scenes. "hotspots3": a 3 x 4 module grid with three hotspots and
/// one snail trail placed from `seed`. "panels": the same grid, no faults,
/// no noise.
SceneSpec preset_scene(std::string_view name, std::uint64_t seed, int width = 336, int height = 256);

/// Flat `key = value` text; `hotspot` and `trail` keys repeat.
std::string serialize_scene_spec(const SceneSpec& spec);
SceneSpec parse_scene_spec(std::string_view text);
SceneSpec load_scene_spec(const std::filesystem::path& path);

/// |A ∩ B| / |A ∪ B|; two empty sets count as perfect agreement (1.0).
double iou(const PixelMask& a, const PixelMask& b);

struct ClusterScore {
  int cluster = 0;
  double score = 0;
};

/// Cluster whose pixel set best overlaps the pixels of `fault` (ties: lowest
/// id). std::nullopt when the class does not occur in the truth.
std::optional<ClusterScore> best_cluster_iou(const LabelMap& labels, const GroundTruth& truth,
                                             PixelClass fault);

struct DetectionEntry {
  PixelClass fault = PixelClass::hotspot;
  bool detected = false;
  ClusterScore best;
};

/// One entry per fault class (hotspot, snail trail) present in the truth;
/// detected iff its best-cluster IoU >= tau.
std::vector<DetectionEntry> detection_report(const LabelMap& labels, const GroundTruth& truth,
                                             double tau);

}  // namespace pvseg
