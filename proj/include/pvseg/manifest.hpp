#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pvseg/network.hpp"

namespace pvseg {

inline constexpr const char* kToolVersion = "0.1.0";

/// Everything needed to reproduce and summarize one segmentation run.
struct RunManifest {
  TrainConfig config;
  std::vector<std::string> inputs;
  std::string output_dir;
  std::string tool_version = kToolVersion;
  std::string stop_reason;
  int iterations_run = 0;
  int unique_clusters_final = 0;
  double wall_seconds = 0;
  std::optional<double> loss_first;
  std::optional<double> loss_last;
  bool partial = false;  // run ended in numeric failure
  std::string message;

  bool operator==(const RunManifest&) const = default;
};

std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(std::string_view text);

void save_manifest(const RunManifest& m, const std::filesystem::path& path);
RunManifest load_manifest(const std::filesystem::path& path);

std::string to_string(LossReduction r);
LossReduction parse_loss_reduction(std::string_view s);

}  // namespace pvseg
