#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pvseg/losses.hpp"
#include "pvseg/network.hpp"
#include "pvseg/tensor.hpp"

namespace pvseg {

enum class StopReason { iteration_cap, cluster_floor, numeric_failure };

std::string to_string(StopReason reason);

struct SegmentationResult {
  LabelMap final_labels;
  std::vector<LossBreakdown<double>> loss_history;
  int iterations_run = 0;
  int unique_clusters_final = 0;
  StopReason stop_reason = StopReason::iteration_cap;
  std::string failure_message;  // set for numeric_failure
};

using IterationCallback = std::function<void(int iteration, const LossBreakdown<double>&, int clusters)>;

/// Per-image loop: forward, argmax pseudo-labels (held constant), loss,
/// backward, momentum step. Stops after config.max_iterations or as soon as
/// the label map has at most config.q_min distinct ids; the label map of the
/// stopping iteration is returned. Non-finite values end the run with
/// StopReason::numeric_failure and the history up to that point.
SegmentationResult train(const Tensor<double>& image, const TrainConfig& config,
                         const IterationCallback& on_iteration = {});

struct SweepEntry {
  double alpha = 0;
  std::optional<SegmentationResult> result;
  std::string error;  // non-empty when train threw
};

/// Runs train once per alpha with otherwise identical config (same seed,
/// fresh parameters and momentum). Results follow input order; `jobs` > 1 runs
/// entries concurrently without changing any result.
std::vector<SweepEntry> alpha_sweep(const Tensor<double>& image, const TrainConfig& config,
                                    const std::vector<double>& alphas, int jobs = 1);

/// `iteration,l_fs,l_sc,total` with 1-based iterations.
void write_loss_csv(std::ostream& os, const std::vector<LossBreakdown<double>>& history);

}  // namespace pvseg
