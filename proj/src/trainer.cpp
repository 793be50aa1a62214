#include "pvseg/trainer.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "pvseg/format.hpp"

namespace pvseg {

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::iteration_cap: return "iteration_cap";
    case StopReason::cluster_floor: return "cluster_floor";
    case StopReason::numeric_failure: return "numeric_failure";
  }
  return "unknown";
}

namespace {

void check_image(const Tensor<double>& image) {
  if (image.channels() != 1) {
    throw ShapeError("train: expected a single-channel image, got " + image.shape_string());
  }
  if (image.pixels() < 1) throw ShapeError("train: empty image");
  const auto& m = image.matrix();
  if (!m.allFinite() || m.minCoeff() < 0.0 || m.maxCoeff() > 1.0) {
    throw std::invalid_argument("train: image intensities must lie in [0, 1]");
  }
}

}  // namespace

SegmentationResult train(const Tensor<double>& image, const TrainConfig& config,
                         const IterationCallback& on_iteration) {
  config.validate();
  check_image(image);

  NetworkParams<double> params = init_params<double>(config);
  SegmentationResult result;
  result.stop_reason = StopReason::iteration_cap;

  auto fail = [&](std::string message) {
    result.stop_reason = StopReason::numeric_failure;
    result.failure_message = std::move(message);
  };

  for (int it = 0; it < config.max_iterations; ++it) {
    ForwardPass<double> pass;
    try {
      pass = forward(params, image, config.eps);
    } catch (const NumericError& e) {
      fail(std::string(e.what()) + " at iteration " + std::to_string(it + 1));
      break;
    }
    LabelMap labels = assign_labels(pass.response());
    if (!pass.response().all_finite()) {
      if (it == 0) result.final_labels = std::move(labels);
      fail("non-finite response at iteration " + std::to_string(it + 1));
      break;
    }
    const int clusters = count_unique(labels);
    auto [loss, grad] = total_loss(pass.response(), labels, config.alpha, config.loss_reduction);
    if (!std::isfinite(loss.total) || !grad.all_finite()) {
      if (it == 0) result.final_labels = std::move(labels);
      fail("non-finite loss at iteration " + std::to_string(it + 1));
      break;
    }
    result.loss_history.push_back(loss);
    result.final_labels = std::move(labels);
    if (on_iteration) on_iteration(it + 1, loss, clusters);

    if (clusters <= config.q_min) {
      result.stop_reason = StopReason::cluster_floor;
      break;
    }
    if (it + 1 == config.max_iterations) break;

    try {
      sgd_momentum_step(params, backward(params, pass, grad), config);
    } catch (const NumericError& e) {
      fail(e.what());
      break;
    }
  }

  result.iterations_run = static_cast<int>(result.loss_history.size());
  result.unique_clusters_final = result.final_labels.size() ? count_unique(result.final_labels) : 0;
  return result;
}

std::vector<SweepEntry> alpha_sweep(const Tensor<double>& image, const TrainConfig& config,
                                    const std::vector<double>& alphas, int jobs) {
  if (alphas.empty()) throw std::invalid_argument("alpha_sweep: empty alpha list");
  for (double a : alphas) {
    if (!(a >= 0)) throw std::invalid_argument("alpha_sweep: alpha must be >= 0");
  }
  std::vector<SweepEntry> entries(alphas.size());
  auto run = [&](std::size_t i) {
    entries[i].alpha = alphas[i];
    TrainConfig c = config;
    c.alpha = alphas[i];
    try {
      entries[i].result = train(image, c);
    } catch (const std::exception& e) {
      entries[i].error = e.what();
    }
  };

  const std::size_t workers = std::min<std::size_t>(std::max(jobs, 1), alphas.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < alphas.size(); ++i) run(i);
    return entries;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < alphas.size(); i = next++) run(i);
    });
  }
  for (auto& t : pool) t.join();
  return entries;
}

void write_loss_csv(std::ostream& os, const std::vector<LossBreakdown<double>>& history) {
  os << "iteration,l_fs,l_sc,total\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    os << i + 1 << ',' << format_real(h.l_fs) << ',' << format_real(h.l_sc) << ','
       << format_real(h.total) << '\n';
  }
}

}  // namespace pvseg
