#include "pvseg/manifest.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "pvseg/errors.hpp"

namespace pvseg {

using nlohmann::json;

std::string to_string(LossReduction r) { return r == LossReduction::sum ? "sum" : "mean"; }

LossReduction parse_loss_reduction(std::string_view s) {
  if (s == "mean") return LossReduction::mean;
  if (s == "sum") return LossReduction::sum;
  throw std::invalid_argument("loss reduction must be 'mean' or 'sum', got '" + std::string(s) + "'");
}

namespace {

json config_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"max_iterations", c.max_iterations},
              {"alpha", c.alpha},
              {"feature_channels", c.feature_channels},
              {"q_max", c.q_max},
              {"q_min", c.q_min},
              {"seed", c.seed},
              {"eps", c.eps},
              {"loss_reduction", to_string(c.loss_reduction)}};
}

TrainConfig config_from(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.max_iterations = j.at("max_iterations").get<int>();
  c.alpha = j.at("alpha").get<double>();
  c.feature_channels = j.at("feature_channels").get<int>();
  c.q_max = j.at("q_max").get<int>();
  c.q_min = j.at("q_min").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.eps = j.at("eps").get<double>();
  c.loss_reduction = parse_loss_reduction(j.at("loss_reduction").get<std::string>());
  return c;
}

json optional_real(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_real_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

std::string manifest_to_json(const RunManifest& m) {
  json j{{"tool_version", m.tool_version},
         {"config", config_json(m.config)},
         {"inputs", m.inputs},
         {"output_dir", m.output_dir},
         {"stop_reason", m.stop_reason},
         {"iterations_run", m.iterations_run},
         {"unique_clusters_final", m.unique_clusters_final},
         {"wall_seconds", m.wall_seconds},
         {"loss", {{"first", optional_real(m.loss_first)}, {"last", optional_real(m.loss_last)}}},
         {"partial", m.partial},
         {"message", m.message}};
  return j.dump(2) + "\n";
}

RunManifest manifest_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    RunManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config = config_from(j.at("config"));
    m.inputs = j.at("inputs").get<std::vector<std::string>>();
    m.output_dir = j.at("output_dir").get<std::string>();
    m.stop_reason = j.at("stop_reason").get<std::string>();
    m.iterations_run = j.at("iterations_run").get<int>();
    m.unique_clusters_final = j.at("unique_clusters_final").get<int>();
    m.wall_seconds = j.at("wall_seconds").get<double>();
    m.loss_first = optional_real_from(j.at("loss").at("first"));
    m.loss_last = optional_real_from(j.at("loss").at("last"));
    m.partial = j.at("partial").get<bool>();
    m.message = j.at("message").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed manifest: ") + e.what());
  }
}

void save_manifest(const RunManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << manifest_to_json(m);
  if (!out) throw IoError("write failed: " + path.string());
}

RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return manifest_from_json(buf.str());
}

}  // namespace pvseg
