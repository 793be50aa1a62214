#include "pvseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "pvseg/errors.hpp"
#include "pvseg/format.hpp"

namespace pvseg {

std::string to_string(PixelClass c) {
  switch (c) {
    case PixelClass::background: return "background";
    case PixelClass::panel: return "panel";
    case PixelClass::hotspot: return "hotspot";
    case PixelClass::snail_trail: return "snail_trail";
  }
  return "unknown";
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("SceneSpec: " + what);
}

bool unit(double v) { return v >= 0.0 && v <= 1.0; }

bool inside(const SceneSpec& s, Point p) {
  return p.x >= 0 && p.y >= 0 && p.x <= s.width - 1 && p.y <= s.height - 1;
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

}  // namespace

void SceneSpec::validate() const {
  require(width >= 1 && height >= 1, "image size must be positive");
  const PanelGrid& g = grid;
  require(g.rows >= 0 && g.cols >= 0 && g.gap >= 0, "grid counts and gap must be non-negative");
  if (g.rows > 0 && g.cols > 0) {
    require(g.cell_width >= 1 && g.cell_height >= 1, "cell size must be positive");
    require(g.origin_x >= 0 && g.origin_y >= 0, "grid origin outside image");
    require(g.origin_x + g.cols * g.cell_width + (g.cols - 1) * g.gap <= width,
            "panel grid exceeds image width");
    require(g.origin_y + g.rows * g.cell_height + (g.rows - 1) * g.gap <= height,
            "panel grid exceeds image height");
  }
  require(unit(background_level) && unit(panel_level), "levels must lie in [0, 1]");
  require(noise_sigma >= 0, "noise sigma must be non-negative");
  for (const Hotspot& h : hotspots) {
    require(h.radius > 0, "hotspot radius must be positive");
    require(unit(h.peak), "hotspot peak must lie in [0, 1]");
    require(inside(*this, {h.center.x - h.radius, h.center.y - h.radius}) &&
                inside(*this, {h.center.x + h.radius, h.center.y + h.radius}),
            "hotspot extends outside the image");
  }
  for (const SnailTrail& t : trails) {
    require(!t.polyline.empty(), "snail trail needs at least one point");
    require(t.thickness > 0, "snail trail thickness must be positive");
    require(unit(t.intensity), "snail trail intensity must lie in [0, 1]");
    for (Point p : t.polyline) require(inside(*this, p), "snail trail point outside the image");
  }
}

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  const int w = spec.width, h = spec.height;
  Scene scene;
  auto& img = scene.image.pixels;
  auto& cls = scene.truth.classes;
  img = RowMatrix<double>::Constant(h, w, spec.background_level);
  cls = LabelMap::Constant(h, w, static_cast<int>(PixelClass::background));

  const PanelGrid& g = spec.grid;
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      const int x0 = g.origin_x + c * (g.cell_width + g.gap);
      const int y0 = g.origin_y + r * (g.cell_height + g.gap);
      img.block(y0, x0, g.cell_height, g.cell_width).setConstant(spec.panel_level);
      cls.block(y0, x0, g.cell_height, g.cell_width).setConstant(static_cast<int>(PixelClass::panel));
    }
  }

  for (const SnailTrail& t : spec.trails) {
    const double half = t.thickness / 2;
    for (std::size_t s = 0; s < t.polyline.size(); ++s) {
      const Point a = t.polyline[s];
      const Point b = s + 1 < t.polyline.size() ? t.polyline[s + 1] : a;
      const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - half)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + half)));
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - half)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + half)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (segment_distance({double(x), double(y)}, a, b) <= half) {
            img(y, x) = t.intensity;
            cls(y, x) = static_cast<int>(PixelClass::snail_trail);
          }
        }
      }
    }
  }

  for (const Hotspot& hs : spec.hotspots) {
    const double sigma = 0.6 * hs.radius;
    const int x0 = static_cast<int>(std::ceil(hs.center.x - hs.radius));
    const int x1 = static_cast<int>(std::floor(hs.center.x + hs.radius));
    const int y0 = static_cast<int>(std::ceil(hs.center.y - hs.radius));
    const int y1 = static_cast<int>(std::floor(hs.center.y + hs.radius));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double d2 = (x - hs.center.x) * (x - hs.center.x) + (y - hs.center.y) * (y - hs.center.y);
        if (d2 > hs.radius * hs.radius) continue;
        const double v =
            spec.panel_level + (hs.peak - spec.panel_level) * std::exp(-d2 / (2 * sigma * sigma));
        img(y, x) = std::max(img(y, x), v);
        cls(y, x) = static_cast<int>(PixelClass::hotspot);
      }
    }
  }

  if (spec.noise_sigma > 0) {
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (Index i = 0; i < img.size(); ++i) {
      img.data()[i] = std::clamp(img.data()[i] + noise(rng), 0.0, 1.0);
    }
  }
  return scene;
}

SceneSpec preset_scene(std::string_view name, std::uint64_t seed, int width, int height) {
  if (name != "hotspots3" && name != "panels") {
    throw std::invalid_argument("unknown scene preset '" + std::string(name) + "'");
  }
  if (width < 48 || height < 36) throw std::invalid_argument("preset scenes need at least 48x36 pixels");
  SceneSpec s;
  s.width = width;
  s.height = height;
  s.seed = seed;
  PanelGrid& g = s.grid;
  g.rows = 3;
  g.cols = 4;
  g.gap = std::max(2, width / 42);
  const int margin_x = std::max(2, width / 21);
  g.cell_width = (width - 2 * margin_x - (g.cols - 1) * g.gap) / g.cols;
  g.cell_height = std::max(4, (height * 52) / 256);
  g.origin_x = (width - g.cols * g.cell_width - (g.cols - 1) * g.gap) / 2;
  g.origin_y = (height - g.rows * g.cell_height - (g.rows - 1) * g.gap) / 2;

  if (name == "panels") {
    s.noise_sigma = 0;
    return s;
  }

  // Fault placement uses its own stream so the noise seed and layout differ.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> cells(static_cast<std::size_t>(g.rows * g.cols));
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  std::shuffle(cells.begin(), cells.end(), rng);

  auto cell_origin = [&](int cell) {
    return Point{double(g.origin_x + (cell % g.cols) * (g.cell_width + g.gap)),
                 double(g.origin_y + (cell / g.cols) * (g.cell_height + g.gap))};
  };
  const double radius = std::max(2.0, std::round(0.16 * std::min(g.cell_width, g.cell_height)));
  std::uniform_real_distribution<double> unit01(0.0, 1.0);
  for (int k = 0; k < 3; ++k) {
    const Point o = cell_origin(cells[static_cast<std::size_t>(k)]);
    const double span_x = g.cell_width - 2 * (radius + 1);
    const double span_y = g.cell_height - 2 * (radius + 1);
    Hotspot hs;
    hs.radius = radius;
    hs.peak = s.panel_level + 0.3;
    hs.center = {std::round(o.x + radius + 1 + unit01(rng) * span_x),
                 std::round(o.y + radius + 1 + unit01(rng) * span_y)};
    s.hotspots.push_back(hs);
  }

  const Point o = cell_origin(cells[3]);
  SnailTrail t;
  t.thickness = std::max(2.0, std::round(g.cell_height / 17.0));
  t.intensity = s.panel_level + 0.2;
  const double inset = t.thickness;
  for (int k = 0; k < 3; ++k) {
    const double fx = (k + unit01(rng) * 0.5) / 2.5;
    t.polyline.push_back({std::round(o.x + inset + fx * (g.cell_width - 2 * inset)),
                          std::round(o.y + inset + unit01(rng) * (g.cell_height - 2 * inset))});
  }
  s.trails.push_back(t);
  s.validate();
  return s;
}

std::string serialize_scene_spec(const SceneSpec& s) {
  std::ostringstream os;
  os << "# synthetic PV scene\n"
     << "width = " << s.width << "\n"
     << "height = " << s.height << "\n"
     << "grid.rows = " << s.grid.rows << "\n"
     << "grid.cols = " << s.grid.cols << "\n"
     << "grid.cell_width = " << s.grid.cell_width << "\n"
     << "grid.cell_height = " << s.grid.cell_height << "\n"
     << "grid.gap = " << s.grid.gap << "\n"
     << "grid.origin_x = " << s.grid.origin_x << "\n"
     << "grid.origin_y = " << s.grid.origin_y << "\n"
     << "background = " << format_real(s.background_level) << "\n"
     << "panel = " << format_real(s.panel_level) << "\n"
     << "noise_sigma = " << format_real(s.noise_sigma) << "\n"
     << "seed = " << s.seed << "\n";
  os << "# hotspot = x y radius peak\n";
  for (const Hotspot& h : s.hotspots) {
    os << "hotspot = " << format_real(h.center.x) << ' ' << format_real(h.center.y) << ' '
       << format_real(h.radius) << ' ' << format_real(h.peak) << "\n";
  }
  os << "# trail = thickness intensity x0 y0 x1 y1 ...\n";
  for (const SnailTrail& t : s.trails) {
    os << "trail = " << format_real(t.thickness) << ' ' << format_real(t.intensity);
    for (Point p : t.polyline) os << ' ' << format_real(p.x) << ' ' << format_real(p.y);
    os << "\n";
  }
  return os.str();
}

namespace {

std::string trim(std::string_view v) {
  const auto b = v.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = v.find_last_not_of(" \t\r");
  return std::string(v.substr(b, e - b + 1));
}

std::vector<double> numbers(const std::string& value, int line) {
  std::istringstream is(value);
  std::vector<double> out;
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) {
      throw std::invalid_argument("scene spec line " + std::to_string(line) + ": bad number '" + tok + "'");
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace

SceneSpec parse_scene_spec(std::string_view text) {
  SceneSpec s;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string body = trim(std::string_view(raw).substr(0, raw.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("scene spec line " + std::to_string(line) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const auto vals = numbers(trim(std::string_view(body).substr(eq + 1)), line);
    auto scalar = [&]() {
      if (vals.size() != 1) {
        throw std::invalid_argument("scene spec line " + std::to_string(line) + ": '" + key +
                                    "' takes one value");
      }
      return vals[0];
    };
    auto integer = [&]() {
      const double v = scalar();
      if (v != std::floor(v)) {
        throw std::invalid_argument("scene spec line " + std::to_string(line) + ": '" + key +
                                    "' must be an integer");
      }
      return static_cast<int>(v);
    };
    if (key == "width") s.width = integer();
    else if (key == "height") s.height = integer();
    else if (key == "grid.rows") s.grid.rows = integer();
    else if (key == "grid.cols") s.grid.cols = integer();
    else if (key == "grid.cell_width") s.grid.cell_width = integer();
    else if (key == "grid.cell_height") s.grid.cell_height = integer();
    else if (key == "grid.gap") s.grid.gap = integer();
    else if (key == "grid.origin_x") s.grid.origin_x = integer();
    else if (key == "grid.origin_y") s.grid.origin_y = integer();
    else if (key == "background") s.background_level = scalar();
    else if (key == "panel") s.panel_level = scalar();
    else if (key == "noise_sigma") s.noise_sigma = scalar();
    else if (key == "seed") {
      const double v = scalar();
      if (v < 0 || v != std::floor(v)) throw std::invalid_argument("scene spec: seed must be a non-negative integer");
      s.seed = static_cast<std::uint64_t>(v);
    } else if (key == "hotspot") {
      if (vals.size() != 4) {
        throw std::invalid_argument("scene spec line " + std::to_string(line) +
                                    ": hotspot takes x y radius peak");
      }
      s.hotspots.push_back({{vals[0], vals[1]}, vals[2], vals[3]});
    } else if (key == "trail") {
      if (vals.size() < 4 || vals.size() % 2 != 0) {
        throw std::invalid_argument("scene spec line " + std::to_string(line) +
                                    ": trail takes thickness intensity followed by x y pairs");
      }
      SnailTrail t;
      t.thickness = vals[0];
      t.intensity = vals[1];
      for (std::size_t i = 2; i < vals.size(); i += 2) t.polyline.push_back({vals[i], vals[i + 1]});
      s.trails.push_back(std::move(t));
    } else {
      throw std::invalid_argument("scene spec line " + std::to_string(line) + ": unknown key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

SceneSpec load_scene_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene spec " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scene_spec(buf.str());
}

double iou(const PixelMask& a, const PixelMask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("iou: masks differ in size");
  const Index uni = (a || b).count();
  if (uni == 0) return 1.0;
  return static_cast<double>((a && b).count()) / static_cast<double>(uni);
}

std::optional<ClusterScore> best_cluster_iou(const LabelMap& labels, const GroundTruth& truth,
                                             PixelClass fault) {
  if (labels.rows() != truth.classes.rows() || labels.cols() != truth.classes.cols()) {
    throw ShapeError("best_cluster_iou: label map and truth differ in size");
  }
  const int target = static_cast<int>(fault);
  const int max_id = labels.size() ? labels.maxCoeff() : -1;
  if (labels.size() && labels.minCoeff() < 0) throw std::out_of_range("best_cluster_iou: negative label");
  std::vector<Index> size(static_cast<std::size_t>(max_id + 1), 0), inter(size);
  Index truth_size = 0;
  for (Index i = 0; i < labels.size(); ++i) {
    const auto id = static_cast<std::size_t>(labels.data()[i]);
    ++size[id];
    if (truth.classes.data()[i] == target) {
      ++inter[id];
      ++truth_size;
    }
  }
  if (truth_size == 0) return std::nullopt;
  std::optional<ClusterScore> best;
  for (std::size_t id = 0; id < size.size(); ++id) {
    if (size[id] == 0) continue;
    const double score =
        static_cast<double>(inter[id]) / static_cast<double>(size[id] + truth_size - inter[id]);
    if (!best || score > best->score) best = ClusterScore{static_cast<int>(id), score};
  }
  return best;
}

std::vector<DetectionEntry> detection_report(const LabelMap& labels, const GroundTruth& truth,
                                             double tau) {
  if (!(tau > 0 && tau <= 1)) throw std::invalid_argument("detection_report: tau must lie in (0, 1]");
  std::vector<DetectionEntry> report;
  for (PixelClass c : {PixelClass::hotspot, PixelClass::snail_trail}) {
    const auto best = best_cluster_iou(labels, truth, c);
    if (!best) continue;
    report.push_back({c, best->score >= tau, *best});
  }
  return report;
}

}  // namespace pvseg
