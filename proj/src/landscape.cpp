#include "watt/landscape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "watt/adapt.hpp"

namespace watt {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> diff(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace

LandscapePlane build_plane(const ParameterSet& w0, const ParameterSet& w1, const ParameterSet& w2) {
  if (!w0.congruent_with(w1) || !w0.congruent_with(w2)) {
    throw std::invalid_argument("build_plane: parameter sets differ in names or shapes");
  }
  LandscapePlane plane;
  plane.anchor = w0;
  plane.origin = w0.flatten();
  const auto d1 = diff(w1.flatten(), plane.origin);
  const auto d2 = diff(w2.flatten(), plane.origin);

  const double uu = dot(d1, d1);
  const double u_norm = std::sqrt(uu);
  if (u_norm < 1e-12) throw std::invalid_argument("build_plane: w1 coincides with w0 (|u| < 1e-12)");
  std::vector<double> v = d2;
  const double proj = dot(d2, d1) / uu;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * d1[i];
  const double v_norm = std::sqrt(dot(v, v));
  if (v_norm < 1e-12) throw std::invalid_argument("build_plane: w2 is collinear with w0 and w1 (|v| < 1e-12)");

  plane.u.resize(d1.size());
  plane.v.resize(v.size());
  for (std::size_t i = 0; i < d1.size(); ++i) {
    plane.u[i] = d1[i] / u_norm;
    plane.v[i] = v[i] / v_norm;
  }
  plane.x1 = u_norm;
  plane.x2 = dot(d2, plane.u);
  plane.y2 = dot(d2, plane.v);
  return plane;
}

ParameterSet LandscapePlane::point(double x, double y) const {
  if (x == 0.0 && y == 0.0) return anchor;
  std::vector<double> flat(origin.size());
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = origin[i] + x * u[i] + y * v[i];
  return anchor.with_values(flat);
}

std::pair<double, double> LandscapePlane::coordinates(const ParameterSet& w) const {
  if (!w.congruent_with(anchor)) throw std::invalid_argument("LandscapePlane::coordinates: incongruent parameter set");
  const auto d = diff(w.flatten(), origin);
  return {dot(d, u), dot(d, v)};
}

LandscapeCell evaluate_point(const ClipModel& base, const LandscapePlane& plane, double x, double y,
                             const Batch& batch, const Tensor& class_emb) {
  ClipModel model = base.clone();
  model.load(plane.point(x, y));
  NoGradGuard no_grad;
  const Tensor unit = l2_normalize(class_emb, -1);
  const Tensor zv = model.encode_image(batch.inputs.images);
  const SimilarityBundle bundle = build_pseudo_labels(zv, class_emb, model.temperature());
  const auto pred = argmax_rows(matmul(zv, transpose(unit)));
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != static_cast<std::size_t>(batch.labels[i]);
  LandscapeCell cell;
  cell.x = x;
  cell.y = y;
  cell.loss = tta_loss(bundle).item();
  cell.error = pred.empty() ? 0.0 : static_cast<double>(wrong) / static_cast<double>(pred.size());
  return cell;
}

namespace {

std::vector<double> axis_points(double lo, double hi, std::size_t n, std::initializer_list<double> required) {
  std::vector<double> pts;
  if (n == 1) {
    pts.push_back(0.5 * (lo + hi));
  } else {
    for (std::size_t i = 0; i < n; ++i) pts.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  pts.insert(pts.end(), required.begin(), required.end());
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

}  // namespace

LandscapeGrid evaluate_grid(const ClipModel& base, const LandscapePlane& plane, const GridSpec& spec,
                            const Batch& batch, const Tensor& class_emb, std::size_t threads) {
  if (spec.resolution == 0) throw std::invalid_argument("evaluate_grid: resolution must be >= 1");
  if (!(spec.margin >= 0.0)) throw std::invalid_argument("evaluate_grid: margin must be >= 0");
  const double xmin = std::min({0.0, plane.x1, plane.x2});
  const double xmax = std::max({0.0, plane.x1, plane.x2});
  const double ymin = std::min(0.0, plane.y2);
  const double ymax = std::max(0.0, plane.y2);
  const double mx = spec.margin * (xmax - xmin);
  const double my = spec.margin * (ymax - ymin);

  LandscapeGrid grid;
  grid.xs = axis_points(xmin - mx, xmax + mx, spec.resolution, {0.0, plane.x1, plane.x2});
  grid.ys = axis_points(ymin - my, ymax + my, spec.resolution, {0.0, plane.y2});
  grid.marks = {{"w0", {0.0, 0.0}},
                {"w1", {plane.x1, 0.0}},
                {"w2", {plane.x2, plane.y2}},
                {"mean", {(plane.x1 + plane.x2) / 3.0, plane.y2 / 3.0}}};
  grid.cells.resize(grid.xs.size() * grid.ys.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < grid.cells.size(); i = next.fetch_add(1)) {
      const double x = grid.xs[i % grid.xs.size()];
      const double y = grid.ys[i / grid.xs.size()];
      grid.cells[i] = evaluate_point(base, plane, x, y, batch, class_emb);
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, grid.cells.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return grid;
}

std::string LandscapeGrid::csv() const {
  std::ostringstream out;
  out << "x,y,loss,error\n";
  char buf[128];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", c.x, c.y, c.loss, c.error);
    out << buf;
  }
  return out.str();
}

nlohmann::json LandscapeGrid::sidecar() const {
  nlohmann::json points = nlohmann::json::object();
  for (const auto& [name, xy] : marks) points[name] = {{"x", xy.first}, {"y", xy.second}};
  return {{"points", points},
          {"x_range", {xs.front(), xs.back()}},
          {"y_range", {ys.front(), ys.back()}},
          {"nx", xs.size()},
          {"ny", ys.size()}};
}

}  // namespace watt
