#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "watt/data.hpp"
#include "watt/model.hpp"

namespace watt {

// Affine plane through three congruent parameter sets, with an orthonormal
// basis from one Gram-Schmidt step: P(x, y) = w0 + x u + y v.
struct LandscapePlane {
  ParameterSet anchor;  // w0
  std::vector<double> origin;
  std::vector<double> u;
  std::vector<double> v;
  double x1 = 0.0;  // w1 = P(x1, 0)
  double x2 = 0.0;  // w2 = P(x2, y2)
  double y2 = 0.0;

  ParameterSet point(double x, double y) const;
  // Least-squares coordinates of a congruent parameter set in the plane.
  std::pair<double, double> coordinates(const ParameterSet& w) const;
};

LandscapePlane build_plane(const ParameterSet& w0, const ParameterSet& w1, const ParameterSet& w2);

struct GridSpec {
  std::size_t resolution = 41;  // points per axis
  double margin = 0.3;          // fraction of the triangle's bounding box added per side

  bool operator==(const GridSpec&) const = default;
};

struct LandscapeCell {
  double x = 0.0;
  double y = 0.0;
  double loss = 0.0;
  double error = 0.0;
};

struct LandscapeGrid {
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<LandscapeCell> cells;  // row-major over (y, x)
  std::vector<std::pair<std::string, std::pair<double, double>>> marks;  // w0, w1, w2, mean

  std::string csv() const;
  nlohmann::json sidecar() const;
};

// Loss (transductive cross-entropy against `class_emb`) and error rate of the
// base model with its LayerNorm parameters replaced by P(x, y).
LandscapeCell evaluate_point(const ClipModel& base, const LandscapePlane& plane, double x, double y,
                             const Batch& batch, const Tensor& class_emb);

// Grid over the triangle's bounding box plus margin. Grid axes always contain
// the coordinates of w0, w1 and w2.
LandscapeGrid evaluate_grid(const ClipModel& base, const LandscapePlane& plane, const GridSpec& spec,
                            const Batch& batch, const Tensor& class_emb, std::size_t threads = 1);

}  // namespace watt
