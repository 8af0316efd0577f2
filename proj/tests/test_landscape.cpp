#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "watt/adapt.hpp"
#include "watt/landscape.hpp"
#include "watt/templates.hpp"

using namespace watt;

namespace {

ParameterSet perturbed(const ParameterSet& base, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  ParameterSet out = base;
  for (auto& e : out.entries())
    for (auto& x : e.values) x += n(rng);
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

Batch eval_batch(std::size_t n) {
  const Dataset ds = generate_dataset(4, {16, 64});
  const ImageSet noisy = apply_corruption(ds.test, {CorruptionKind::gaussian_noise, 3}, 4);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(noisy, idx);
}

}  // namespace

TEST(Plane, BasisAndReconstruction) {
  const ClipModel model(ModelConfig{}, 1);
  const ParameterSet w0 = ln_parameters(model);
  const ParameterSet w1 = perturbed(w0, 2, 0.05);
  const ParameterSet w2 = perturbed(w0, 3, 0.05);
  const LandscapePlane plane = build_plane(w0, w1, w2);

  EXPECT_NEAR(dot(plane.u, plane.u), 1.0, 1e-10);
  EXPECT_NEAR(dot(plane.v, plane.v), 1.0, 1e-10);
  EXPECT_NEAR(dot(plane.u, plane.v), 0.0, 1e-10);
  EXPECT_TRUE(bitwise_equal(plane.point(0.0, 0.0), w0));

  const auto r1 = plane.point(plane.x1, 0.0).flatten();
  const auto f1 = w1.flatten();
  for (std::size_t i = 0; i < f1.size(); ++i) EXPECT_NEAR(r1[i], f1[i], 1e-10);
  const auto r2 = plane.point(plane.x2, plane.y2).flatten();
  const auto f2 = w2.flatten();
  for (std::size_t i = 0; i < f2.size(); ++i) EXPECT_NEAR(r2[i], f2[i], 1e-8);

  // Oracle for the coordinates straight from the Gram-Schmidt formulas.
  const auto f0 = w0.flatten();
  std::vector<double> u(f0.size()), d2(f0.size());
  for (std::size_t i = 0; i < f0.size(); ++i) {
    u[i] = f1[i] - f0[i];
    d2[i] = f2[i] - f0[i];
  }
  const double c = dot(d2, u) / dot(u, u);
  std::vector<double> v(f0.size());
  for (std::size_t i = 0; i < f0.size(); ++i) v[i] = d2[i] - c * u[i];
  EXPECT_NEAR(plane.x1, std::sqrt(dot(u, u)), 1e-12);
  EXPECT_NEAR(plane.x2, c * std::sqrt(dot(u, u)), 1e-12);
  EXPECT_NEAR(plane.y2, std::sqrt(dot(v, v)), 1e-12);
}

TEST(Plane, AffineConsistency) {
  const ClipModel model(ModelConfig{}, 1);
  const ParameterSet w0 = ln_parameters(model);
  const LandscapePlane plane = build_plane(w0, perturbed(w0, 4, 0.1), perturbed(w0, 5, 0.1));
  for (auto [x, y] : std::vector<std::pair<double, double>>{{0.3, -0.2}, {-1.5, 2.0}, {0.0, 0.7}}) {
    const auto p = plane.point(x, y).flatten();
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], plane.origin[i] + x * plane.u[i] + y * plane.v[i]);
    const auto [cx, cy] = plane.coordinates(plane.point(x, y));
    EXPECT_NEAR(cx, x, 1e-10);
    EXPECT_NEAR(cy, y, 1e-10);
  }
}

TEST(Plane, MeanSitsAtCentroid) {
  const ClipModel model(ModelConfig{}, 1);
  const ParameterSet w0 = ln_parameters(model);
  const ParameterSet w1 = perturbed(w0, 6, 0.1);
  const ParameterSet w2 = perturbed(w0, 7, 0.1);
  const LandscapePlane plane = build_plane(w0, w1, w2);
  const std::vector<ParameterSet> three{w0, w1, w2};
  const auto [x, y] = plane.coordinates(average_parameters(three));
  EXPECT_NEAR(x, (plane.x1 + plane.x2) / 3.0, 1e-10);
  EXPECT_NEAR(y, plane.y2 / 3.0, 1e-10);
}

TEST(Plane, DegenerateGeometryIsRejected) {
  const ClipModel model(ModelConfig{}, 1);
  const ParameterSet w0 = ln_parameters(model);
  const ParameterSet w1 = perturbed(w0, 8, 0.1);
  EXPECT_THROW(build_plane(w0, w0, w1), std::invalid_argument);
  ParameterSet w2 = w0;
  {
    const auto f0 = w0.flatten();
    const auto f1 = w1.flatten();
    std::vector<double> mid(f0.size());
    for (std::size_t i = 0; i < f0.size(); ++i) mid[i] = f0[i] + 2.0 * (f1[i] - f0[i]);
    w2 = w0.with_values(mid);
  }
  EXPECT_THROW(build_plane(w0, w1, w2), std::invalid_argument);
  ParameterSet other;
  other.add("x", {1}, {0.0});
  EXPECT_THROW(build_plane(w0, w1, other), std::invalid_argument);
}

TEST(Grid, AnchorCellMatchesDirectEvaluation) {
  const ClipModel model(ModelConfig{}, 2);
  const Batch batch = eval_batch(16);
  const auto templates = TemplateSet::defaults().templates();
  std::vector<Tensor> three;
  std::vector<ParameterSet> adapted;
  for (std::size_t h = 0; h < 3; ++h) {
    ClipModel m = model.clone();
    adapted.push_back(adapt_single_template(m, batch.inputs, templates[h], synthetic_class_names(), 3, 1e-2,
                                            LossKind::transductive_ce));
    three.push_back(class_embeddings(model, templates[h], synthetic_class_names()));
  }
  const Tensor avg_text = scale(add(add(three[0], three[1]), three[2]), 1.0 / 3.0);
  const LandscapePlane plane = build_plane(adapted[0], adapted[1], adapted[2]);

  GridSpec spec;
  spec.resolution = 5;
  const LandscapeGrid grid = evaluate_grid(model, plane, spec, batch, avg_text);
  ASSERT_EQ(grid.cells.size(), grid.xs.size() * grid.ys.size());
  EXPECT_GE(grid.xs.size(), 5u);

  ClipModel direct = model.clone();
  direct.load(adapted[0]);
  double direct_loss;
  {
    NoGradGuard no_grad;
    direct_loss = tta_loss(build_pseudo_labels(direct.encode_image(batch.inputs.images), avg_text, direct.temperature()))
                      .item();
  }
  const auto ix = std::find(grid.xs.begin(), grid.xs.end(), 0.0) - grid.xs.begin();
  const auto iy = std::find(grid.ys.begin(), grid.ys.end(), 0.0) - grid.ys.begin();
  ASSERT_LT(static_cast<std::size_t>(ix), grid.xs.size());
  ASSERT_LT(static_cast<std::size_t>(iy), grid.ys.size());
  const LandscapeCell& anchor = grid.cells[iy * grid.xs.size() + ix];
  EXPECT_EQ(anchor.x, 0.0);
  EXPECT_EQ(anchor.y, 0.0);
  EXPECT_EQ(anchor.loss, direct_loss);

  // Every vertex is a grid point, so the grid minimum cannot exceed them.
  double grid_min = INFINITY;
  for (const auto& c : grid.cells) grid_min = std::min(grid_min, c.loss);
  for (auto [x, y] : std::vector<std::pair<double, double>>{{0.0, 0.0}, {plane.x1, 0.0}, {plane.x2, plane.y2}}) {
    const LandscapeCell v = evaluate_point(model, plane, x, y, batch, avg_text);
    EXPECT_LE(grid_min, v.loss);
    EXPECT_NE(std::find(grid.xs.begin(), grid.xs.end(), x), grid.xs.end());
    EXPECT_NE(std::find(grid.ys.begin(), grid.ys.end(), y), grid.ys.end());
  }
  for (const auto& c : grid.cells) {
    EXPECT_GE(c.error, 0.0);
    EXPECT_LE(c.error, 1.0);
  }

  const LandscapeGrid threaded = evaluate_grid(model, plane, spec, batch, avg_text, 3);
  EXPECT_EQ(threaded.csv(), grid.csv());

  const std::string csv = grid.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "x,y,loss,error");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), grid.cells.size() + 1);
  const nlohmann::json side = grid.sidecar();
  EXPECT_EQ(side.at("points").at("w1").at("x").get<double>(), plane.x1);
  EXPECT_NEAR(side.at("points").at("mean").at("y").get<double>(), plane.y2 / 3.0, 1e-15);
}

TEST(Grid, InvalidSpec) {
  const ClipModel model(ModelConfig{}, 1);
  const ParameterSet w0 = ln_parameters(model);
  const LandscapePlane plane = build_plane(w0, perturbed(w0, 2, 0.1), perturbed(w0, 3, 0.1));
  const Batch batch = eval_batch(2);
  const Tensor cls = class_embeddings(model, "a photo of a {}", synthetic_class_names());
  EXPECT_THROW(evaluate_grid(model, plane, GridSpec{0, 0.3}, batch, cls), std::invalid_argument);
  EXPECT_THROW(evaluate_grid(model, plane, GridSpec{3, -1.0}, batch, cls), std::invalid_argument);
}
