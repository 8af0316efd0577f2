#include "watt/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "watt/adapt.hpp"
#include "watt/config.hpp"
#include "watt/io.hpp"
#include "watt/landscape.hpp"
#include "watt/pretrain.hpp"
#include "watt/templates.hpp"

namespace watt {

namespace {

using Rng = std::mt19937_64;

Tensor uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Norm-wise relative error between backprop and central differences.
double gradient_error(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.clear_grad();
  f().backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    double diff = 0.0;
    double na = 0.0;
    double nn = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = f().item();
      data[i] = saved - h;
      const double fm = f().item();
      data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12}));
    t.clear_grad();
  }
  return worst;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(3);
  out << std::scientific << v;
  return out.str();
}

VerifyCheck make(std::string name, double worst, double tol) {
  return {std::move(name), worst < tol, "max error " + fmt(worst) + " (tolerance " + fmt(tol) + ")"};
}

VerifyCheck op_gradients() {
  Rng rng(101);
  const Tensor a = uniform(rng, {3, 4});
  const Tensor b = uniform(rng, {3, 4});
  const Tensor row = uniform(rng, {4});
  const Tensor pos = uniform(rng, {3, 4}, 0.2, 2.0);
  const Tensor m = uniform(rng, {4, 5});
  const Tensor gamma = uniform(rng, {4}, 0.5, 1.5);
  const Tensor beta = uniform(rng, {4});
  const Tensor w = uniform(rng, {3, 4}, -1, 1, false);
  const std::vector<std::size_t> ids{2, 0, 2};
  auto weighted = [&](const Tensor& t) { return sum(mul(t, w)); };

  struct Case {
    const char* name;
    std::function<Tensor()> f;
    std::vector<Tensor> inputs;
  };
  const std::vector<Case> cases = {
      {"add", [&] { return weighted(add(a, row)); }, {a, row}},
      {"sub", [&] { return weighted(sub(a, b)); }, {a, b}},
      {"mul", [&] { return weighted(mul(a, b)); }, {a, b}},
      {"div", [&] { return weighted(div(a, pos)); }, {a, pos}},
      {"scale", [&] { return weighted(scale(a, -2.5)); }, {a}},
      {"exp", [&] { return weighted(exp(a)); }, {a}},
      {"log", [&] { return weighted(log(pos)); }, {pos}},
      {"sqrt", [&] { return weighted(sqrt(pos)); }, {pos}},
      {"xlogx", [&] { return weighted(xlogx(pos)); }, {pos}},
      {"gelu", [&] { return weighted(gelu(a)); }, {a}},
      {"matmul", [&] { return sum(mul(matmul(a, m), matmul(b, m))); }, {a, m}},
      {"transpose", [&] { return sum(mul(transpose(a), transpose(w))); }, {a}},
      {"concat", [&] { return weighted(narrow(concat({a, b}, 1), 1, 2, 4)); }, {a, b}},
      {"gather_rows", [&] { return weighted(gather_rows(a, ids)); }, {a}},
      {"sum", [&] { return sum(mul(sum(a, 0), row)); }, {a}},
      {"mean", [&] { return sum(mul(mean(a, 1), sum(b, 1))); }, {a, b}},
      {"softmax", [&] { return weighted(softmax(a, -1)); }, {a}},
      {"log_softmax", [&] { return weighted(log_softmax(a, 0)); }, {a}},
      {"l2_normalize", [&] { return weighted(l2_normalize(a, -1)); }, {a}},
      {"layer_norm", [&] { return weighted(layer_norm(a, gamma, beta)); }, {a, gamma, beta}},
  };
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    const double e = gradient_error(c.f, c.inputs);
    if (e > worst) {
      worst = e;
      worst_name = c.name;
    }
  }
  VerifyCheck check = make("operator gradients", worst, 1e-4);
  check.detail += " over " + std::to_string(cases.size()) + " ops, worst " + worst_name;
  return check;
}

Batch noisy_batch(std::size_t n, std::uint64_t seed) {
  const Dataset ds = generate_dataset(seed, {16, 64});
  const ImageSet noisy = apply_corruption(ds.test, {CorruptionKind::gaussian_noise, 3}, seed);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = (i * 7) % noisy.size();
  return make_batch(noisy, idx);
}

VerifyCheck tta_gradient() {
  ClipModel model(ModelConfig{}, 5);
  model.set_trainable(is_visual_ln_name);
  const Batch batch = noisy_batch(4, 3);
  SimilarityBundle frozen;
  {
    NoGradGuard no_grad;
    const Tensor z = model.encode_image(batch.inputs.images);
    frozen = build_pseudo_labels(z, add(z, scale(sub(z, mean(z, 0)), 3.0)), model.temperature());
  }
  std::vector<Tensor> inputs;
  for (const auto& p : model.visual_ln_parameters()) inputs.push_back(p.tensor);
  auto f = [&] {
    return tta_loss(rebuild_with_frozen_targets(model.encode_image(batch.inputs.images), frozen, model.temperature()));
  };
  return make("tta_loss gradient w.r.t. visual LayerNorm (B=4)", gradient_error(f, inputs), 1e-4);
}

VerifyCheck pseudo_label_algebra() {
  Rng rng(202);
  double worst = 0.0;
  const std::size_t sizes[] = {1, 2, 4, 8};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = sizes[trial % 4];
    const Tensor z = uniform(rng, {B, 16}, -1, 1, false);
    const Tensor cls = uniform(rng, {8, 16}, -1, 1, false);
    const SimilarityBundle s = build_pseudo_labels(z, cls, 0.01);
    const auto q = s.pseudo_labels.data();
    const auto sv = s.image_similarity.data();
    const auto st = s.text_similarity.data();
    for (std::size_t i = 0; i < B; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < B; ++j) {
        row += q[i * B + j];
        worst = std::max({worst, std::abs(sv[i * B + j] - sv[j * B + i]), std::abs(st[i * B + j] - st[j * B + i])});
      }
      worst = std::max({worst, std::abs(row - 1.0), std::abs(sv[i * B + i] - 1.0), std::abs(st[i * B + i] - 1.0)});
    }
    if (B == 1) worst = std::max(worst, std::abs(q[0] - 1.0));
    const Tensor same = concat(std::vector<Tensor>(B, narrow(z, 0, 0, 1)), 0);
    const SimilarityBundle uniform_q = build_pseudo_labels(same, cls, 0.01);
    for (double v : uniform_q.pseudo_labels.data()) worst = std::max(worst, std::abs(v - 1.0 / static_cast<double>(B)));
  }
  return make("pseudo-label algebra (100 batches)", worst, 1e-10);
}

VerifyCheck loss_oracles() {
  Rng rng(303);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 2 + static_cast<std::size_t>(trial % 5);
    const Tensor q = softmax(uniform(rng, {B, B}, -3, 3, false), -1);
    const Tensor logp = log_softmax(uniform(rng, {B, B}, -3, 3, false), -1);
    double tta = 0.0;
    double ent = 0.0;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < B; ++j) {
        tta -= q.data()[i * B + j] * logp.data()[i * B + j];
        ent -= q.data()[i * B + j] * std::log(q.data()[i * B + j]);
      }
    worst = std::max(worst, std::abs(tta_loss(q, logp).item() - tta / static_cast<double>(B)));
    worst = std::max(worst, std::abs(entropy_loss(q).item() - ent / static_cast<double>(B)));

    const Tensor img = l2_normalize(uniform(rng, {B, 8}, -1, 1, false), -1);
    const Tensor txt = l2_normalize(uniform(rng, {B, 8}, -1, 1, false), -1);
    double i2t = 0.0;
    double t2i = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
      auto dot = [&](std::size_t a, std::size_t b) {
        double d = 0.0;
        for (std::size_t k = 0; k < 8; ++k) d += img.data()[a * 8 + k] * txt.data()[b * 8 + k];
        return d / 0.07;
      };
      double row = 0.0;
      double col = 0.0;
      for (std::size_t j = 0; j < B; ++j) {
        row += std::exp(dot(i, j));
        col += std::exp(dot(j, i));
      }
      i2t += std::log(row) - dot(i, i);
      t2i += std::log(col) - dot(i, i);
    }
    const double oracle = 0.5 * (i2t + t2i) / static_cast<double>(B);
    worst = std::max(worst, std::abs(contrastive_loss(img, txt, 0.07).item() - oracle));
  }
  return make("tta / entropy / contrastive loss oracles (50 instances)", worst, 1e-10);
}

VerifyCheck reductions() {
  const ClipModel base(ModelConfig{}, 7);
  const Batch batch = noisy_batch(8, 4);
  const auto names = synthetic_class_names();
  const std::string t0 = TemplateSet::defaults()[0];
  const std::vector<std::string> one{t0};
  MtwaConfig cfg;
  cfg.inner_steps = 2;
  cfg.rounds = 3;
  bool ok = true;
  std::string failed;
  auto expect = [&](bool cond, const char* what) {
    if (!cond && ok) failed = what;
    ok = ok && cond;
  };

  cfg.mode = MtwaMode::parallel;
  ClipModel mp = base.clone();
  const ParameterSet par = run_watt(mp, batch.inputs, one, names, cfg);
  cfg.mode = MtwaMode::sequential;
  ClipModel ms = base.clone();
  const ParameterSet seq = run_watt(ms, batch.inputs, one, names, cfg);
  expect(bitwise_equal(par, seq), "H=1 parallel == sequential");
  // One template with fresh Adam state per round restarts the optimizer, so
  // the H=1 reduction is a chain of M single-template runs.
  ClipModel chain = base.clone();
  ParameterSet chained;
  for (std::size_t m = 0; m < cfg.rounds; ++m) {
    chained = adapt_single_template(chain, batch.inputs, t0, names, cfg.inner_steps, cfg.lr, cfg.loss);
  }
  expect(bitwise_equal(par, chained), "H=1 parallel == chained single-template adaptation");

  cfg.mode = MtwaMode::parallel;
  ClipModel mr = base.clone();
  const std::vector<std::string> repeated(4, t0);
  const ParameterSet rep = run_watt(mr, batch.inputs, repeated, names, cfg);
  expect(bitwise_equal(rep, par), "identical templates == H=1");

  cfg.lr = 0.0;
  for (auto mode : {MtwaMode::parallel, MtwaMode::sequential}) {
    cfg.mode = mode;
    ClipModel mz = base.clone();
    expect(bitwise_equal(run_watt(mz, batch.inputs, TemplateSet::defaults().templates(), names, cfg),
                         ln_parameters(base)),
           "lr=0 is the identity");
  }
  ClipModel mz = base.clone();
  expect(bitwise_equal(adapt_single_template(mz, batch.inputs, t0, names, 5, 0.0, LossKind::transductive_ce),
                       ln_parameters(base)),
         "lr=0 single template is the identity");

  EvalConfig single_head{EvalHead::single_temp, one, names, 8};
  EvalConfig avg_head{EvalHead::text_avg, one, names, 8};
  MethodSpec watt_s;
  ClipModel ha = base.clone();
  ClipModel hb = base.clone();
  const Tensor pa = adapt_and_predict(ha, batch.inputs, single_head, watt_s, 1);
  const Tensor pb = adapt_and_predict(hb, batch.inputs, avg_head, watt_s, 1);
  expect(std::equal(pa.data().begin(), pa.data().end(), pb.data().begin(), pb.data().end()),
         "single_temp == text_avg for H=1");
  return {"reduction identities", ok, ok ? "all bit-identical" : "failed: " + failed};
}

ParameterSet random_set(Rng& rng) {
  ParameterSet s;
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (const char* name : {"a.gamma", "a.beta", "b.gamma"}) {
    std::vector<double> v(12);
    for (auto& x : v) x = u(rng);
    s.add(name, {12}, std::move(v));
  }
  return s;
}

VerifyCheck averaging() {
  Rng rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 6);
    std::vector<ParameterSet> sets;
    for (std::size_t i = 0; i < n; ++i) sets.push_back(random_set(rng));
    const auto avg = average_parameters(sets).flatten();
    for (std::size_t k = 0; k < avg.size(); ++k) {
      long double s = 0.0L;
      for (const auto& p : sets) s += p.flatten()[k];
      worst = std::max(worst, std::abs(avg[k] - static_cast<double>(s / n)));
    }
  }
  const ParameterSet theta = random_set(rng);
  std::vector<double> neg = theta.flatten();
  for (auto& v : neg) v = -v;
  const std::vector<ParameterSet> pair{theta, theta.with_values(neg)};
  for (double v : average_parameters(pair).flatten()) worst = std::max(worst, std::abs(v));
  return make("weight averaging oracle", worst, 1e-12);
}

VerifyCheck landscape_geometry() {
  Rng rng(505);
  const ParameterSet w0 = random_set(rng);
  const ParameterSet w1 = random_set(rng);
  const ParameterSet w2 = random_set(rng);
  const LandscapePlane plane = build_plane(w0, w1, w2);
  double dot = 0.0;
  double nu = 0.0;
  double nv = 0.0;
  for (std::size_t i = 0; i < plane.u.size(); ++i) {
    dot += plane.u[i] * plane.v[i];
    nu += plane.u[i] * plane.u[i];
    nv += plane.v[i] * plane.v[i];
  }
  double basis = std::max({std::abs(dot), std::abs(std::sqrt(nu) - 1.0), std::abs(std::sqrt(nv) - 1.0)});
  double recon = 0.0;
  auto compare = [&](const ParameterSet& a, const ParameterSet& b) {
    const auto fa = a.flatten();
    const auto fb = b.flatten();
    for (std::size_t i = 0; i < fa.size(); ++i) recon = std::max(recon, std::abs(fa[i] - fb[i]));
  };
  compare(plane.point(plane.x1, 0.0), w1);
  compare(plane.point(plane.x2, plane.y2), w2);
  const bool anchor = bitwise_equal(plane.point(0.0, 0.0), w0);
  const bool ok = basis < 1e-10 && recon < 1e-8 && anchor;
  return {"landscape plane geometry", ok,
          "basis error " + fmt(basis) + ", reconstruction error " + fmt(recon) +
              (anchor ? ", P(0,0) == w0 bitwise" : ", P(0,0) != w0")};
}

VerifyCheck serialization() {
  const auto dir = std::filesystem::temp_directory_path() / ("watt-verify-" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(dir);
  bool ok = true;
  std::string detail = "checkpoint and config round trips exact";
  try {
    const ClipModel model(ModelConfig{}, 9);
    Checkpoint ck;
    ck.config = model.config();
    ck.parameters = model.parameters();
    ck.provenance = {9, 1, 0.5, 0.25};
    ck.metadata = {{"note", "verify"}};
    save_checkpoint(dir / "m.ckpt", ck);
    const Checkpoint back = load_checkpoint(dir / "m.ckpt");
    if (!bitwise_equal(back.parameters, ck.parameters) || back.metadata != ck.metadata) {
      ok = false;
      detail = "checkpoint round trip differs";
    }
    RunConfig rc;
    rc.seed = 17;
    rc.adapt.method.mtwa.mode = MtwaMode::parallel;
    rc.sweep.axis = SweepAxis::schedule;
    rc.sweep.grid = nlohmann::json::array({nlohmann::json::array({2, 5}), nlohmann::json::array({1, 10})});
    rc.landscape.grid.resolution = 9;
    const RunConfig parsed = nlohmann::json::parse(nlohmann::json(rc).dump()).get<RunConfig>();
    if (!(parsed == rc)) {
      ok = false;
      detail = "config round trip differs";
    }
  } catch (const std::exception& e) {
    ok = false;
    detail = e.what();
  }
  std::error_code ec;
  std::filesystem::remove_all(dir, ec);
  return {"serialization round trips", ok, detail};
}

}  // namespace

std::vector<VerifyCheck> run_verify_suite() {
  std::vector<VerifyCheck> out;
  for (auto* check : {&op_gradients, &tta_gradient, &pseudo_label_algebra, &loss_oracles, &reductions, &averaging,
                      &landscape_geometry, &serialization}) {
    try {
      out.push_back(check());
    } catch (const std::exception& e) {
      out.push_back({"(check threw)", false, e.what()});
    }
  }
  return out;
}

CommandOutput cmd_verify(const RunConfig& config, std::vector<VerifyCheck>* checks) {
  const auto results = run_verify_suite();
  nlohmann::json report = {{"version", std::string(library_version())}, {"config", config}};
  auto& items = report["checks"] = nlohmann::json::array();
  bool all = true;
  for (const auto& c : results) {
    items.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    all = all && c.passed;
  }
  report["passed"] = all;
  const auto dir = resolve_output_dir(config) / "verify";
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  if (checks != nullptr) *checks = results;
  return {{dir / "report.json"}, {{"passed", all}}};
}

}  // namespace watt
