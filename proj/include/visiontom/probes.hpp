#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capture.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace vtom {

struct ProbeConfig {
  double l2 = 1e-3;
  int steps = 500;
  double lr = 0.1;
  double val_fraction = 0.2;
  // Weight the loss by inverse class frequency and report mean per-class recall. For balanced
  // labels this is plain accuracy.
  bool balanced = true;
};

struct Probe {
  std::vector<double> theta;  // applies to raw activations
  double b = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  HeadId head;
  Dimension dimension = Dimension::Visual;
  TaskKind task = TaskKind::Goal;

  double prob(const std::vector<double>& x) const {
    double z = b;
    for (std::size_t i = 0; i < x.size(); ++i) z += theta[i] * x[i];
    return 1.0 / (1.0 + std::exp(-z));
  }
  int predict(const std::vector<double>& x) const { return prob(x) >= 0.5 ? 1 : 0; }
};

inline double probe_accuracy(const Probe& p, const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                             bool balanced) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  double hit[2] = {0, 0}, tot[2] = {0, 0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    tot[y[i]] += 1;
    hit[y[i]] += p.predict(x[i]) == y[i];
  }
  if (!balanced || tot[0] == 0 || tot[1] == 0) return (hit[0] + hit[1]) / (tot[0] + tot[1]);
  return 0.5 * (hit[0] / tot[0] + hit[1] / tot[1]);
}

// Full-batch gradient descent on the (optionally class-weighted) logistic loss with an L2 penalty.
// Features are standardized with the training statistics; the returned weights act on raw inputs.
inline Probe fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y, const ProbeConfig& cfg) {
  const std::size_t n = x.size();
  if (n == 0 || y.size() != n) throw DegenerateDataError("probe needs labelled data");
  const std::size_t d = x[0].size();
  std::size_t npos = 0;
  for (int v : y) npos += v == 1;
  if (npos == 0 || npos == n) throw DegenerateDataError("probe data contains a single class");

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (const auto& r : x)
    for (std::size_t j = 0; j < d; ++j) mu[j] += r[j];
  for (auto& v : mu) v /= static_cast<double>(n);
  for (const auto& r : x)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (r[j] - mu[j]) * (r[j] - mu[j]);
  for (auto& v : sd) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;
  }
  Eigen::MatrixXd z(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) z(i, j) = (x[i][j] - mu[j]) / sd[j];
  Eigen::VectorXd yy(n), w(n);
  const double wp = cfg.balanced ? static_cast<double>(n) / (2.0 * npos) : 1.0;
  const double wn = cfg.balanced ? static_cast<double>(n) / (2.0 * (n - npos)) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    yy(i) = y[i];
    w(i) = y[i] ? wp : wn;
  }
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  for (int s = 0; s < cfg.steps; ++s) {
    Eigen::VectorXd p = ((z * theta).array() + b).matrix();
    for (std::size_t i = 0; i < n; ++i) p(i) = 1.0 / (1.0 + std::exp(-p(i)));
    Eigen::VectorXd r = (w.array() * (p - yy).array()).matrix() / static_cast<double>(n);
    theta -= cfg.lr * (z.transpose() * r + cfg.l2 * theta);
    b -= cfg.lr * r.sum();
  }
  Probe pr;
  pr.theta.resize(d);
  pr.b = b;
  for (std::size_t j = 0; j < d; ++j) {
    pr.theta[j] = theta(j) / sd[j];
    pr.b -= theta(j) * mu[j] / sd[j];
  }
  pr.train_accuracy = probe_accuracy(pr, x, y, cfg.balanced);
  return pr;
}

struct ProbeSplit {
  std::vector<std::size_t> train, val;
};

// Stratified by label: round(val_fraction * n_c) of each class goes to validation.
inline ProbeSplit probe_split(const std::vector<int>& y, double val_fraction, std::uint64_t seed) {
  ProbeSplit s;
  Rng rng(seed);
  for (int c : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == c) idx.push_back(i);
    rng.shuffle(idx);
    const auto nv = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(idx.size())));
    if (idx.size() - nv < 2) throw DegenerateDataError("fewer than 2 training records for a class");
    s.val.insert(s.val.end(), idx.begin(), idx.begin() + nv);
    s.train.insert(s.train.end(), idx.begin() + nv, idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  if (s.val.empty()) throw DegenerateDataError("validation split is empty");
  return s;
}

inline Probe train_probe(const std::vector<std::vector<double>>& x, const std::vector<int>& y, const ProbeSplit& split,
                         const ProbeConfig& cfg) {
  for (auto i : split.val)
    if (std::find(split.train.begin(), split.train.end(), i) != split.train.end())
      throw Error("probe validation record also used for training");
  std::vector<std::vector<double>> xt, xv;
  std::vector<int> yt, yv;
  for (auto i : split.train) {
    xt.push_back(x[i]);
    yt.push_back(y[i]);
  }
  for (auto i : split.val) {
    xv.push_back(x[i]);
    yv.push_back(y[i]);
  }
  auto p = fit_logistic(xt, yt, cfg);
  p.val_accuracy = probe_accuracy(p, xv, yv, cfg.balanced);
  return p;
}

inline Probe train_probe(const std::vector<std::vector<double>>& x, const std::vector<int>& y, std::uint64_t seed,
                         const ProbeConfig& cfg = {}) {
  return train_probe(x, y, probe_split(y, cfg.val_fraction, seed), cfg);
}

struct Heatmap {
  Dimension dimension = Dimension::Visual;
  TaskKind task = TaskKind::Goal;
  int layers = 0, heads = 0;
  std::vector<double> acc;  // layer-major
  double at(int l, int h) const { return acc[static_cast<std::size_t>(l) * heads + h]; }
  bool operator==(const Heatmap&) const = default;
};

inline constexpr double kChanceAccuracy = 0.5;

// One probe per head on the pos/neg records of (dimension, task).
inline Heatmap probe_heatmap(const RecordStore& store, Dimension dim, TaskKind task, std::uint64_t seed,
                             const ProbeConfig& cfg = {}, std::vector<Probe>* probes = nullptr) {
  auto pos = store.query(dim, task, Label::Pos);
  auto neg = store.query(dim, task, Label::Neg);
  std::vector<int> y;
  std::vector<const HeadActivationMap*> recs;
  for (auto* r : pos) {
    recs.push_back(r);
    y.push_back(1);
  }
  for (auto* r : neg) {
    recs.push_back(r);
    y.push_back(0);
  }
  const auto split = probe_split(y, cfg.val_fraction, seed);
  Heatmap hm;
  hm.dimension = dim;
  hm.task = task;
  hm.layers = store.layers();
  hm.heads = store.heads();
  for (int l = 0; l < hm.layers; ++l)
    for (int h = 0; h < hm.heads; ++h) {
      std::vector<std::vector<double>> x;
      x.reserve(recs.size());
      for (auto* r : recs) x.push_back(r->head_vec(l, h));
      auto p = train_probe(x, y, split, cfg);
      p.head = {l, h};
      p.dimension = dim;
      p.task = task;
      hm.acc.push_back(p.val_accuracy);
      if (probes) probes->push_back(std::move(p));
    }
  return hm;
}

struct HeadRanking {
  struct Entry {
    HeadId head;
    double accuracy = 0.0;
  };
  std::vector<Entry> order;
  int k = 0;
  std::vector<HeadId> selected;
};

inline HeadRanking rank_heads(const std::vector<double>& acc, int layers, int heads, int k) {
  if (k < 1) throw ConfigError("K must be >= 1");
  HeadRanking r;
  r.k = k;
  for (int l = 0; l < layers; ++l)
    for (int h = 0; h < heads; ++h) r.order.push_back({{l, h}, acc[static_cast<std::size_t>(l) * heads + h]});
  std::stable_sort(r.order.begin(), r.order.end(),
                   [](const auto& a, const auto& b) { return a.accuracy > b.accuracy; });
  const int n = std::min<int>(k, static_cast<int>(r.order.size()));
  for (int i = 0; i < n; ++i) r.selected.push_back(r.order[i].head);
  return r;
}

// shared: one ranking of the per-head mean accuracy across grids. Otherwise one ranking per grid.
inline std::vector<HeadRanking> select_heads(const std::vector<Heatmap>& grids, int k, bool shared) {
  if (grids.empty()) throw ConfigError("select_heads needs at least one grid");
  const int L = grids[0].layers, H = grids[0].heads;
  std::vector<HeadRanking> out;
  if (shared) {
    std::vector<double> mean(static_cast<std::size_t>(L) * H, 0.0);
    for (const auto& g : grids)
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += g.acc[i];
    for (auto& v : mean) v /= static_cast<double>(grids.size());
    out.push_back(rank_heads(mean, L, H, k));
  } else {
    for (const auto& g : grids) out.push_back(rank_heads(g.acc, L, H, k));
  }
  return out;
}

inline void write_heatmap_csv(std::ostream& os, const std::vector<Heatmap>& maps) {
  os << "dimension,task,layer,head,accuracy\n";
  char buf[64];
  for (const auto& m : maps)
    for (int l = 0; l < m.layers; ++l)
      for (int h = 0; h < m.heads; ++h) {
        std::snprintf(buf, sizeof buf, "%.17g", m.at(l, h));
        os << dimension_name(m.dimension) << ',' << task_name(m.task) << ',' << l << ',' << h << ',' << buf << '\n';
      }
}

struct PcaResult {
  Eigen::MatrixXd projected;       // n x k
  Eigen::MatrixXd components;      // k x d, orthonormal rows
  Eigen::VectorXd mean;            // d
  Eigen::VectorXd explained;       // variance per component
  Eigen::VectorXd explained_ratio;
};

inline PcaResult pca_project(const Eigen::MatrixXd& x, int n_components = 2) {
  const auto n = x.rows(), d = x.cols();
  if (n < 3) throw SizeError("pca needs at least 3 points");
  if (n_components < 1 || n_components > d) throw ConfigError("bad component count");
  PcaResult r;
  r.mean = x.colwise().mean().transpose();
  Eigen::MatrixXd c = x.rowwise() - r.mean.transpose();
  Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(n - 1);
  const double total = cov.trace();
  if (!(total > 0)) throw DegenerateDataError("pca on zero-variance data");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  r.components.resize(n_components, d);
  r.explained.resize(n_components);
  for (int i = 0; i < n_components; ++i) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - i);
    Eigen::Index big;
    v.cwiseAbs().maxCoeff(&big);
    if (v(big) < 0) v = -v;
    r.components.row(i) = v.transpose();
    r.explained(i) = std::max(0.0, es.eigenvalues()(d - 1 - i));
  }
  r.explained_ratio = r.explained / total;
  r.projected = c * r.components.transpose();
  return r;
}

struct KdeGrid {
  std::vector<double> xs, ys;
  std::vector<double> density;  // row-major over (y, x)
  double bw_x = 0, bw_y = 0;
  double at(std::size_t iy, std::size_t ix) const { return density[iy * xs.size() + ix]; }
};

inline std::pair<double, double> scott_bandwidth(const Eigen::MatrixXd& pts) {
  const double n = static_cast<double>(pts.rows());
  auto sd = [&](int j) {
    const double m = pts.col(j).mean();
    return std::sqrt((pts.col(j).array() - m).square().sum() / std::max(1.0, n - 1));
  };
  const double f = std::pow(n, -1.0 / 6.0);
  double bx = sd(0) * f, by = sd(1) * f;
  if (!(bx > 0)) bx = 1.0;
  if (!(by > 0)) by = 1.0;
  return {bx, by};
}

// Product Gaussian kernel density on a regular grid spanning the data plus 5 bandwidths.
inline KdeGrid kde_density(const Eigen::MatrixXd& pts, std::optional<std::pair<double, double>> bandwidth = std::nullopt,
                           int resolution = 101) {
  if (pts.cols() != 2 || pts.rows() < 1) throw SizeError("kde expects n x 2 points");
  KdeGrid g;
  std::tie(g.bw_x, g.bw_y) = bandwidth ? *bandwidth : scott_bandwidth(pts);
  if (!(g.bw_x > 0 && g.bw_y > 0)) throw ConfigError("kde bandwidth must be positive");
  const double x0 = pts.col(0).minCoeff() - 5 * g.bw_x, x1 = pts.col(0).maxCoeff() + 5 * g.bw_x;
  const double y0 = pts.col(1).minCoeff() - 5 * g.bw_y, y1 = pts.col(1).maxCoeff() + 5 * g.bw_y;
  for (int i = 0; i < resolution; ++i) {
    g.xs.push_back(x0 + (x1 - x0) * i / (resolution - 1));
    g.ys.push_back(y0 + (y1 - y0) * i / (resolution - 1));
  }
  const double norm = 1.0 / (2 * M_PI * g.bw_x * g.bw_y * static_cast<double>(pts.rows()));
  g.density.assign(g.xs.size() * g.ys.size(), 0.0);
  for (std::size_t iy = 0; iy < g.ys.size(); ++iy)
    for (std::size_t ix = 0; ix < g.xs.size(); ++ix) {
      double s = 0;
      for (Eigen::Index p = 0; p < pts.rows(); ++p) {
        const double dx = (g.xs[ix] - pts(p, 0)) / g.bw_x, dy = (g.ys[iy] - pts(p, 1)) / g.bw_y;
        s += std::exp(-0.5 * (dx * dx + dy * dy));
      }
      g.density[iy * g.xs.size() + ix] = s * norm;
    }
  return g;
}

inline double trapezoid_integral(const KdeGrid& g) {
  const std::size_t nx = g.xs.size(), ny = g.ys.size();
  double s = 0;
  for (std::size_t iy = 0; iy < ny; ++iy)
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const double wx = (ix == 0 || ix == nx - 1) ? 0.5 : 1.0;
      const double wy = (iy == 0 || iy == ny - 1) ? 0.5 : 1.0;
      s += wx * wy * g.at(iy, ix);
    }
  return s * (g.xs[1] - g.xs[0]) * (g.ys[1] - g.ys[0]);
}

inline nlohmann::json geometry_json(const PcaResult& p, const KdeGrid& k, const std::vector<int>& labels) {
  nlohmann::json pts = nlohmann::json::array();
  for (Eigen::Index i = 0; i < p.projected.rows(); ++i)
    pts.push_back({{"x", p.projected(i, 0)}, {"y", p.projected(i, 1)}, {"label", labels.at(i)}});
  return {{"explained_ratio", std::vector<double>(p.explained_ratio.data(), p.explained_ratio.data() + p.explained_ratio.size())},
          {"points", pts},
          {"kde", {{"xs", k.xs}, {"ys", k.ys}, {"bandwidth", {k.bw_x, k.bw_y}}, {"density", k.density}}}};
}

}  // namespace vtom
