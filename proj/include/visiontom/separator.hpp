#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace vtom {

using Points = Eigen::MatrixXd;  // one point per row

struct KMeansResult {
  Eigen::MatrixXd centers;
  std::vector<int> assign;
  double sse = 0.0;
  int iterations = 0;
  std::vector<double> sse_history;  // after each assignment step
};

namespace detail {

inline double sq_dist(const Points& p, Eigen::Index i, const Eigen::MatrixXd& c, Eigen::Index j) {
  return (p.row(i) - c.row(j)).squaredNorm();
}

inline int nearest(const Eigen::RowVectorXd& x, const Eigen::MatrixXd& c, double* dist = nullptr) {
  int best = 0;
  double bd = (x - c.row(0)).squaredNorm();
  for (Eigen::Index j = 1; j < c.rows(); ++j) {
    const double d = (x - c.row(j)).squaredNorm();
    if (d < bd) {
      bd = d;
      best = static_cast<int>(j);
    }
  }
  if (dist) *dist = bd;
  return best;
}

}  // namespace detail

// Lloyd's algorithm from a farthest-point initialization whose first center is picked by the seed.
inline KMeansResult kmeans(const Points& pts, int k, std::uint64_t seed, int max_iter = 300) {
  const auto n = pts.rows();
  if (k < 1) throw ConfigError("k must be >= 1");
  if (n < k) throw SizeError("kmeans: fewer points than clusters");
  Rng rng(seed);
  KMeansResult r;
  r.centers.resize(k, pts.cols());
  r.centers.row(0) = pts.row(rng.index(static_cast<int>(n)));
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    Eigen::Index far = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      mind[i] = std::min(mind[i], detail::sq_dist(pts, i, r.centers, c - 1));
      if (mind[i] > mind[far]) far = i;
    }
    r.centers.row(c) = pts.row(far);
  }
  r.assign.assign(n, -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    double sse = 0;
    std::vector<double> d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = detail::nearest(pts.row(i), r.centers, &d[i]);
      sse += d[i];
      if (a != r.assign[i]) {
        r.assign[i] = a;
        changed = true;
      }
    }
    r.sse_history.push_back(sse);
    r.iterations = it + 1;
    if (!changed && it > 0) break;
    std::vector<int> count(k, 0);
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(k, pts.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(r.assign[i]) += pts.row(i);
      ++count[r.assign[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (count[c] > 0) {
        r.centers.row(c) = sum.row(c) / count[c];
      } else {
        // Re-seed an empty cluster at the point farthest from its current center.
        Eigen::Index far = 0;
        for (Eigen::Index i = 1; i < n; ++i)
          if (d[i] > d[far]) far = i;
        r.centers.row(c) = pts.row(far);
        d[far] = 0;
      }
    }
  }
  r.sse = 0;
  for (Eigen::Index i = 0; i < n; ++i) r.sse += detail::sq_dist(pts, i, r.centers, r.assign[i]);
  return r;
}

// Mean silhouette; a point alone in its cluster scores 0, and 0/0 is taken as 0.
inline double silhouette(const Points& pts, const std::vector<int>& assign) {
  const auto n = pts.rows();
  const int k = assign.empty() ? 0 : *std::max_element(assign.begin(), assign.end()) + 1;
  std::vector<int> size(k, 0);
  for (int a : assign) ++size[a];
  if (std::count_if(size.begin(), size.end(), [](int s) { return s > 0; }) < 2)
    throw DegenerateDataError("silhouette needs at least 2 non-empty clusters");
  double total = 0;
  std::vector<double> sum(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::fill(sum.begin(), sum.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) sum[assign[j]] += (pts.row(i) - pts.row(j)).norm();
    const int own = assign[i];
    if (size[own] == 1) continue;
    const double a = sum[own] / (size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      if (c != own && size[c] > 0) b = std::min(b, sum[c] / size[c]);
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

// sse[i] belongs to k = k0 + i. Returns the interior k with the largest second difference,
// smallest k on ties.
inline int elbow_k(const std::vector<double>& sse, int k0 = 1) {
  if (sse.size() < 3) throw SizeError("elbow needs at least 3 candidates");
  int best = -1;
  double bv = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < sse.size(); ++i) {
    const double v = sse[i - 1] - 2 * sse[i] + sse[i + 1];
    if (v > bv) {
      bv = v;
      best = k0 + static_cast<int>(i);
    }
  }
  return best;
}

// Between/within dispersion ratio; +infinity when all clusters are internally degenerate.
inline double calinski_harabasz(const Points& pts, const std::vector<int>& assign) {
  const auto n = pts.rows();
  const int k = *std::max_element(assign.begin(), assign.end()) + 1;
  if (k < 2 || n <= k) throw SizeError("calinski-harabasz needs 2 <= k < n");
  const Eigen::RowVectorXd mean = pts.colwise().mean();
  Eigen::MatrixXd cen = Eigen::MatrixXd::Zero(k, pts.cols());
  std::vector<int> size(k, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    cen.row(assign[i]) += pts.row(i);
    ++size[assign[i]];
  }
  double between = 0, within = 0;
  for (int c = 0; c < k; ++c) {
    if (size[c] == 0) continue;
    cen.row(c) /= size[c];
    between += size[c] * (cen.row(c) - mean).squaredNorm();
  }
  for (Eigen::Index i = 0; i < n; ++i) within += (pts.row(i) - cen.row(assign[i])).squaredNorm();
  if (within == 0) return std::numeric_limits<double>::infinity();
  return (between / (k - 1)) / (within / static_cast<double>(n - k));
}

struct ClusterMetric {
  int k = 0;
  double silhouette = 0, sse = 0, ch = 0;
  bool feasible = false;
};

struct ClusterSelection {
  int k_star = 0;
  int vote_silhouette = 0, vote_elbow = 0, vote_ch = 0;
  std::vector<ClusterMetric> report;
  KMeansResult fit;
};

// Most frequent of three votes; ties go to the smallest.
inline int majority_vote(int a, int b, int c) {
  const int v[3] = {a, b, c};
  int winner = a, wc = 0;
  for (int x : v) {
    const int n = static_cast<int>(std::count(std::begin(v), std::end(v), x));
    if (n > wc || (n == wc && x < winner)) {
      winner = x;
      wc = n;
    }
  }
  return winner;
}

inline constexpr int kMinClusters = 2;
inline constexpr int kMaxClusters = 15;
inline constexpr int kMinClusterSize = 5;

// Moves points out of clusters above the minimum into undersized ones, cheapest move first, then
// recomputes centers and SSE. Needs n >= k * min_size.
inline bool enforce_min_size(const Points& pts, KMeansResult& r, int min_size) {
  const int k = static_cast<int>(r.centers.rows());
  std::vector<int> size(k, 0);
  for (int a : r.assign) ++size[a];
  bool moved = false;
  for (int c = 0; c < k; ++c) {
    while (size[c] < min_size) {
      Eigen::Index best = -1;
      double cost = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        const int a = r.assign[i];
        if (a == c || size[a] <= min_size) continue;
        const double d = detail::sq_dist(pts, i, r.centers, c) - detail::sq_dist(pts, i, r.centers, a);
        if (d < cost) {
          cost = d;
          best = i;
        }
      }
      if (best < 0) return moved;
      --size[r.assign[best]];
      r.assign[best] = c;
      ++size[c];
      moved = true;
    }
  }
  if (moved) {
    r.centers.setZero();
    for (Eigen::Index i = 0; i < pts.rows(); ++i) r.centers.row(r.assign[i]) += pts.row(i);
    for (int c = 0; c < k; ++c) r.centers.row(c) /= size[c];
    r.sse = 0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) r.sse += detail::sq_dist(pts, i, r.centers, r.assign[i]);
  }
  return moved;
}

// Candidates k in [2, 15]; a k-means fit with an undersized cluster is repaired by enforce_min_size
// and k is dropped if that fails. Silhouette and
// CH vote for their maxima, the elbow for the largest SSE second difference; the majority wins and
// ties go to the smallest voted k.
inline ClusterSelection select_cluster_count(const Points& pts, std::uint64_t seed) {
  const int n = static_cast<int>(pts.rows());
  if (n < 2 * kMinClusterSize) throw SizeError("cluster selection needs at least 10 points");
  const int kmax = std::min(kMaxClusters, n / kMinClusterSize);
  std::map<int, KMeansResult> fits;
  for (int k = 1; k <= kmax + 1 && k <= n; ++k) {
    auto f = kmeans(pts, k, mix_seed(seed, k));
    if (k <= kmax) enforce_min_size(pts, f, kMinClusterSize);
    fits.emplace(k, std::move(f));
  }
  ClusterSelection s;
  std::vector<int> cands;
  for (int k = kMinClusters; k <= kmax; ++k) {
    const auto& f = fits.at(k);
    std::vector<int> size(k, 0);
    for (int a : f.assign) ++size[a];
    ClusterMetric m;
    m.k = k;
    m.sse = f.sse;
    m.feasible = *std::min_element(size.begin(), size.end()) >= kMinClusterSize;
    if (m.feasible) {
      m.silhouette = silhouette(pts, f.assign);
      m.ch = calinski_harabasz(pts, f.assign);
      cands.push_back(k);
    }
    s.report.push_back(m);
  }
  if (cands.empty()) throw DegenerateDataError("no cluster count satisfies the size constraint");
  auto metric = [&](int k) -> const ClusterMetric& { return s.report[k - kMinClusters]; };
  s.vote_silhouette = cands[0];
  s.vote_ch = cands[0];
  for (int k : cands) {
    if (metric(k).silhouette > metric(s.vote_silhouette).silhouette) s.vote_silhouette = k;
    if (metric(k).ch > metric(s.vote_ch).ch) s.vote_ch = k;
  }
  s.vote_elbow = cands[0];
  double best = -std::numeric_limits<double>::infinity();
  for (int k : cands) {
    auto lo = fits.find(k - 1), hi = fits.find(k + 1);
    if (lo == fits.end() || hi == fits.end()) continue;
    const double v = lo->second.sse - 2 * fits.at(k).sse + hi->second.sse;
    if (v > best) {
      best = v;
      s.vote_elbow = k;
    }
  }
  s.k_star = majority_vote(s.vote_silhouette, s.vote_elbow, s.vote_ch);
  s.fit = fits.at(s.k_star);
  return s;
}

// D -> 2D -> D; each affine map is followed by GELU and a layer norm with learned gain and shift.
// The final gain starts at zero, so an untrained encoder outputs its (zero) shift for every input.
struct Encoder {
  int d = 0;
  std::vector<double> p;  // w1 (2D x D), b1, g1, s1 (2D each), w2 (D x 2D), b2, g2, s2 (D each)

  Encoder() = default;
  Encoder(int dim, std::uint64_t seed) : d(dim) {
    p.assign(size_for(dim), 0.0);
    Rng rng(seed);
    const int h = 2 * d;
    auto uni = [&](double bound) { return rng.uniform(-bound, bound); };
    for (int i = 0; i < h * d; ++i) p[i] = uni(1.0 / std::sqrt(d));
    for (int i = 0; i < h; ++i) p[off_b1() + i] = uni(1.0 / std::sqrt(d));
    for (int i = 0; i < h; ++i) p[off_g1() + i] = 1.0;
    for (int i = 0; i < d * h; ++i) p[off_w2() + i] = uni(1.0 / std::sqrt(h));
    for (int i = 0; i < d; ++i) p[off_b2() + i] = uni(1.0 / std::sqrt(h));
  }

  static std::size_t size_for(int dim) {
    const std::size_t h = 2 * dim;
    return h * dim + 3 * h + dim * h + 3 * dim;
  }
  std::size_t off_b1() const { return static_cast<std::size_t>(2 * d) * d; }
  std::size_t off_g1() const { return off_b1() + 2 * d; }
  std::size_t off_s1() const { return off_g1() + 2 * d; }
  std::size_t off_w2() const { return off_s1() + 2 * d; }
  std::size_t off_b2() const { return off_w2() + static_cast<std::size_t>(d) * 2 * d; }
  std::size_t off_g2() const { return off_b2() + d; }
  std::size_t off_s2() const { return off_g2() + d; }

  struct Cache {
    Eigen::MatrixXd x, a1, h1, n1, y1, a2, h2, n2;
    Eigen::VectorXd r1, r2;
  };

  static double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }
  static double gelu_grad(double v) {
    return 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))) + v * std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
  }

  // x: n x D rows. Returns n x D corrections.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const {
    using Map = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using VMap = Eigen::Map<const Eigen::VectorXd>;
    const int h = 2 * d;
    Map w1(p.data(), h, d), w2(p.data() + off_w2(), d, h);
    VMap b1(p.data() + off_b1(), h), g1(p.data() + off_g1(), h), s1(p.data() + off_s1(), h);
    VMap b2(p.data() + off_b2(), d), g2(p.data() + off_g2(), d), s2(p.data() + off_s2(), d);
    Cache c;
    c.x = x;
    c.a1 = (x * w1.transpose()).rowwise() + b1.transpose();
    c.h1 = c.a1.unaryExpr(&gelu);
    norm(c.h1, c.n1, c.r1);
    c.y1 = (c.n1.array().rowwise() * g1.transpose().array()).rowwise() + s1.transpose().array();
    c.a2 = (c.y1 * w2.transpose()).rowwise() + b2.transpose();
    c.h2 = c.a2.unaryExpr(&gelu);
    norm(c.h2, c.n2, c.r2);
    Eigen::MatrixXd out = (c.n2.array().rowwise() * g2.transpose().array()).rowwise() + s2.transpose().array();
    if (cache) *cache = std::move(c);
    return out;
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const { return forward(x.transpose()).row(0).transpose(); }

  // Gradient of sum(dout .* out) with respect to the parameters.
  std::vector<double> backward(const Cache& c, const Eigen::MatrixXd& dout) const {
    using Map = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using VMap = Eigen::Map<const Eigen::VectorXd>;
    using GMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using GVMap = Eigen::Map<Eigen::VectorXd>;
    const int h = 2 * d;
    std::vector<double> g(p.size(), 0.0);
    Map w2(p.data() + off_w2(), d, h);
    VMap g1(p.data() + off_g1(), h), g2(p.data() + off_g2(), d);
    GMap dw1(g.data(), h, d), dw2(g.data() + off_w2(), d, h);
    GVMap db1(g.data() + off_b1(), h), dg1(g.data() + off_g1(), h), ds1(g.data() + off_s1(), h);
    GVMap db2(g.data() + off_b2(), d), dg2(g.data() + off_g2(), d), ds2(g.data() + off_s2(), d);

    dg2 = (dout.array() * c.n2.array()).colwise().sum().transpose();
    ds2 = dout.colwise().sum().transpose();
    Eigen::MatrixXd dn2 = dout.array().rowwise() * g2.transpose().array();
    Eigen::MatrixXd dh2 = norm_back(dn2, c.n2, c.r2);
    Eigen::MatrixXd da2 = dh2.array() * c.a2.unaryExpr(&gelu_grad).array();
    dw2 = da2.transpose() * c.y1;
    db2 = da2.colwise().sum().transpose();
    Eigen::MatrixXd dy1 = da2 * w2;
    dg1 = (dy1.array() * c.n1.array()).colwise().sum().transpose();
    ds1 = dy1.colwise().sum().transpose();
    Eigen::MatrixXd dn1 = dy1.array().rowwise() * g1.transpose().array();
    Eigen::MatrixXd dh1 = norm_back(dn1, c.n1, c.r1);
    Eigen::MatrixXd da1 = dh1.array() * c.a1.unaryExpr(&gelu_grad).array();
    dw1 = da1.transpose() * c.x;
    db1 = da1.colwise().sum().transpose();
    return g;
  }

  bool operator==(const Encoder&) const = default;

 private:
  static void norm(const Eigen::MatrixXd& x, Eigen::MatrixXd& y, Eigen::VectorXd& rstd) {
    y.resize(x.rows(), x.cols());
    rstd.resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double mu = x.row(i).mean();
      const Eigen::RowVectorXd cen = x.row(i).array() - mu;
      rstd(i) = 1.0 / std::sqrt(cen.squaredNorm() / static_cast<double>(x.cols()) + kLayerNormEps);
      y.row(i) = cen * rstd(i);
    }
  }
  static Eigen::MatrixXd norm_back(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& y, const Eigen::VectorXd& rstd) {
    Eigen::MatrixXd dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i)
      dx.row(i) = layer_norm_back<double>(dy.row(i), y.row(i), rstd(i));
    return dx;
  }
};

struct Adam {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  long t = 0;

  template <class T>
  void step(std::vector<T>& params, const std::vector<T>& grad, const std::vector<char>* frozen = nullptr) {
    if (m.empty()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (frozen && (*frozen)[i]) continue;
      const double g = static_cast<double>(grad[i]);
      m[i] = beta1 * m[i] + (1 - beta1) * g;
      v[i] = beta2 * v[i] + (1 - beta2) * g * g;
      params[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
};

struct ClusterModel {
  HeadId head;
  TaskKind task = TaskKind::Goal;
  int k_star = 0;
  Eigen::MatrixXd centers;
  std::vector<int> assign;
  std::vector<ClusterMetric> report;
};

struct ClusterCorrector {
  ClusterModel cluster;
  std::vector<Encoder> encoders;
  std::vector<std::vector<double>> loss_curves;  // per cluster, loss before each step plus final
  bool trained = false;
};

// Nearest-center dispatch; equidistant centers resolve to the lower index.
inline Eigen::VectorXd correct(const ClusterCorrector& cc, const Eigen::VectorXd& activation) {
  if (!cc.trained || cc.encoders.empty()) throw StateError("corrector has not been trained");
  const int c = detail::nearest(activation.transpose(), cc.cluster.centers);
  return cc.encoders[c].apply(activation);
}

inline double mean_residual(const Encoder& e, const Eigen::MatrixXd& neg, const Eigen::MatrixXd& pos) {
  if (neg.rows() == 0) return 0.0;
  Eigen::MatrixXd r = neg + e.forward(neg) - pos;
  return r.rowwise().squaredNorm().mean();
}

struct EncoderTraining {
  int steps = 500;
  double lr = 1e-3;
  std::uint64_t seed = 42;
};

// Cluster the negatives, then fit one encoder per cluster on its (neg, paired pos) rows by full-batch
// Adam on the mean squared residual of neg + f(neg) against pos.
inline ClusterCorrector fit_corrector(HeadId head, TaskKind task, const Eigen::MatrixXd& neg,
                                     const Eigen::MatrixXd& pos, const EncoderTraining& cfg,
                                     std::vector<std::string>* warnings = nullptr) {
  if (neg.rows() != pos.rows() || neg.cols() != pos.cols()) throw PairingError("negatives and positives are not paired");
  ClusterCorrector cc;
  cc.cluster.head = head;
  cc.cluster.task = task;
  auto sel = select_cluster_count(neg, cfg.seed);
  cc.cluster.k_star = sel.k_star;
  cc.cluster.centers = sel.fit.centers;
  cc.cluster.assign = sel.fit.assign;
  cc.cluster.report = sel.report;
  for (int c = 0; c < sel.k_star; ++c) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < neg.rows(); ++i)
      if (sel.fit.assign[i] == c) rows.push_back(i);
    Encoder e(static_cast<int>(neg.cols()), mix_seed(cfg.seed, 1000 + c));
    std::vector<double> curve;
    if (rows.empty()) {
      if (warnings) warnings->push_back("empty cluster " + std::to_string(c) + " skipped");
    } else {
      Eigen::MatrixXd xn(rows.size(), neg.cols()), xp(rows.size(), neg.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        xn.row(i) = neg.row(rows[i]);
        xp.row(i) = pos.row(rows[i]);
      }
      Adam opt;
      opt.lr = cfg.lr;
      const double inv = 1.0 / static_cast<double>(rows.size());
      for (int s = 0; s < cfg.steps; ++s) {
        Encoder::Cache cache;
        Eigen::MatrixXd r = xn + e.forward(xn, &cache) - xp;
        curve.push_back(r.rowwise().squaredNorm().mean());
        auto g = e.backward(cache, 2.0 * inv * r);
        opt.step(e.p, g);
      }
      curve.push_back(mean_residual(e, xn, xp));
    }
    cc.encoders.push_back(std::move(e));
    cc.loss_curves.push_back(std::move(curve));
  }
  cc.trained = true;
  return cc;
}

// L_total over a set of correctors: per (head, cluster) mean squared residual, summed.
inline double total_loss(const std::vector<const ClusterCorrector*>& ccs, const std::vector<Eigen::MatrixXd>& negs,
                         const std::vector<Eigen::MatrixXd>& poss) {
  double total = 0;
  for (std::size_t h = 0; h < ccs.size(); ++h) {
    const auto& cc = *ccs[h];
    for (int c = 0; c < cc.cluster.k_star; ++c) {
      std::vector<Eigen::Index> rows;
      for (Eigen::Index i = 0; i < negs[h].rows(); ++i)
        if (cc.cluster.assign[i] == c) rows.push_back(i);
      if (rows.empty()) continue;
      Eigen::MatrixXd xn(rows.size(), negs[h].cols()), xp(rows.size(), negs[h].cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        xn.row(i) = negs[h].row(rows[i]);
        xp.row(i) = poss[h].row(rows[i]);
      }
      total += mean_residual(cc.encoders[c], xn, xp);
    }
  }
  return total;
}

}  // namespace vtom
