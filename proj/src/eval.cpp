#include "neco/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

#include "neco/rng.hpp"

namespace neco {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

ConstMap as_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("expected a matrix");
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Tensor from_matrix(const RowMatrix& m) {
  std::vector<double> d(m.data(), m.data() + m.size());
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(d));
}

// Squared distances of every point to every centroid, n x K.
RowMatrix sq_distances(const ConstMap& x, const RowMatrix& c) {
  RowMatrix d = -2.0 * x * c.transpose();
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

}  // namespace

// ---------------------------------------------------------------- k-means

ClusterAssignment kmeans(const Tensor& features, std::size_t K, std::size_t max_iters, std::uint64_t seed) {
  const ConstMap x = as_matrix(features);
  const std::size_t n = features.rows();
  if (K == 0) throw std::invalid_argument("kmeans: K must be positive");
  if (n < K) {
    throw std::invalid_argument("kmeans: " + std::to_string(n) + " points cannot fill " + std::to_string(K) + " clusters");
  }
  const auto d = x.cols();
  Rng rng(derive_seed(seed, "kmeans++"));

  RowMatrix c(static_cast<Eigen::Index>(K), d);
  std::vector<double> closest(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t pick = 0;
    if (k == 0) {
      pick = rng.below(n);
    } else {
      const double total = std::accumulate(closest.begin(), closest.end(), 0.0);
      if (total > 0) {
        double u = rng.uniform() * total;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (closest[i] <= 0) continue;
          pick = i;
          if (u < closest[i]) break;
          u -= closest[i];
        }
      } else {
        // Every point already coincides with a centre.
        pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), 0) - chosen.begin());
      }
    }
    chosen[pick] = 1;
    c.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) {
      closest[i] = std::min(closest[i], (x.row(static_cast<Eigen::Index>(i)) - c.row(static_cast<Eigen::Index>(k))).squaredNorm());
    }
  }

  ClusterAssignment out;
  out.ids.assign(n, -1);
  std::vector<double> own(n);
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iters, 1); ++it) {
    const RowMatrix dist = sq_distances(x, c);
    bool changed = false;
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      dist.row(static_cast<Eigen::Index>(i)).minCoeff(&best);  // first minimum
      if (out.ids[i] != static_cast<int>(best)) changed = true;
      out.ids[i] = static_cast<int>(best);
      own[i] = dist(static_cast<Eigen::Index>(i), best);
      inertia += own[i];
    }
    out.inertia = inertia;
    out.inertia_trace.push_back(inertia);
    out.iterations = it + 1;
    if (!changed) break;

    RowMatrix sum = RowMatrix::Zero(static_cast<Eigen::Index>(K), d);
    std::vector<std::size_t> count(K, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum.row(out.ids[i]) += x.row(static_cast<Eigen::Index>(i));
      ++count[static_cast<std::size_t>(out.ids[i])];
    }
    std::vector<char> taken(n, 0);
    for (std::size_t k = 0; k < K; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      if (count[k] > 0) {
        c.row(kk) = sum.row(kk) / static_cast<double>(count[k]);
        continue;
      }
      std::size_t far = 0;
      double best = -1;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i] && own[i] > best) {
          best = own[i];
          far = i;
        }
      }
      taken[far] = 1;
      own[far] = 0;
      c.row(kk) = x.row(static_cast<Eigen::Index>(far));
    }
  }
  out.centroids = from_matrix(c);
  return out;
}

// ---------------------------------------------------------------- Hungarian

namespace {

// Shortest augmenting path with potentials on a square matrix.
// Returns col_of_row.
std::vector<std::size_t> solve_square(const std::vector<double>& a, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= n; ++j) col[p[j] - 1] = j - 1;
  return col;
}

double optimum(const std::vector<double>& a, std::size_t n) {
  if (n == 0) return 0;
  const auto col = solve_square(a, n);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i * n + col[i]];
  return s;
}

std::vector<double> minor(const std::vector<double>& a, std::size_t n, std::size_t row, std::size_t col) {
  std::vector<double> m;
  m.reserve((n - 1) * (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    if (i == row) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != col) m.push_back(a[i * n + j]);
    }
  }
  return m;
}

}  // namespace

Matching hungarian(const Tensor& cost) {
  if (cost.rank() != 2) throw ShapeError("hungarian: cost must be a matrix");
  const std::size_t R = cost.rows(), C = cost.cols();
  for (double x : cost.data()) {
    if (!std::isfinite(x)) throw DomainError("hungarian: costs must be finite");
  }
  const std::size_t n = std::max(R, C);
  std::vector<double> a(n * n, 0.0);
  double scale = 1;
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      a[i * n + j] = cost.at(i, j);
      scale = std::max(scale, std::abs(cost.at(i, j)));
    }
  }
  const double tol = 1e-9 * scale * static_cast<double>(n);

  // Fix rows in order to the smallest column that still admits an optimum.
  // Padding columns sort after real ones.
  Matching out;
  out.col_of_row.assign(R, -1);
  std::vector<std::size_t> rows(n), cols(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  double remaining = optimum(a, n);
  for (std::size_t i = 0; i < R; ++i) {
    const std::size_t m = rows.size();
    for (std::size_t jj = 0; jj < m; ++jj) {
      auto sub = minor(a, m, 0, jj);
      const double rest = optimum(sub, m - 1);
      if (a[jj] + rest <= remaining + tol) {
        out.col_of_row[i] = cols[jj] < C ? static_cast<int>(cols[jj]) : -1;
        if (cols[jj] < C) out.cost += cost.at(i, cols[jj]);
        remaining = rest;
        a = std::move(sub);
        rows.erase(rows.begin());
        cols.erase(cols.begin() + static_cast<std::ptrdiff_t>(jj));
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- mIoU

std::vector<double> per_class_iou(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t num_classes) {
  if (pred.size() != gt.size()) throw ShapeError("miou: prediction and ground truth differ in size");
  std::vector<double> inter(num_classes, 0), pred_n(num_classes, 0), gt_n(num_classes, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0 || static_cast<std::size_t>(gt[i]) >= num_classes) {
      throw std::invalid_argument("miou: ground-truth label " + std::to_string(gt[i]) + " out of range");
    }
    ++gt_n[static_cast<std::size_t>(gt[i])];
    if (pred[i] >= 0 && static_cast<std::size_t>(pred[i]) < num_classes) {
      ++pred_n[static_cast<std::size_t>(pred[i])];
      if (pred[i] == gt[i]) ++inter[static_cast<std::size_t>(gt[i])];
    }
  }
  std::vector<double> iou(num_classes, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double uni = pred_n[c] + gt_n[c] - inter[c];
    if (uni > 0) iou[c] = inter[c] / uni;
  }
  return iou;
}

double miou(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t num_classes) {
  double s = 0;
  std::size_t n = 0;
  for (double x : per_class_iou(pred, gt, num_classes)) {
    if (std::isnan(x)) continue;
    s += x;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

namespace {

void check_labels(const std::vector<int>& ids, std::size_t n, const char* what) {
  for (int x : ids) {
    if (x < 0 || static_cast<std::size_t>(x) >= n) {
      throw std::invalid_argument(std::string(what) + " label " + std::to_string(x) + " out of range");
    }
  }
}

// 1 - IoU between groups (rows) and classes (cols).
Tensor iou_cost(const std::vector<int>& groups, const std::vector<int>& gt, std::size_t G, std::size_t C) {
  std::vector<double> inter(G * C, 0), gn(G, 0), cn(C, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (groups[i] < 0) continue;
    const auto g = static_cast<std::size_t>(groups[i]);
    const auto c = static_cast<std::size_t>(gt[i]);
    ++inter[g * C + c];
    ++gn[g];
  }
  for (int c : gt) ++cn[static_cast<std::size_t>(c)];
  std::vector<double> cost(G * C);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t c = 0; c < C; ++c) {
      const double uni = gn[g] + cn[c] - inter[g * C + c];
      cost[g * C + c] = 1.0 - (uni > 0 ? inter[g * C + c] / uni : 0.0);
    }
  }
  return Tensor({G, C}, std::move(cost));
}

}  // namespace

std::vector<int> match_clusters(const std::vector<int>& clusters, const std::vector<int>& gt, std::size_t num_clusters,
                                std::size_t num_classes) {
  if (clusters.size() != gt.size()) throw ShapeError("match_clusters: size mismatch");
  check_labels(clusters, num_clusters, "match_clusters: cluster");
  check_labels(gt, num_classes, "match_clusters: class");
  return hungarian(iou_cost(clusters, gt, num_clusters, num_classes)).col_of_row;
}

std::vector<int> overcluster_match(const std::vector<int>& clusters, const std::vector<int>& gt, std::size_t K_over,
                                   std::size_t num_classes) {
  if (clusters.size() != gt.size()) throw ShapeError("overcluster_match: size mismatch");
  if (K_over < num_classes) throw std::invalid_argument("overcluster_match: K_over below the class count");
  check_labels(clusters, K_over, "overcluster_match: cluster");
  check_labels(gt, num_classes, "overcluster_match: class");

  std::vector<std::size_t> counts(K_over * num_classes, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    ++counts[static_cast<std::size_t>(clusters[i]) * num_classes + static_cast<std::size_t>(gt[i])];
  }
  // Precision argmax; the cluster size is a common denominator.
  std::vector<int> group(K_over, -1);
  for (std::size_t k = 0; k < K_over; ++k) {
    const auto row = counts.begin() + static_cast<std::ptrdiff_t>(k * num_classes);
    if (std::accumulate(row, row + static_cast<std::ptrdiff_t>(num_classes), std::size_t{0}) == 0) continue;
    group[k] = static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(num_classes)) - row);
  }
  std::vector<int> merged(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) merged[i] = group[static_cast<std::size_t>(clusters[i])];
  const auto to_class = hungarian(iou_cost(merged, gt, num_classes, num_classes)).col_of_row;

  std::vector<int> out(K_over, -1);
  for (std::size_t k = 0; k < K_over; ++k) {
    if (group[k] >= 0) out[k] = to_class[static_cast<std::size_t>(group[k])];
  }
  return out;
}

// ---------------------------------------------------------------- memory bank

Tensor extract_features(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& scenes) {
  NoGradScope off;
  std::vector<double> all;
  std::size_t rows = 0, d = 0;
  for (const auto& s : scenes) {
    const FeatureGrid g = encode(cfg, params, patchify(s.image, cfg.patch));
    all.insert(all.end(), g.tokens.data().begin(), g.tokens.data().end());
    rows += g.tokens.rows();
    d = g.tokens.cols();
  }
  return Tensor({rows, d}, std::move(all));
}

std::vector<int> extract_labels(const EncoderConfig& cfg, const std::vector<SyntheticScene>& scenes,
                                std::size_t num_classes) {
  std::vector<int> out;
  for (const auto& s : scenes) {
    const std::size_t rows = s.image.height / cfg.patch, cols = s.image.width / cfg.patch;
    auto l = patch_labels(s.mask, s.image.height, s.image.width, cfg.patch, rows, cols, num_classes);
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

Tensor normalize_rows(const Tensor& x) {
  RowMatrix m = as_matrix(x);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    if (norm > 0) m.row(i) /= norm;
  }
  return from_matrix(m);
}

MemoryBank make_memory_bank(const Tensor& features, std::vector<int> labels, std::size_t cap, std::uint64_t seed) {
  if (features.rows() != labels.size()) throw ShapeError("memory bank: features and labels differ in length");
  if (cap == 0) throw std::invalid_argument("memory bank: cap must be positive");
  MemoryBank bank;
  bank.cap = cap;
  const Tensor unit = normalize_rows(features);
  if (labels.size() <= cap) {
    bank.features = unit;
    bank.labels = std::move(labels);
    return bank;
  }
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "bank"));
  rng.shuffle(idx);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  const std::size_t d = unit.cols();
  std::vector<double> f;
  f.reserve(cap * d);
  for (std::size_t i : idx) {
    auto row = unit.data().subspan(i * d, d);
    f.insert(f.end(), row.begin(), row.end());
    bank.labels.push_back(labels[i]);
  }
  bank.features = Tensor({cap, d}, std::move(f));
  return bank;
}

MemoryBank build_memory_bank(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& scenes,
                             std::size_t num_classes, std::size_t cap, std::uint64_t seed) {
  return make_memory_bank(extract_features(cfg, params, scenes), extract_labels(cfg, scenes, num_classes), cap, seed);
}

std::vector<int> incontext_predict(const Tensor& queries, const MemoryBank& bank, std::size_t k, double temperature,
                                   std::size_t num_classes) {
  const std::size_t M = bank.labels.size();
  if (k == 0 || k > M) throw std::invalid_argument("incontext_predict: k must lie in [1, bank size]");
  if (!(temperature > 0)) throw std::invalid_argument("incontext_predict: temperature must be positive");
  if (queries.cols() != bank.features.cols()) throw ShapeError("incontext_predict: feature width mismatch");
  check_labels(bank.labels, num_classes, "incontext_predict: bank");

  const Tensor q = normalize_rows(queries);
  const RowMatrix sim = as_matrix(q) * as_matrix(bank.features).transpose();
  std::vector<int> out(queries.rows());
  std::vector<std::size_t> idx(M);
  std::vector<double> score(num_classes);
  for (std::size_t r = 0; r < queries.rows(); ++r) {
    const double* s = sim.data() + r * M;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [s](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
    const double top = s[idx[0]];
    std::fill(score.begin(), score.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double w = std::exp((s[idx[j]] - top) / temperature);
      score[static_cast<std::size_t>(bank.labels[idx[j]])] += w;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < num_classes; ++c) {
      if (score[c] > score[best]) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<std::size_t> balanced_subset(const std::vector<SyntheticScene>& scenes, std::size_t num_classes,
                                         double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("fraction must lie in (0, 1]");
  const std::size_t n = scenes.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (fraction == 1.0) return all;
  const auto want = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction)));

  Rng rng(derive_seed(seed, "subset"));
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<char> has(num_classes, 0);
    for (auto l : scenes[i].mask) {
      if (l < num_classes) has[l] = 1;
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (has[c]) by_class[c].push_back(i);
    }
  }
  for (auto& v : by_class) rng.shuffle(v);
  std::vector<char> used(n, 0);
  std::vector<std::size_t> cursor(num_classes, 0), out;
  bool progress = true;
  while (out.size() < want && progress) {
    progress = false;
    for (std::size_t c = 0; c < num_classes && out.size() < want; ++c) {
      auto& cur = cursor[c];
      while (cur < by_class[c].size() && used[by_class[c][cur]]) ++cur;
      if (cur == by_class[c].size()) continue;
      used[by_class[c][cur]] = 1;
      out.push_back(by_class[c][cur]);
      progress = true;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- protocols

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (double x : r.per_class_iou) per.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  nlohmann::json j{{"protocol", r.protocol}, {"fraction", r.fraction},     {"seeds", r.seeds},
                   {"scores", r.scores},     {"mIoU_mean", r.miou_mean}, {"mIoU_std", r.miou_std},
                   {"per_class_iou", per}};
  j[r.protocol == "incontext" ? "k" : "K"] = r.K;
  return j;
}

namespace {

void summarize(EvalReport& r, const std::vector<std::vector<double>>& per_seed) {
  const double n = static_cast<double>(r.scores.size());
  r.miou_mean = std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / n;
  double var = 0;
  for (double s : r.scores) var += (s - r.miou_mean) * (s - r.miou_mean);
  r.miou_std = std::sqrt(var / n);
  const std::size_t C = per_seed.front().size();
  r.per_class_iou.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0;
    std::size_t m = 0;
    for (const auto& v : per_seed) {
      if (std::isnan(v[c])) continue;
      s += v[c];
      ++m;
    }
    r.per_class_iou[c] = m ? s / static_cast<double>(m) : std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

EvalReport eval_cluster(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& val,
                        std::size_t num_classes, const EvalOptions& opt, bool overcluster) {
  if (opt.seeds == 0) throw std::invalid_argument("eval: seeds must be positive");
  Tensor feats = extract_features(cfg, params, val);
  if (opt.normalize) feats = normalize_rows(feats);
  const auto gt = extract_labels(cfg, val, num_classes);

  EvalReport r;
  r.protocol = overcluster ? "overcluster" : "cluster";
  r.K = opt.K;
  r.seeds = opt.seeds;
  std::vector<std::vector<double>> per_seed;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    const auto ca = kmeans(feats, opt.K, opt.max_iters, derive_seed(opt.seed, "cluster", s));
    const auto map = overcluster ? overcluster_match(ca.ids, gt, opt.K, num_classes)
                                 : match_clusters(ca.ids, gt, opt.K, num_classes);
    std::vector<int> pred(gt.size());
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = map[static_cast<std::size_t>(ca.ids[i])];
    per_seed.push_back(per_class_iou(pred, gt, num_classes));
    r.scores.push_back(miou(pred, gt, num_classes));
  }
  summarize(r, per_seed);
  return r;
}

EvalReport eval_incontext_features(const Tensor& train_features, const std::vector<int>& train_labels,
                                   const std::vector<std::size_t>& train_image_of_row,
                                   const std::vector<SyntheticScene>& train, const Tensor& val_features,
                                   const std::vector<int>& val_labels, std::size_t num_classes,
                                   const EvalOptions& opt) {
  if (opt.seeds == 0) throw std::invalid_argument("eval: seeds must be positive");
  if (train_image_of_row.size() != train_labels.size()) throw ShapeError("eval: row-to-image map length mismatch");
  EvalReport r;
  r.protocol = "incontext";
  r.K = opt.k;
  r.fraction = opt.fraction;
  r.seeds = opt.fraction == 1.0 ? 1 : opt.seeds;
  const std::size_t d = train_features.cols();
  std::vector<std::vector<double>> per_seed;
  for (std::size_t s = 0; s < r.seeds; ++s) {
    const std::uint64_t sseed = derive_seed(opt.seed, "incontext", s);
    const auto subset = balanced_subset(train, num_classes, opt.fraction, sseed);
    std::vector<char> keep(train.size(), 0);
    for (std::size_t i : subset) keep[i] = 1;
    std::vector<double> f;
    std::vector<int> l;
    for (std::size_t row = 0; row < train_labels.size(); ++row) {
      if (!keep[train_image_of_row[row]]) continue;
      auto src = train_features.data().subspan(row * d, d);
      f.insert(f.end(), src.begin(), src.end());
      l.push_back(train_labels[row]);
    }
    const std::size_t m = l.size();
    const MemoryBank bank = make_memory_bank(Tensor({m, d}, std::move(f)), std::move(l), opt.cap, sseed);
    const auto pred = incontext_predict(val_features, bank, std::min(opt.k, bank.labels.size()), opt.temperature,
                                        num_classes);
    per_seed.push_back(per_class_iou(pred, val_labels, num_classes));
    r.scores.push_back(miou(pred, val_labels, num_classes));
  }
  summarize(r, per_seed);
  return r;
}

EvalReport eval_incontext(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& train,
                          const std::vector<SyntheticScene>& val, std::size_t num_classes, const EvalOptions& opt) {
  const Tensor tf = extract_features(cfg, params, train);
  const auto tl = extract_labels(cfg, train, num_classes);
  std::vector<std::size_t> image_of_row(tl.size());
  const std::size_t per_image = train.empty() ? 0 : tl.size() / train.size();
  for (std::size_t i = 0; i < image_of_row.size(); ++i) image_of_row[i] = i / per_image;
  return eval_incontext_features(tf, tl, image_of_row, train, extract_features(cfg, params, val),
                                 extract_labels(cfg, val, num_classes), num_classes, opt);
}

}  // namespace neco
