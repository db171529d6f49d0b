#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neco/eval.hpp"
#include "test_util.hpp"

using namespace neco;

namespace {

std::pair<double, std::vector<int>> brute_force(const Tensor& cost) {
  const std::size_t n = cost.rows();
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  double best = INFINITY;
  std::vector<int> arg;
  do {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += cost.at(i, static_cast<std::size_t>(p[i]));
    if (s < best) {  // permutations come in lexicographic order: keep the first optimum
      best = s;
      arg = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return {best, arg};
}

Tensor points(std::vector<std::vector<double>> rows) {
  std::vector<double> d;
  for (auto& r : rows) d.insert(d.end(), r.begin(), r.end());
  return Tensor::matrix(rows.size(), rows.front().size(), std::move(d));
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

TEST(Hungarian, Diagonal) {
  Tensor c = Tensor::matrix(3, 3, {0, 1, 1, 1, 0, 1, 1, 1, 0});
  auto m = hungarian(c);
  EXPECT_EQ(m.col_of_row, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(m.cost, 0.0);
}

TEST(Hungarian, TwoByTwo) {
  auto m = hungarian(Tensor::matrix(2, 2, {1, 2, 2, 1}));
  EXPECT_EQ(m.col_of_row, (std::vector<int>{0, 1}));
  EXPECT_EQ(m.cost, 2.0);
}

TEST(Hungarian, MatchesExhaustiveSearch) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 7;
    std::vector<double> d(n * n);
    // Small integer range so that ties among optima are common.
    for (auto& x : d) x = static_cast<double>(rng.below(trial % 2 ? 4 : 100));
    Tensor c({n, n}, std::move(d));
    auto [best, arg] = brute_force(c);
    auto m = hungarian(c);
    EXPECT_DOUBLE_EQ(m.cost, best) << "trial " << trial;
    EXPECT_EQ(m.col_of_row, arg) << "trial " << trial;
  }
}

TEST(Hungarian, SixBySixRandomMatchesAll720) {
  Rng rng(11);
  std::vector<double> d(36);
  for (auto& x : d) x = static_cast<double>(rng.below(50));
  Tensor c({6, 6}, std::move(d));
  EXPECT_DOUBLE_EQ(hungarian(c).cost, brute_force(c).first);
}

TEST(Hungarian, Rectangular) {
  // More rows than columns: one row goes to a zero-cost dummy.
  auto m = hungarian(Tensor::matrix(3, 2, {5, 9, 1, 8, 7, 2}));
  EXPECT_EQ(m.col_of_row, (std::vector<int>{-1, 0, 1}));
  EXPECT_DOUBLE_EQ(m.cost, 3.0);
  auto w = hungarian(Tensor::matrix(2, 3, {4, 1, 3, 2, 0, 5}));
  EXPECT_DOUBLE_EQ(w.cost, 3.0);
  EXPECT_EQ(w.col_of_row, (std::vector<int>{1, 0}));
}

TEST(Hungarian, RejectsNonFinite) {
  EXPECT_THROW(hungarian(Tensor::matrix(1, 1, {NAN})), DomainError);
}

TEST(Miou, Examples) {
  EXPECT_DOUBLE_EQ(miou({0, 1, 2, 2}, {0, 1, 2, 2}, 3), 1.0);
  EXPECT_DOUBLE_EQ(miou({1, 1, 1, 1}, {0, 0, 0, 0}, 2), 0.0);
  EXPECT_NEAR(miou({0, 1, 1, 1}, {0, 0, 1, 1}, 2), 7.0 / 12.0, 1e-15);
}

TEST(Miou, AbsentClassesExcluded) {
  auto iou = per_class_iou({0, 0, 1}, {0, 0, 1}, 4);
  EXPECT_TRUE(std::isnan(iou[2]));
  EXPECT_TRUE(std::isnan(iou[3]));
  EXPECT_DOUBLE_EQ(miou({0, 0, 1}, {0, 0, 1}, 4), 1.0);
  // Predicted but absent from the ground truth: counted with IoU 0.
  EXPECT_DOUBLE_EQ(miou({0, 2, 1}, {0, 0, 1}, 4), (0.5 + 1.0 + 0.0) / 3.0);
}

TEST(Miou, InvariantUnderConsistentRelabeling) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<int> p(50), g(50), perm{2, 0, 3, 1};
    for (auto& x : p) x = static_cast<int>(rng.below(4));
    for (auto& x : g) x = static_cast<int>(rng.below(4));
    std::vector<int> p2(50), g2(50);
    for (int i = 0; i < 50; ++i) {
      p2[i] = perm[p[i]];
      g2[i] = perm[g[i]];
    }
    EXPECT_NEAR(miou(p, g, 4), miou(p2, g2, 4), 1e-15);
  }
}

TEST(Miou, RejectsBadInput) {
  EXPECT_THROW(miou({0}, {0, 1}, 2), ShapeError);
  EXPECT_THROW(miou({0}, {5}, 2), std::invalid_argument);
}

TEST(KMeans, EachPointOwnCluster) {
  Tensor x = points({{0, 0}, {5, 1}, {-3, 4}, {2, -6}});
  auto a = kmeans(x, 4, 50, 1);
  EXPECT_EQ(a.inertia, 0.0);
  std::vector<int> ids = a.ids;
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(ids, (std::vector<int>{0, 1, 2, 3}));
}

TEST(KMeans, SingleClusterIsTheMean) {
  Rng rng(5);
  Tensor x = neco::testing::random_tensor({30, 3}, rng);
  auto a = kmeans(x, 1, 50, 2);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0;
    for (std::size_t i = 0; i < 30; ++i) m += x.at(i, j);
    EXPECT_NEAR(a.centroids.at(0, j), m / 30, 1e-12);
  }
}

TEST(KMeans, TwoBlobsMatchExhaustivePartition) {
  Rng rng(9);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 12; ++i) {
    const double cx = i < 6 ? -5.0 : 5.0;
    rows.push_back({cx + rng.uniform(-1, 1), rng.uniform(-1, 1)});
  }
  Tensor x = points(rows);
  // Exhaustive minimiser over all 2-partitions.
  double best = INFINITY;
  unsigned best_mask = 0;
  for (unsigned mask = 1; mask < (1u << 11); ++mask) {  // point 11 fixed in part 0
    double cost = 0;
    for (int part = 0; part < 2; ++part) {
      std::vector<double> mean(2, 0);
      int cnt = 0;
      for (int i = 0; i < 12; ++i) {
        if (((mask >> i) & 1u) != static_cast<unsigned>(part)) continue;
        mean[0] += rows[i][0];
        mean[1] += rows[i][1];
        ++cnt;
      }
      if (cnt == 0) continue;
      for (auto& m : mean) m /= cnt;
      for (int i = 0; i < 12; ++i) {
        if (((mask >> i) & 1u) == static_cast<unsigned>(part)) cost += sq_dist(rows[i], mean);
      }
    }
    if (cost < best) {
      best = cost;
      best_mask = mask;
    }
  }
  auto a = kmeans(x, 2, 100, 4);
  EXPECT_NEAR(a.inertia, best, 1e-9);
  for (int i = 0; i < 12; ++i) {
    const bool same_as_last = a.ids[i] == a.ids[11];
    EXPECT_EQ(same_as_last, ((best_mask >> i) & 1u) == 0) << i;
  }
}

TEST(KMeans, InertiaMonotoneAndFixpointStable) {
  Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    Tensor x = neco::testing::random_tensor({200, 4}, rng);
    auto a = kmeans(x, 7, 200, static_cast<std::uint64_t>(t));
    for (std::size_t i = 1; i < a.inertia_trace.size(); ++i) {
      EXPECT_LE(a.inertia_trace[i], a.inertia_trace[i - 1] + 1e-12);
    }
    // One more assignment against the final centroids changes nothing.
    for (std::size_t i = 0; i < 200; ++i) {
      int best = 0;
      double bd = INFINITY;
      for (int k = 0; k < 7; ++k) {
        const double dd = sq_dist(x.data().subspan(i * 4, 4), a.centroids.data().subspan(static_cast<std::size_t>(k) * 4, 4));
        if (dd < bd - 1e-12) {
          bd = dd;
          best = k;
        }
      }
      EXPECT_EQ(a.ids[i], best);
    }
  }
}

TEST(KMeans, DeterministicUnderSeed) {
  Rng rng(2);
  Tensor x = neco::testing::random_tensor({100, 3}, rng);
  EXPECT_EQ(kmeans(x, 5, 100, 3).ids, kmeans(x, 5, 100, 3).ids);
}

TEST(KMeans, EmptyClusterReseeded) {
  // Duplicated points force coincident k-means++ picks to be resolved.
  Tensor x = points({{0, 0}, {0, 0}, {0, 0}, {10, 0}});
  auto a = kmeans(x, 3, 20, 0);
  EXPECT_EQ(a.inertia, 0.0);
}

TEST(KMeans, TooFewPoints) { EXPECT_THROW(kmeans(Tensor::matrix(2, 1, {1, 2}), 3, 10, 0), std::invalid_argument); }

TEST(Overcluster, PureClustersIdentity) {
  std::vector<int> gt{0, 0, 1, 1, 2, 2};
  std::vector<int> cl{2, 2, 0, 0, 1, 1};
  auto direct = match_clusters(cl, gt, 3, 3);
  auto over = overcluster_match(cl, gt, 3, 3);
  EXPECT_EQ(direct, over);
  EXPECT_EQ(over, (std::vector<int>{1, 2, 0}));
}

TEST(Overcluster, PureDuplicatesMerge) {
  std::vector<int> gt{1, 1, 1, 1, 0, 0};
  std::vector<int> cl{0, 0, 1, 1, 2, 2};
  EXPECT_EQ(overcluster_match(cl, gt, 3, 2), (std::vector<int>{1, 1, 0}));
}

TEST(Overcluster, HandComputedToy) {
  // 4 x 4 mask, classes 0..2, five clusters:
  //   gt          clusters
  //   0 0 1 1     0 0 1 1
  //   0 0 1 1     0 3 1 2
  //   2 2 1 1     4 4 4 2
  //   2 2 0 0     4 4 3 3
  // Precisions: c0 {0: 3/3}, c1 {1: 3/3}, c2 {1: 2/2}, c3 {0: 3/3},
  // c4 {2: 4/5, 1: 1/5} -> c0,c3 to class 0; c1,c2 to class 1; c4 to class 2.
  std::vector<int> gt{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2, 0, 0};
  std::vector<int> cl{0, 0, 1, 1, 0, 3, 1, 2, 4, 4, 4, 2, 4, 4, 3, 3};
  auto map = overcluster_match(cl, gt, 5, 3);
  EXPECT_EQ(map, (std::vector<int>{0, 1, 1, 0, 2}));
  std::vector<int> pred(16);
  for (int i = 0; i < 16; ++i) pred[i] = map[cl[i]];
  // IoU: class 0 = 6/6, class 1 = 5/6, class 2 = 4/5.
  EXPECT_NEAR(miou(pred, gt, 3), (1.0 + 5.0 / 6.0 + 4.0 / 5.0) / 3.0, 1e-15);
}

TEST(Overcluster, PrecisionTieGoesToLowerClass) {
  std::vector<int> gt{0, 1, 1, 1};
  std::vector<int> cl{0, 0, 1, 1};
  // Cluster 0 is half class 0, half class 1 -> class 0.
  EXPECT_EQ(overcluster_match(cl, gt, 2, 2)[0], 0);
}

TEST(MemoryBank, SizesAndCap) {
  Rng rng(4);
  Tensor f = neco::testing::random_tensor({640, 5}, rng);
  std::vector<int> l(640);
  for (auto& x : l) x = static_cast<int>(rng.below(3));
  auto full = make_memory_bank(f, l, 1000, 1);
  EXPECT_EQ(full.labels.size(), 640u);
  auto small = make_memory_bank(f, l, 100, 1);
  EXPECT_EQ(small.labels.size(), 100u);
  EXPECT_EQ(small.features.rows(), 100u);
  auto again = make_memory_bank(f, l, 100, 1);
  EXPECT_EQ(small.labels, again.labels);
  EXPECT_EQ(neco::testing::max_abs_diff(small.features, again.features), 0.0);
  for (std::size_t i = 0; i < 100; ++i) {
    double n = 0;
    for (std::size_t j = 0; j < 5; ++j) n += small.features.at(i, j) * small.features.at(i, j);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
    EXPECT_GE(small.labels[i], 0);
    EXPECT_LT(small.labels[i], 3);
  }
}

TEST(MemoryBank, FromEncoderCountsAllPatches) {
  DatasetManifest m;
  m.num_scenes = 10;
  auto scenes = generate_dataset(m);
  EncoderConfig cfg;
  Rng rng(1);
  ParamSet p = init_encoder(cfg, rng);
  auto bank = build_memory_bank(cfg, p, scenes, m.num_classes, 50000, 0);
  EXPECT_EQ(bank.labels.size(), 640u);
}

TEST(InContext, SingleClassBank) {
  Rng rng(8);
  auto bank = make_memory_bank(neco::testing::random_tensor({20, 4}, rng), std::vector<int>(20, 2), 100, 0);
  auto pred = incontext_predict(neco::testing::random_tensor({7, 4}, rng), bank, 5, 0.1, 3);
  for (int p : pred) EXPECT_EQ(p, 2);
}

TEST(InContext, ExactMatchWithK1) {
  Rng rng(10);
  Tensor f = neco::testing::random_tensor({15, 6}, rng);
  std::vector<int> l(15);
  for (std::size_t i = 0; i < 15; ++i) l[i] = static_cast<int>(i % 4);
  auto bank = make_memory_bank(f, l, 100, 0);
  for (std::size_t i = 0; i < 15; ++i) {
    Tensor q({1, 6}, std::vector<double>(f.data().begin() + static_cast<std::ptrdiff_t>(i * 6),
                                         f.data().begin() + static_cast<std::ptrdiff_t>(i * 6 + 6)));
    EXPECT_EQ(incontext_predict(q, bank, 1, 0.1, 4)[0], l[i]);
  }
}

TEST(InContext, SoftmaxWeightsFavourCloserNeighbour) {
  // Unit bank rows with cosines 0.9 and 0.1 to the query e0.
  const double a = 0.9, b = 0.1;
  Tensor bank_f = Tensor::matrix(2, 2, {a, std::sqrt(1 - a * a), b, -std::sqrt(1 - b * b)});
  auto bank = make_memory_bank(bank_f, {0, 1}, 10, 0);
  EXPECT_EQ(incontext_predict(Tensor::matrix(1, 2, {1, 0}), bank, 2, 0.1, 2)[0], 0);
  // Swapping the labels swaps the prediction.
  auto swapped = make_memory_bank(bank_f, {1, 0}, 10, 0);
  EXPECT_EQ(incontext_predict(Tensor::matrix(1, 2, {1, 0}), swapped, 2, 0.1, 2)[0], 1);
}

TEST(InContext, ScaleInvariantQueries) {
  Rng rng(12);
  Tensor f = neco::testing::random_tensor({40, 5}, rng);
  std::vector<int> l(40);
  for (auto& x : l) x = static_cast<int>(rng.below(3));
  auto bank = make_memory_bank(f, l, 100, 0);
  Tensor q = neco::testing::random_tensor({10, 5}, rng);
  std::vector<double> scaled(q.data().begin(), q.data().end());
  for (std::size_t i = 0; i < 10; ++i) {
    const double s = rng.uniform(0.1, 10);
    for (std::size_t j = 0; j < 5; ++j) scaled[i * 5 + j] *= s;
  }
  EXPECT_EQ(incontext_predict(q, bank, 7, 0.1, 3), incontext_predict(Tensor({10, 5}, scaled), bank, 7, 0.1, 3));
}

TEST(InContext, TieGoesToLowerClass) {
  Tensor f = Tensor::matrix(2, 2, {1, 0, 1, 0});
  auto bank = make_memory_bank(f, {1, 0}, 10, 0);
  EXPECT_EQ(incontext_predict(Tensor::matrix(1, 2, {1, 0}), bank, 2, 0.1, 2)[0], 0);
}

namespace {

struct OracleData {
  std::vector<SyntheticScene> train, val;
  Tensor train_f, val_f;
  std::vector<int> train_l, val_l;
  std::vector<std::size_t> image_of_row;
};

// One-hot class features straight from the masks.
OracleData oracle_data(bool random_features) {
  DatasetManifest m;
  m.num_scenes = 24;
  OracleData o;
  o.train = generate_dataset(m);
  m.split = Split::val;
  m.num_scenes = 8;
  o.val = generate_dataset(m);
  EncoderConfig cfg;
  o.train_l = extract_labels(cfg, o.train, 4);
  o.val_l = extract_labels(cfg, o.val, 4);
  Rng rng(5);
  auto feats = [&](const std::vector<int>& l) {
    std::vector<double> d(l.size() * 4, 0.0);
    for (std::size_t i = 0; i < l.size(); ++i) {
      if (random_features) {
        for (std::size_t j = 0; j < 4; ++j) d[i * 4 + j] = rng.uniform(-1, 1);
      } else {
        d[i * 4 + static_cast<std::size_t>(l[i])] = 1.0;
      }
    }
    return Tensor({l.size(), 4}, std::move(d));
  };
  o.train_f = feats(o.train_l);
  o.val_f = feats(o.val_l);
  for (std::size_t i = 0; i < o.train_l.size(); ++i) o.image_of_row.push_back(i / 64);
  return o;
}

}  // namespace

TEST(EvalInContext, OracleFeaturesScorePerfectly) {
  auto o = oracle_data(false);
  EvalOptions opt;
  auto r = eval_incontext_features(o.train_f, o.train_l, o.image_of_row, o.train, o.val_f, o.val_l, 4, opt);
  EXPECT_NEAR(r.miou_mean, 1.0, 1e-12);
}

TEST(EvalInContext, FractionOneIsRepeatable) {
  auto o = oracle_data(true);
  EvalOptions opt;
  opt.seeds = 5;
  auto a = eval_incontext_features(o.train_f, o.train_l, o.image_of_row, o.train, o.val_f, o.val_l, 4, opt);
  auto b = eval_incontext_features(o.train_f, o.train_l, o.image_of_row, o.train, o.val_f, o.val_l, 4, opt);
  EXPECT_EQ(a.seeds, 1u);
  EXPECT_EQ(a.miou_mean, b.miou_mean);
}

TEST(EvalInContext, RandomFeaturesNearPriorBaseline) {
  auto o = oracle_data(true);
  EvalOptions opt;
  auto r = eval_incontext_features(o.train_f, o.train_l, o.image_of_row, o.train, o.val_f, o.val_l, 4, opt);
  // Majority-class baseline: predict the most frequent training label everywhere.
  std::vector<std::size_t> counts(4, 0);
  for (int l : o.train_l) ++counts[static_cast<std::size_t>(l)];
  const int major = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  const double baseline = miou(std::vector<int>(o.val_l.size(), major), o.val_l, 4);
  EXPECT_LT(std::abs(r.miou_mean - baseline), 0.15) << r.miou_mean << " vs " << baseline;
  EXPECT_LT(r.miou_mean, 0.5);
}

TEST(EvalInContext, FractionsAverageOverSeeds) {
  auto o = oracle_data(false);
  EvalOptions opt;
  opt.fraction = 0.125;
  opt.seeds = 5;
  auto r = eval_incontext_features(o.train_f, o.train_l, o.image_of_row, o.train, o.val_f, o.val_l, 4, opt);
  EXPECT_EQ(r.scores.size(), 5u);
  auto j = to_json(r);
  EXPECT_EQ(j["protocol"], "incontext");
  EXPECT_EQ(j["k"], 30);
  EXPECT_TRUE(j.contains("mIoU_std"));
}

TEST(BalancedSubset, CoversEveryClassAndIsSeeded) {
  DatasetManifest m;
  m.num_scenes = 64;
  auto scenes = generate_dataset(m);
  auto a = balanced_subset(scenes, 4, 0.125, 3);
  EXPECT_EQ(a.size(), 8u);
  EXPECT_EQ(a, balanced_subset(scenes, 4, 0.125, 3));
  std::vector<char> seen(4, 0);
  for (std::size_t i : a) {
    for (auto l : scenes[i].mask) seen[l] = 1;
  }
  for (int c = 0; c < 4; ++c) EXPECT_TRUE(seen[c]) << c;
  EXPECT_THROW(balanced_subset(scenes, 4, 0.0, 0), std::invalid_argument);
}

TEST(EvalCluster, ReportInRange) {
  DatasetManifest m;
  m.num_scenes = 8;
  m.split = Split::val;
  auto val = generate_dataset(m);
  EncoderConfig cfg;
  Rng rng(3);
  ParamSet p = init_encoder(cfg, rng);
  EvalOptions opt;
  opt.K = 4;
  opt.seeds = 2;
  auto r = eval_cluster(cfg, p, val, 4, opt, false);
  EXPECT_GE(r.miou_mean, 0.0);
  EXPECT_LE(r.miou_mean, 1.0);
  opt.K = 12;
  auto o = eval_cluster(cfg, p, val, 4, opt, true);
  EXPECT_GE(o.miou_mean, 0.0);
  EXPECT_LE(o.miou_mean, 1.0);
  EXPECT_EQ(to_json(o)["K"], 12);
}
