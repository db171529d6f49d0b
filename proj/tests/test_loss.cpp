#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "neco/loss.hpp"
#include "test_util.hpp"

using namespace neco;
using neco::testing::random_tensor;

namespace {

// Convex combination of random permutation matrices: exactly doubly stochastic.
Tensor random_doubly_stochastic(std::size_t n, Rng& rng) {
  std::vector<double> q(n * n, 0.0);
  std::vector<double> w(4);
  for (auto& x : w) x = rng.uniform(0.05, 1.0);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double wi : w) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    rng.shuffle(p);
    for (std::size_t i = 0; i < n; ++i) q[i * n + p[i]] += wi / total;
  }
  return Tensor({n, n}, std::move(q));
}

ReferenceSet make_refs(Tensor feats) {
  ReferenceSet refs;
  for (std::size_t i = 0; i < feats.rows(); ++i) refs.source_index.emplace_back(0, i);
  refs.features = std::move(feats);
  return refs;
}

FeatureGrid grid_with(Tensor tokens, std::size_t rows, std::size_t cols, std::vector<double> attention = {}) {
  FeatureGrid g;
  g.tokens = std::move(tokens);
  g.rows = rows;
  g.cols = cols;
  g.attention = std::move(attention);
  return g;
}

std::vector<LossConfig> loss_variants() {
  std::vector<LossConfig> out;
  for (auto net : {SortChoice::bitonic, SortChoice::odd_even, SortChoice::none}) {
    LossConfig c;
    c.network = net;
    out.push_back(c);
  }
  LossConfig arctan;
  arctan.relax = sortnet::RelaxKind::arctan;
  out.push_back(arctan);
  LossConfig topk;
  topk.top_k = 4;
  out.push_back(topk);
  return out;
}

}  // namespace

TEST(CosineDistance, Examples) {
  auto a = Tensor::matrix(3, 2, {1, 0, 0, 1, -1, 0});
  auto b = Tensor::matrix(1, 2, {2, 0});
  auto d = cosine_distance_matrix(a, b);
  EXPECT_NEAR(d.at(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(d.at(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(d.at(2, 0), 2.0, 1e-15);
}

TEST(CosineDistance, ZeroRowNamed) {
  auto a = Tensor::matrix(2, 2, {1, 0, 0, 0});
  try {
    cosine_distance_matrix(a, a);
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(SelectPatches, Examples) {
  auto tokens = Tensor::zeros({10, 2});
  EXPECT_EQ(select_patches(grid_with(tokens, 2, 5), PatchPolicy::both, 0.7).size(), 10u);
  std::vector<double> onehot(10, 0.0);
  onehot[5] = 1.0;
  EXPECT_EQ(select_patches(grid_with(tokens, 2, 5, onehot), PatchPolicy::fg, 0.7), (std::vector<std::size_t>{5}));
  auto bg = select_patches(grid_with(tokens, 2, 5, onehot), PatchPolicy::bg, 0.7);
  EXPECT_EQ(bg.size(), 9u);
  std::vector<double> uniform(10, 0.1);
  EXPECT_EQ(select_patches(grid_with(tokens, 2, 5, uniform), PatchPolicy::fg, 0.7),
            (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(select_patches(grid_with(tokens, 2, 5, uniform), PatchPolicy::bg, 0.7),
            (std::vector<std::size_t>{7, 8, 9}));
  EXPECT_THROW(select_patches(grid_with(tokens, 2, 5), PatchPolicy::fg, 0.7), std::invalid_argument);
}

TEST(SampleReferences, ExhaustiveInter) {
  Rng rng(1);
  std::vector<FeatureGrid> batch{grid_with(random_tensor({4, 3}, rng), 2, 2), grid_with(random_tensor({4, 3}, rng), 2, 2)};
  LossConfig cfg;
  Rng draw(7);
  auto refs = sample_references(batch, cfg, 8, draw);
  EXPECT_EQ(refs.size(), 8u);
  auto sorted = refs.source_index;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(sorted[i], std::make_pair(i / 4, i % 4));
  for (std::size_t r = 0; r < 8; ++r) {
    auto [img, p] = refs.source_index[r];
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(refs.features.at(r, c), batch[img].tokens.at(p, c));
  }
  EXPECT_FALSE(refs.features.requires_grad());
  EXPECT_THROW(sample_references(batch, cfg, 9, draw), std::invalid_argument);
}

TEST(SampleReferences, IntraAndDeterminism) {
  Rng rng(2);
  std::vector<FeatureGrid> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(grid_with(random_tensor({9, 3}, rng), 3, 3));
  LossConfig cfg;
  cfg.reference_mode = ReferenceMode::intra;
  Rng a(3), b(3);
  auto ra = sample_references(batch, cfg, 6, a, 2);
  auto rb = sample_references(batch, cfg, 6, b, 2);
  for (auto [img, p] : ra.source_index) EXPECT_EQ(img, 2u);
  EXPECT_EQ(ra.source_index, rb.source_index);
  EXPECT_EQ(ra.features.data()[0], rb.features.data()[0]);
  EXPECT_THROW(sample_references(batch, cfg, 10, a, 2), std::invalid_argument);
}

TEST(RestrictTopK, Examples) {
  auto full = restrict_top_k(Tensor::vector({0.4, 0.2, 0.9}), 3);
  EXPECT_EQ(full.indices, (std::vector<std::size_t>{0, 1, 2}));
  auto one = restrict_top_k(Tensor::vector({0.9, 0.1, 0.5}), 1);
  EXPECT_EQ(one.indices, (std::vector<std::size_t>{1}));
  EXPECT_EQ(one.subrow[0], 0.1);
  auto tie = restrict_top_k(Tensor::vector({0.3, 0.3, 0.8}), 2);
  EXPECT_EQ(tie.indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(restrict_top_k(Tensor::vector({0.3}), 2), std::invalid_argument);
  EXPECT_THROW(restrict_top_k(Tensor::vector({0.3}), 0), std::invalid_argument);
}

TEST(CrossEntropyPerm, Examples) {
  EXPECT_EQ(cross_entropy_perm(Tensor::identity(3), Tensor::identity(3)).item(), 0.0);
  EXPECT_NEAR(cross_entropy_perm(Tensor::identity(2), Tensor::full({2, 2}, 0.5)).item(), 2 * std::log(2.0), 1e-15);
  EXPECT_THROW(cross_entropy_perm(Tensor::identity(2), Tensor::identity(3)), ShapeError);
}

TEST(CrossEntropyPerm, GibbsBound) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    auto qt = random_doubly_stochastic(n, rng);
    auto qs = random_doubly_stochastic(n, rng);
    EXPECT_GE(cross_entropy_perm(qt, qs).item() - cross_entropy_perm(qt, qt).item(), -1e-10);
  }
}

TEST(CrossEntropyPerm, NoGradientToTarget) {
  Tape tape;
  TapeScope scope(tape);
  auto qt = tape.watch(Tensor::full({2, 2}, 0.5));
  auto qs = tape.watch(Tensor::matrix(2, 2, {0.7, 0.3, 0.3, 0.7}));
  auto g = tape.backward(cross_entropy_perm(qt, qs));
  for (double x : g.of(qt).data()) EXPECT_EQ(x, 0.0);
  EXPECT_NE(g.of(qs)[0], 0.0);
}

TEST(NecoLoss, SingleRowIsEntropy) {
  Rng rng(5);
  auto f = random_tensor({1, 4}, rng);
  auto refs = make_refs(random_tensor({2, 4}, rng));
  LossConfig cfg;
  cfg.steepness_student = cfg.steepness_teacher = 1.0;
  const double loss = neco_loss(f, f, refs, cfg).item();
  auto d = cosine_distance_matrix(f, refs.features);
  auto q = sortnet::soft_sort_perm(ops::row(d, 0), sortnet::build_network(sortnet::NetworkKind::bitonic, 2),
                                   cfg.student_family());
  EXPECT_NEAR(loss, cross_entropy_perm(q, q).item(), 1e-14);
  EXPECT_GT(loss, 0.0);
}

TEST(NecoLoss, ReferencePermutationInvariance) {
  Rng rng(6);
  for (const auto& cfg : loss_variants()) {
    for (int trial = 0; trial < 5; ++trial) {
      auto fs = random_tensor({4, 6}, rng);
      auto ft = random_tensor({4, 6}, rng);
      auto refs = random_tensor({8, 6}, rng);
      std::vector<std::size_t> perm(8);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      rng.shuffle(perm);
      const double a = neco_loss(fs, ft, make_refs(refs), cfg).item();
      auto shuffled = make_refs(ops::gather_rows(refs, perm));
      for (std::size_t i = 0; i < 8; ++i) shuffled.source_index[i] = {0, perm[i]};
      const double b = neco_loss(fs, ft, shuffled, cfg).item();
      EXPECT_NEAR(a, b, 1e-9) << to_string(cfg.network);
    }
  }
}

TEST(NecoLoss, ScaleInvariance) {
  Rng rng(7);
  for (const auto& cfg : loss_variants()) {
    auto fs = random_tensor({4, 6}, rng);
    auto ft = random_tensor({4, 6}, rng);
    auto refs = random_tensor({8, 6}, rng);
    auto scale_rows = [&](const Tensor& t) {
      Tensor s = t.detach();
      auto d = s.mutable_data();
      for (std::size_t i = 0; i < s.rows(); ++i) {
        const double c = rng.uniform(0.1, 10);
        for (std::size_t j = 0; j < s.cols(); ++j) d[i * s.cols() + j] *= c;
      }
      return s;
    };
    const double a = neco_loss(fs, ft, make_refs(refs), cfg).item();
    const double b = neco_loss(scale_rows(fs), scale_rows(ft), make_refs(scale_rows(refs)), cfg).item();
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(NecoLoss, GradientMatchesFiniteDifference) {
  Rng rng(8);
  auto variants = loss_variants();
  LossConfig euclid;
  euclid.similarity = Similarity::euclidean;
  euclid.steepness_student = euclid.steepness_teacher = 1.0;
  variants.push_back(euclid);
  for (const auto& cfg : variants) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 1 + rng.below(4);
      const std::size_t r = 5 + rng.below(4);
      auto ft = random_tensor({n, 5}, rng);
      auto refs = make_refs(random_tensor({r, 5}, rng));
      auto fn = [&](const Tensor& fs) { return neco_loss(fs, ft, refs, cfg); };
      EXPECT_LE(finite_difference_check(fn, random_tensor({n, 5}, rng), 1e-6), 1e-5)
          << to_string(cfg.network) << " R=" << r;
    }
  }
}

TEST(NecoLoss, TeacherReceivesNoGradient) {
  Rng rng(9);
  auto fs0 = random_tensor({3, 5}, rng);
  auto ft0 = random_tensor({3, 5}, rng);
  auto refs = make_refs(random_tensor({8, 5}, rng));
  LossConfig cfg;
  Tape tape;
  TapeScope scope(tape);
  auto fs = tape.watch(fs0);
  auto ft = tape.watch(ft0);
  auto loss = neco_loss(fs, ft, refs, cfg);
  auto g = tape.backward(loss);
  for (double x : g.of(ft).data()) EXPECT_EQ(x, 0.0);
  double gs = 0;
  for (double x : g.of(fs).data()) gs += std::abs(x);
  EXPECT_GT(gs, 0.0);
  auto ft1 = ft0.detach();
  ft1.mutable_data()[0] += 0.5;
  NoGradScope off;
  EXPECT_NE(neco_loss(fs0, ft1, refs, cfg).item(), loss.item());
}

TEST(NecoLoss, GibbsLowerBound) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto fs = random_tensor({4, 6}, rng);
    auto ft = random_tensor({4, 6}, rng);
    auto refs = make_refs(random_tensor({8, 6}, rng));
    LossConfig cfg;
    const double loss = neco_loss(fs, ft, refs, cfg).item();
    double bound = 0;
    auto net = sortnet::build_network(sortnet::NetworkKind::bitonic, 8);
    auto dt = cosine_distance_matrix(ft, refs.features);
    for (std::size_t i = 0; i < 4; ++i) {
      auto q = sortnet::soft_sort_perm(ops::row(dt, i), net, cfg.teacher_family());
      bound += cross_entropy_perm(q, q).item();
    }
    EXPECT_GE(loss - bound, -1e-10);
  }
}

TEST(NecoLoss, EuclideanOrderingMatchesCosineOnUnitFeatures) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = ops::row_normalize(random_tensor({3, 6}, rng));
    auto refs = ops::row_normalize(random_tensor({10, 6}, rng));
    auto dc = reference_distances(a, refs, Similarity::cosine);
    auto de = reference_distances(a, refs, Similarity::euclidean);
    for (std::size_t i = 0; i < 3; ++i) {
      auto oc = sortnet::hard_sort_oracle(ops::row(dc, i).data()).order;
      auto oe = sortnet::hard_sort_oracle(ops::row(de, i).data()).order;
      EXPECT_EQ(oc, oe);
    }
  }
}

TEST(NecoLoss, Deterministic) {
  Rng rng(12);
  auto fs = random_tensor({4, 6}, rng);
  auto ft = random_tensor({4, 6}, rng);
  auto refs = make_refs(random_tensor({16, 6}, rng));
  LossConfig cfg;
  EXPECT_EQ(neco_loss(fs, ft, refs, cfg).item(), neco_loss(fs, ft, refs, cfg).item());
}

TEST(NecoLoss, ConfigErrors) {
  LossConfig cfg;
  cfg.top_k = 65;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = LossConfig{};
  cfg.attention_mass = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_THROW(sort_choice_from_string("quick"), std::invalid_argument);
  EXPECT_EQ(patch_policy_from_string("fg"), PatchPolicy::fg);
}
