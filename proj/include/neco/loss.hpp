#pragma once

// Patch neighbour-consistency loss. Each aligned student patch and its
// teacher counterpart are compared against a shared set of detached reference
// features; both distance rows are soft-sorted and the teacher's relaxed
// permutation is the cross-entropy target for the student's.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "neco/feature_grid.hpp"
#include "neco/rng.hpp"
#include "neco/sortnet.hpp"
#include "neco/tensor.hpp"

namespace neco {

enum class SortChoice { odd_even, bitonic, none };
enum class Similarity { cosine, euclidean };
enum class ReferenceMode { intra, inter };
enum class PatchPolicy { fg, bg, both };

struct LossConfig {
  double steepness_student = 100.0;
  double steepness_teacher = 100.0;
  SortChoice network = SortChoice::bitonic;
  sortnet::RelaxKind relax = sortnet::RelaxKind::logistic;
  double lambda = 0.25;  // logistic family only
  std::size_t top_k = 0;  // 0 = all references
  Similarity similarity = Similarity::cosine;
  ReferenceMode reference_mode = ReferenceMode::inter;
  PatchPolicy patch_policy = PatchPolicy::both;
  double attention_mass = 0.7;
  std::size_t num_references = 64;

  sortnet::RelaxFamily student_family() const;
  sortnet::RelaxFamily teacher_family() const;
  void validate() const;
};

struct ReferenceSet {
  Tensor features;  // R x d, never tracked
  std::vector<std::pair<std::size_t, std::size_t>> source_index;  // (image, patch)
  ReferenceMode mode = ReferenceMode::inter;

  std::size_t size() const { return source_index.size(); }
};

// 1 - cos(A_i, B_j). Throws on zero-norm rows.
Tensor cosine_distance_matrix(const Tensor& a, const Tensor& b);

// Indices kept by a patch policy. fg is the shortest prefix of patches by
// descending attention (ties to the lower index) whose attention reaches
// `mass`, returned in ascending index order; bg is its complement.
std::vector<std::size_t> select_patches(const FeatureGrid& grid, PatchPolicy policy, double mass);

// Draws `count` rows without replacement from the policy-filtered patches of
// every batch grid (inter) or of batch[anchor] alone (intra).
ReferenceSet sample_references(const std::vector<FeatureGrid>& batch, const LossConfig& cfg, std::size_t count,
                               Rng& rng, std::size_t anchor = 0);

struct TopK {
  std::vector<std::size_t> indices;  // ascending
  Tensor subrow;
};

// The k smallest entries, ties to the lower index. Differentiable through the
// kept entries only.
TopK restrict_top_k(const Tensor& row, std::size_t k);

// -sum_{j,k} Qt(j,k) log Qs(j,k); Qt is treated as a constant.
Tensor cross_entropy_perm(const Tensor& qt, const Tensor& qs);

// Sum over aligned rows of cross_entropy_perm(Q_t,i, Q_s,i).
Tensor neco_loss(const Tensor& student, const Tensor& teacher, const ReferenceSet& refs, const LossConfig& cfg);

// Distances of each row of `a` to the references under cfg.similarity.
Tensor reference_distances(const Tensor& a, const Tensor& refs, Similarity similarity);

std::string to_string(SortChoice v);
std::string to_string(Similarity v);
std::string to_string(ReferenceMode v);
std::string to_string(PatchPolicy v);
SortChoice sort_choice_from_string(const std::string& s);
Similarity similarity_from_string(const std::string& s);
ReferenceMode reference_mode_from_string(const std::string& s);
PatchPolicy patch_policy_from_string(const std::string& s);

}  // namespace neco
