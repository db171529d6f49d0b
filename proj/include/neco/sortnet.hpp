#pragma once

// Differentiable sorting networks.
//
// A network is a fixed schedule of compare-exchange layers. Each exchange of
// positions (i, j), i < j, is relaxed into a 2x2 doubly stochastic block
//   [ a   1-a ]
//   [ 1-a   a ],   a = f(v_j - v_i)
// which moves the soft minimum to i and the soft maximum to j. The relaxed
// permutation is the left-to-right product perm = P_L ... P_1, so that
// sorted_values = perm * values and perm(k, r) is the weight of input r at
// ascending rank k.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "neco/tensor.hpp"

namespace neco::sortnet {

enum class RelaxKind { arctan, logistic };

// Sigmoid-shaped relaxation of the step function, centred at 0.
//  arctan:   f(x) = atan(beta x) / pi + 1/2
//  logistic: f(x) = sigmoid(beta x / (|x| + 1e-10)^lambda)
// lambda = 0 gives the plain logistic sigmoid.
struct RelaxFamily {
  RelaxKind kind = RelaxKind::logistic;
  double steepness = 100.0;
  double lambda = 0.25;

  double operator()(double x) const;
  double derivative(double x) const;
  // f(x), f(-x) and f'(x) sharing one transcendental evaluation.
  struct Eval {
    double value, mirrored, slope;
  };
  Eval eval(double x) const;
  void validate() const;
};

double relax_fn(double x, const RelaxFamily& family);

// Elementwise relax_fn as a differentiable primitive.
Tensor relax(const Tensor& x, const RelaxFamily& family);

enum class NetworkKind { odd_even, bitonic };

using Pair = std::pair<std::size_t, std::size_t>;
using Layer = std::vector<Pair>;

struct SortingNetwork {
  NetworkKind kind = NetworkKind::odd_even;
  std::size_t length = 0;         // number of real inputs
  std::size_t padded_length = 0;  // positions >= length hold +inf sentinels
  std::vector<Layer> layers;
  // Exchanges (flat index in network order) acting on each 8-column block of
  // the permutation; filled by build_network, derived on the fly if empty.
  std::vector<std::vector<std::uint32_t>> block_schedule;
};

SortingNetwork build_network(NetworkKind kind, std::size_t length);

struct SwapResult {
  Tensor values;  // P * values
  Tensor perm;    // P, R x R
};

// One layer with its permutation matrix materialised. Pairs must lie inside
// the real range (no sentinel handling here).
SwapResult swap_layer(const Tensor& values, const Layer& layer, const RelaxFamily& family);

struct RelaxedSortResult {
  Tensor sorted_values;  // length R
  Tensor perm;           // R x R
};

// Fused forward/backward over the whole network.
RelaxedSortResult soft_sort(const Tensor& values, const SortingNetwork& network, const RelaxFamily& family);

// Only the relaxed permutation, without the sorted_values product.
Tensor soft_sort_perm(const Tensor& values, const SortingNetwork& network, const RelaxFamily& family);

// -sum(Qt * log Qs) with Qt = soft_sort_perm(teacher_values) held constant and
// Qs = soft_sort_perm(values). Same value as cross_entropy over the two perms,
// but computed in column blocks so the backward trace stays small; the
// gradient with respect to values is formed eagerly.
Tensor sorted_cross_entropy(const Tensor& teacher_values, const Tensor& values, const SortingNetwork& network,
                            const RelaxFamily& teacher, const RelaxFamily& student);

// Layer-by-layer product of swap_layer matrices. Unpadded networks only.
RelaxedSortResult soft_sort_layerwise(const Tensor& values, const SortingNetwork& network,
                                      const RelaxFamily& family);

struct HardSort {
  std::vector<double> sorted;
  std::vector<std::size_t> order;  // order[k] = input index at rank k
  Tensor perm;                     // perm(k, order[k]) = 1
};

// Stable comparison sort; ties go to the lower original index.
HardSort hard_sort_oracle(std::span<const double> values);

std::string to_string(NetworkKind kind);
NetworkKind network_kind_from_string(const std::string& s);
std::string to_string(RelaxKind kind);
RelaxKind relax_kind_from_string(const std::string& s);

}  // namespace neco::sortnet
