#pragma once

// Frozen-feature evaluation: k-means clustering with Hungarian matching,
// overclustering, and dense nearest-neighbour retrieval from a memory bank.
// All scoring happens at patch level.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "neco/model.hpp"
#include "neco/synth.hpp"

namespace neco {

struct ClusterAssignment {
  std::vector<int> ids;               // per point, in [0, K)
  Tensor centroids;                   // K x d
  double inertia = 0;                 // sum of squared distances to the assigned centroid
  std::vector<double> inertia_trace;  // after every assignment step
  std::size_t iterations = 0;
};

// k-means++ seeding, then Lloyd iterations until the assignment stops
// changing or max_iters. Distance ties go to the lower cluster id. A cluster
// left empty is moved onto the point farthest from its own centroid.
ClusterAssignment kmeans(const Tensor& features, std::size_t K, std::size_t max_iters, std::uint64_t seed);

struct Matching {
  std::vector<int> col_of_row;  // -1 where the row went to a padding column
  double cost = 0;
};

// Minimum-cost injective matching of rows to columns. Rectangular inputs are
// padded with zero-cost dummies. Among optimal matchings the lexicographically
// smallest col_of_row wins.
Matching hungarian(const Tensor& cost);

// Per-class IoU; NaN for classes absent from both maps. Labels outside
// [0, num_classes) in pred count as wrong everywhere.
std::vector<double> per_class_iou(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t num_classes);
// Mean of per_class_iou over the classes it defines.
double miou(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t num_classes);

// cluster -> class by Hungarian matching on 1 - IoU. Unmatched clusters map to -1.
std::vector<int> match_clusters(const std::vector<int>& clusters, const std::vector<int>& gt, std::size_t num_clusters,
                                std::size_t num_classes);

// Overclustering merge: every cluster joins the class of highest precision
// (ties to the lower class), then the merged groups are matched 1:1 to
// classes on 1 - IoU. Returns cluster -> class, -1 for empty clusters.
std::vector<int> overcluster_match(const std::vector<int>& clusters, const std::vector<int>& gt, std::size_t K_over,
                                   std::size_t num_classes);

struct MemoryBank {
  Tensor features;  // M x d, unit rows
  std::vector<int> labels;
  std::size_t cap = 50000;
};

// Backbone tokens of every scene, stacked (projection head unused).
Tensor extract_features(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& scenes);
// Majority label per patch, stacked in the same order.
std::vector<int> extract_labels(const EncoderConfig& cfg, const std::vector<SyntheticScene>& scenes,
                                std::size_t num_classes);

Tensor normalize_rows(const Tensor& x);

// Unit-normalises features; subsamples uniformly (seeded) above the cap.
MemoryBank make_memory_bank(const Tensor& features, std::vector<int> labels, std::size_t cap, std::uint64_t seed);
MemoryBank build_memory_bank(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& scenes,
                             std::size_t num_classes, std::size_t cap, std::uint64_t seed);

// Top-k cosine neighbours (ties to the lower bank index), softmax(sim / T)
// weighted class votes, argmax with ties to the lower class.
std::vector<int> incontext_predict(const Tensor& queries, const MemoryBank& bank, std::size_t k, double temperature,
                                   std::size_t num_classes);

// Scene indices for a class-balanced fraction of `scenes`: classes take turns
// drawing an unused image that contains them.
std::vector<std::size_t> balanced_subset(const std::vector<SyntheticScene>& scenes, std::size_t num_classes,
                                         double fraction, std::uint64_t seed);

struct EvalReport {
  std::string protocol;  // cluster | overcluster | incontext
  std::size_t K = 0;     // clusters (cluster protocols) or neighbours (incontext)
  double fraction = 1;
  std::size_t seeds = 1;
  std::vector<double> scores;  // one per seed
  double miou_mean = 0;
  double miou_std = 0;
  std::vector<double> per_class_iou;  // averaged over seeds; NaN when undefined
};

nlohmann::json to_json(const EvalReport& r);

struct EvalOptions {
  std::size_t K = 4;
  std::size_t k = 30;
  double temperature = 0.1;
  double fraction = 1.0;
  std::size_t seeds = 1;
  std::size_t max_iters = 100;
  std::size_t cap = 50000;
  bool normalize = false;  // unit-norm tokens before k-means
  std::uint64_t seed = 0;
};

// K-means on val tokens; seeds index the k-means initialisation.
EvalReport eval_cluster(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& val,
                        std::size_t num_classes, const EvalOptions& opt, bool overcluster);

// Bank from (a fraction of) train, predictions on val. A fraction of 1 has no
// randomness and runs once whatever opt.seeds says.
EvalReport eval_incontext(const EncoderConfig& cfg, const ParamSet& params, const std::vector<SyntheticScene>& train,
                          const std::vector<SyntheticScene>& val, std::size_t num_classes, const EvalOptions& opt);

// Same protocol on precomputed features, for oracle encoders.
EvalReport eval_incontext_features(const Tensor& train_features, const std::vector<int>& train_labels,
                                   const std::vector<std::size_t>& train_image_of_row,
                                   const std::vector<SyntheticScene>& train, const Tensor& val_features,
                                   const std::vector<int>& val_labels, std::size_t num_classes,
                                   const EvalOptions& opt);

}  // namespace neco
