#include "neco/loss.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace neco {

sortnet::RelaxFamily LossConfig::student_family() const {
  return {relax, steepness_student, relax == sortnet::RelaxKind::logistic ? lambda : 0.0};
}

sortnet::RelaxFamily LossConfig::teacher_family() const {
  return {relax, steepness_teacher, relax == sortnet::RelaxKind::logistic ? lambda : 0.0};
}

void LossConfig::validate() const {
  if (!(steepness_student > 0) || !(steepness_teacher > 0)) {
    throw std::invalid_argument("loss config: steepness must be positive");
  }
  if (!(attention_mass > 0 && attention_mass <= 1)) {
    throw std::invalid_argument("loss config: attention_mass must lie in (0, 1]");
  }
  if (num_references < 2) throw std::invalid_argument("loss config: need at least 2 references");
  if (top_k > num_references) {
    throw std::invalid_argument("loss config: top_k " + std::to_string(top_k) + " exceeds " +
                                std::to_string(num_references) + " references");
  }
  student_family().validate();
  teacher_family().validate();
}

Tensor cosine_distance_matrix(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ShapeError("cosine_distance_matrix: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor sim = ops::matmul(ops::row_normalize(a), ops::transpose(ops::row_normalize(b)));
  return ops::add_scalar(ops::neg(sim), 1.0);
}

Tensor reference_distances(const Tensor& a, const Tensor& refs, Similarity similarity) {
  if (similarity == Similarity::cosine) return cosine_distance_matrix(a, refs);
  return ops::pairwise_sq_dist(a, refs);
}

std::vector<std::size_t> select_patches(const FeatureGrid& grid, PatchPolicy policy, double mass) {
  const std::size_t n = grid.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (policy == PatchPolicy::both) return all;
  if (grid.attention.size() != n) throw std::invalid_argument("select_patches: grid has no attention map");
  if (!(mass > 0 && mass <= 1)) throw std::invalid_argument("select_patches: mass must lie in (0, 1]");
  std::vector<std::size_t> order = all;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return grid.attention[a] > grid.attention[b]; });
  std::vector<bool> fg(n, false);
  double cum = 0;
  for (std::size_t i : order) {
    fg[i] = true;
    cum += grid.attention[i];
    if (cum >= mass) break;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (fg[i] == (policy == PatchPolicy::fg)) out.push_back(i);
  }
  return out;
}

ReferenceSet sample_references(const std::vector<FeatureGrid>& batch, const LossConfig& cfg, std::size_t count,
                               Rng& rng, std::size_t anchor) {
  if (batch.empty()) throw std::invalid_argument("sample_references: empty batch");
  if (count < 2) throw std::invalid_argument("sample_references: need at least 2 references");
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  auto collect = [&](std::size_t img) {
    for (std::size_t p : select_patches(batch[img], cfg.patch_policy, cfg.attention_mass)) pool.emplace_back(img, p);
  };
  if (cfg.reference_mode == ReferenceMode::intra) {
    if (anchor >= batch.size()) throw std::out_of_range("sample_references: anchor outside batch");
    collect(anchor);
  } else {
    for (std::size_t i = 0; i < batch.size(); ++i) collect(i);
  }
  if (pool.size() < count) {
    throw std::invalid_argument("sample_references: " + std::to_string(pool.size()) + " eligible patches, " +
                                std::to_string(count) + " references requested");
  }
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  const std::size_t d = batch[pool[0].first].tokens.cols();
  std::vector<double> feats;
  feats.reserve(count * d);
  for (const auto& [img, p] : pool) {
    const auto& t = batch[img].tokens;
    if (t.cols() != d) throw ShapeError("sample_references: feature width differs across the batch");
    auto row = t.data().subspan(p * d, d);
    feats.insert(feats.end(), row.begin(), row.end());
  }
  return {Tensor({count, d}, std::move(feats)), std::move(pool), cfg.reference_mode};
}

TopK restrict_top_k(const Tensor& row, std::size_t k) {
  if (row.rank() != 1) throw ShapeError("restrict_top_k: expected a vector, got " + shape_str(row.shape()));
  const std::size_t r = row.numel();
  if (k < 1 || k > r) {
    throw std::invalid_argument("restrict_top_k: k = " + std::to_string(k) + " outside [1, " + std::to_string(r) + "]");
  }
  std::vector<std::size_t> idx(r);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k < r) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
  }
  return {idx, ops::gather(row, idx)};
}

Tensor cross_entropy_perm(const Tensor& qt, const Tensor& qs) {
  if (qt.shape() != qs.shape()) {
    throw ShapeError("cross_entropy_perm: shapes " + shape_str(qt.shape()) + " and " + shape_str(qs.shape()));
  }
  // Fused -sum(qt * log(qs)); qt is a constant.
  const auto t = qt.data();
  const auto q = qs.data();
  double total = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    if (q[k] < 0.0 || std::isnan(q[k])) {
      throw DomainError("log: argument " + std::to_string(q[k]) + " is negative");
    }
    total -= t[k] * std::log(std::max(q[k], kLogFloor));
  }
  std::vector<Tensor> ins{qs};
  return make_result(Tensor::scalar(total), ins, [qt, qs](std::span<const double> g, auto gin) {
    const auto t = qt.data();
    const auto q = qs.data();
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (q[k] > kLogFloor) gin[0][k] -= g[0] * t[k] / q[k];
    }
  });
}

namespace {

const sortnet::SortingNetwork& cached_network(sortnet::NetworkKind kind, std::size_t length) {
  thread_local std::map<std::pair<sortnet::NetworkKind, std::size_t>, sortnet::SortingNetwork> cache;
  auto key = std::make_pair(kind, length);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, sortnet::build_network(kind, length)).first;
  return it->second;
}

}  // namespace

Tensor neco_loss(const Tensor& student, const Tensor& teacher, const ReferenceSet& refs, const LossConfig& cfg) {
  cfg.validate();
  if (student.rank() != 2 || student.shape() != teacher.shape()) {
    throw ShapeError("neco_loss: student " + shape_str(student.shape()) + " and teacher " +
                     shape_str(teacher.shape()) + " features differ");
  }
  if (refs.features.requires_grad()) throw std::invalid_argument("neco_loss: reference features must be detached");
  const std::size_t r = refs.features.rows();
  if (refs.source_index.size() != r) throw ShapeError("neco_loss: reference provenance does not match features");
  // Relaxed networks are not equivariant to input order at finite steepness,
  // so references enter the network in provenance order.
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return refs.source_index[a] < refs.source_index[b]; });
  const Tensor ref_feats = ops::gather_rows(refs.features, order);
  const std::size_t k = cfg.top_k == 0 ? r : cfg.top_k;
  if (k > r) throw std::invalid_argument("neco_loss: top_k exceeds the reference count");

  Tensor dt;
  {
    NoGradScope off;
    dt = reference_distances(teacher.detach(), ref_feats, cfg.similarity);
  }
  Tensor ds = reference_distances(student, ref_feats, cfg.similarity);

  const auto fam_s = cfg.student_family();
  const auto fam_t = cfg.teacher_family();
  const sortnet::SortingNetwork* net = nullptr;
  if (cfg.network != SortChoice::none) {
    net = &cached_network(cfg.network == SortChoice::odd_even ? sortnet::NetworkKind::odd_even
                                                              : sortnet::NetworkKind::bitonic,
                          k);
  }

  std::vector<Tensor> terms;
  terms.reserve(student.rows());
  for (std::size_t i = 0; i < student.rows(); ++i) {
    Tensor t_row = ops::row(dt, i);
    Tensor s_row = ops::row(ds, i);
    if (k < r) {
      TopK sel = restrict_top_k(t_row, k);
      t_row = sel.subrow;
      s_row = ops::gather(s_row, sel.indices);
    }
    if (net == nullptr) {
      Tensor pt;
      {
        NoGradScope off;
        pt = ops::softmax_rows(ops::scale(t_row, -cfg.steepness_teacher).reshape({1, k}));
      }
      Tensor ps = ops::softmax_rows(ops::scale(s_row, -cfg.steepness_student).reshape({1, k}));
      terms.push_back(cross_entropy_perm(pt, ps));
    } else {
      terms.push_back(sortnet::sorted_cross_entropy(t_row, s_row, *net, fam_t, fam_s));
    }
  }
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  return total;
}

std::string to_string(SortChoice v) {
  switch (v) {
    case SortChoice::odd_even: return "odd_even";
    case SortChoice::bitonic: return "bitonic";
    case SortChoice::none: return "none";
  }
  return "?";
}

std::string to_string(Similarity v) { return v == Similarity::cosine ? "cosine" : "euclidean"; }
std::string to_string(ReferenceMode v) { return v == ReferenceMode::intra ? "intra" : "inter"; }

std::string to_string(PatchPolicy v) {
  switch (v) {
    case PatchPolicy::fg: return "fg";
    case PatchPolicy::bg: return "bg";
    case PatchPolicy::both: return "both";
  }
  return "?";
}

SortChoice sort_choice_from_string(const std::string& s) {
  if (s == "odd_even") return SortChoice::odd_even;
  if (s == "bitonic") return SortChoice::bitonic;
  if (s == "none") return SortChoice::none;
  throw std::invalid_argument("unknown sorting network '" + s + "' (odd_even, bitonic, none)");
}

Similarity similarity_from_string(const std::string& s) {
  if (s == "cosine") return Similarity::cosine;
  if (s == "euclidean") return Similarity::euclidean;
  throw std::invalid_argument("unknown similarity '" + s + "' (cosine, euclidean)");
}

ReferenceMode reference_mode_from_string(const std::string& s) {
  if (s == "intra") return ReferenceMode::intra;
  if (s == "inter") return ReferenceMode::inter;
  throw std::invalid_argument("unknown reference mode '" + s + "' (intra, inter)");
}

PatchPolicy patch_policy_from_string(const std::string& s) {
  if (s == "fg") return PatchPolicy::fg;
  if (s == "bg") return PatchPolicy::bg;
  if (s == "both") return PatchPolicy::both;
  throw std::invalid_argument("unknown patch policy '" + s + "' (fg, bg, both)");
}

}  // namespace neco
