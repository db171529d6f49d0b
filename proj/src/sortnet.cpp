#include "neco/sortnet.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include <Eigen/Core>

namespace neco::sortnet {

namespace {

constexpr double kArtEps = 1e-10;

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void check_layer(const Layer& layer, std::size_t n) {
  std::vector<bool> used(n, false);
  for (auto [i, j] : layer) {
    if (i >= j || j >= n) {
      throw std::out_of_range("swap_layer: pair (" + std::to_string(i) + "," + std::to_string(j) +
                              ") out of range for length " + std::to_string(n));
    }
    if (used[i] || used[j]) throw std::invalid_argument("swap_layer: pairs within a layer must be disjoint");
    used[i] = used[j] = true;
  }
}

void require_vector(const char* who, const Tensor& v) {
  if (v.rank() != 1) throw ShapeError(std::string(who) + ": expected a rank-1 tensor, got " + shape_str(v.shape()));
}

// (qi, qj) <- (a qi + b qj, b qi + a qj)
void mix_rows(double* __restrict qi, double* __restrict qj, std::size_t w, double a, double b) {
  for (std::size_t c = 0; c < w; ++c) {
    const double x = qi[c], y = qj[c];
    qi[c] = a * x + b * y;
    qj[c] = b * x + a * y;
  }
}

// Per-layer record of one exchange.
struct Exchange {
  std::size_t i, j;
  double alpha;
  double comp;    // 1 - alpha, evaluated as f(-x) to keep tiny weights accurate
  double slope;   // f'(v_j - v_i); 0 when alpha is fixed by a sentinel
  bool free;      // alpha depends on the values
  double vi = 0, vj = 0;       // values before the exchange
  std::size_t lo = 0, hi = 0;  // columns where rows i, j of Q may be nonzero before the exchange
  std::size_t offset = 0;      // rows i, j of Q over [lo, hi) in Trace::rows
};

// f(x), f(-x), f'(x) for a batch; the logistic family runs on Eigen's
// vectorised exp.
void evaluate_batch(const RelaxFamily& f, const Eigen::ArrayXd& x, Eigen::ArrayXd& pos, Eigen::ArrayXd& neg,
                    Eigen::ArrayXd& slope) {
  const Eigen::Index m = x.size();
  pos.resize(m);
  neg.resize(m);
  slope.resize(m);
  if (f.kind == RelaxKind::arctan) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto e = f.eval(x[k]);
      pos[k] = e.value;
      neg[k] = e.mirrored;
      slope[k] = e.slope;
    }
    return;
  }
  const Eigen::ArrayXd absx = x.abs();
  const Eigen::ArrayXd ax = absx + kArtEps;
  Eigen::ArrayXd scale;
  if (f.lambda == 0.0) scale = Eigen::ArrayXd::Ones(m);
  else if (f.lambda == 0.25) scale = ax.sqrt().sqrt().inverse();
  else if (f.lambda == 0.5) scale = ax.sqrt().inverse();
  else scale = (ax.log() * -f.lambda).exp();
  const Eigen::ArrayXd u = f.steepness * x * scale;
  const Eigen::ArrayXd du =
      f.lambda == 0.0 ? Eigen::ArrayXd::Constant(m, f.steepness) : (f.steepness * scale * (ax - f.lambda * absx) / ax).eval();
  const Eigen::ArrayXd e = (-u.abs()).exp();
  const Eigen::ArrayXd big = (1.0 + e).inverse();
  const Eigen::ArrayXd small = e * big;
  pos = (u >= 0.0).select(big, small);
  neg = (u >= 0.0).select(small, big);
  slope = pos * neg * du;
}

// Exchange weights for one input, with the values each exchange saw, in
// network order.
std::vector<Exchange> plan_exchanges(std::span<const double> real, const SortingNetwork& net, const RelaxFamily& f) {
  const std::size_t n = net.padded_length;
  std::vector<double> v(n, 0.0);
  std::copy(real.begin(), real.end(), v.begin());
  std::vector<char> sentinel(n, 0);
  for (std::size_t k = net.length; k < n; ++k) sentinel[k] = 1;
  std::vector<Exchange> out;
  std::size_t count = 0;
  for (const auto& layer : net.layers) count += layer.size();
  out.reserve(count);
  Eigen::ArrayXd x, pos, neg, slope;
  std::vector<std::size_t> free_idx;
  for (const auto& layer : net.layers) {
    const std::size_t first = out.size();
    free_idx.clear();
    for (auto [i, j] : layer) {
      Exchange e{i, j, 1.0, 0.0, 0.0, false};
      if (!sentinel[i] && !sentinel[j]) {
        e.free = true;
        free_idx.push_back(out.size());
      } else if (sentinel[i] && !sentinel[j]) {
        e.alpha = 0.0;  // the real value moves down, the sentinel up
        e.comp = 1.0;
        std::swap(sentinel[i], sentinel[j]);
      }
      e.vi = v[i];
      e.vj = v[j];
      out.push_back(e);
    }
    x.resize(static_cast<Eigen::Index>(free_idx.size()));
    for (std::size_t k = 0; k < free_idx.size(); ++k) x[k] = out[free_idx[k]].vj - out[free_idx[k]].vi;
    evaluate_batch(f, x, pos, neg, slope);
    for (std::size_t k = 0; k < free_idx.size(); ++k) {
      auto& e = out[free_idx[k]];
      e.alpha = pos[k];
      e.comp = neg[k];
      e.slope = slope[k];
    }
    for (std::size_t k = first; k < out.size(); ++k) {
      const auto& e = out[k];
      const double a = v[e.i], b = v[e.j];
      v[e.i] = e.alpha * a + e.comp * b;
      v[e.j] = e.comp * a + e.alpha * b;
    }
  }
  return out;
}

struct Trace {
  std::vector<Exchange> exchanges;  // network order
  std::unique_ptr<double[]> rows;   // uninitialised; every slot is written before it is read
};

// Runs the network on padded values; returns the n x n product. Rows of Q
// are nonzero on a contiguous column range that only grows, so each exchange
// touches the union of the two ranges.
std::vector<double> run_network(std::span<const double> real, const SortingNetwork& net, const RelaxFamily& f,
                                Trace* trace) {
  const std::size_t n = net.padded_length;
  std::vector<Exchange> ex = plan_exchanges(real, net, f);
  std::vector<std::size_t> lo(n), hi(n);
  std::iota(lo.begin(), lo.end(), std::size_t{0});
  for (std::size_t k = 0; k < n; ++k) hi[k] = k + 1;
  std::size_t total = 0;
  for (auto& e : ex) {
    e.lo = lo[e.i] = lo[e.j] = std::min(lo[e.i], lo[e.j]);
    e.hi = hi[e.i] = hi[e.j] = std::max(hi[e.i], hi[e.j]);
    if (e.free) total += 2 * (e.hi - e.lo);
  }
  if (trace) trace->rows = std::make_unique_for_overwrite<double[]>(total);

  std::vector<double> q(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) q[k * n + k] = 1.0;
  std::size_t used = 0;
  for (auto& e : ex) {
    double* qi = &q[e.i * n];
    double* qj = &q[e.j * n];
    if (trace && e.free) {
      const std::size_t w = e.hi - e.lo;
      e.offset = used;
      std::copy_n(qi + e.lo, w, &trace->rows[used]);
      std::copy_n(qj + e.lo, w, &trace->rows[used + w]);
      used += 2 * w;
    }
    mix_rows(qi + e.lo, qj + e.lo, e.hi - e.lo, e.alpha, e.comp);
  }
  if (trace) trace->exchanges = std::move(ex);
  return q;
}

constexpr std::size_t kBlock = 8;

void mix_block(double* __restrict qi, double* __restrict qj, double a, double b) {
  for (std::size_t c = 0; c < kBlock; ++c) {
    const double x = qi[c], y = qj[c];
    qi[c] = a * x + b * y;
    qj[c] = b * x + a * y;
  }
}

// Exchanges acting on each kBlock-column block of Q, in network order. A
// block starts as unit columns on its own rows; an exchange touching no row
// in the hull of the rows reached so far acts on zeros and is dropped.
std::vector<std::vector<std::uint32_t>> block_schedule(const SortingNetwork& net) {
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t c0 = 0; c0 < net.length; c0 += kBlock) {
    std::size_t lo = c0, hi = std::min(c0 + kBlock, net.length);
    std::vector<std::uint32_t> list;
    std::uint32_t k = 0;
    for (const auto& layer : net.layers) {
      for (auto [i, j] : layer) {
        if ((i >= lo && i < hi) || (j >= lo && j < hi)) {
          lo = std::min(lo, i);
          hi = std::max(hi, j + 1);
          list.push_back(k);
        }
        ++k;
      }
    }
    out.push_back(std::move(list));
  }
  return out;
}

struct Scratch {
  std::vector<double> qt, qs, g, saved, lanes;
};

}  // namespace

double RelaxFamily::operator()(double x) const {
  switch (kind) {
    case RelaxKind::arctan: {
      const double y = steepness * x;
      // Lower tail via atan(1/|y|) avoids cancellation against 0.5.
      if (y < -1.0) return std::atan(-1.0 / y) * std::numbers::inv_pi;
      return std::atan(y) * std::numbers::inv_pi + 0.5;
    }
    case RelaxKind::logistic:
      return eval(x).value;
  }
  return 0.5;
}

double RelaxFamily::derivative(double x) const {
  switch (kind) {
    case RelaxKind::arctan: {
      const double bx = steepness * x;
      return steepness * std::numbers::inv_pi / (1.0 + bx * bx);
    }
    case RelaxKind::logistic:
      return eval(x).slope;
  }
  return 0.0;
}

RelaxFamily::Eval RelaxFamily::eval(double x) const {
  if (kind == RelaxKind::arctan) return {(*this)(x), (*this)(-x), derivative(x)};
  const double ax = std::abs(x) + kArtEps;
  double scale = 1.0;
  if (lambda == 0.25) scale = 1.0 / std::sqrt(std::sqrt(ax));
  else if (lambda == 0.5) scale = 1.0 / std::sqrt(ax);
  else if (lambda != 0.0) scale = std::pow(ax, -lambda);
  const double u = steepness * x * scale;
  const double du = lambda == 0.0 ? steepness : steepness * scale * (ax - lambda * std::abs(x)) / ax;
  const double e = std::exp(-std::abs(u));
  const double big = 1.0 / (1.0 + e), small = e / (1.0 + e);
  const double pos = u >= 0 ? big : small, neg = u >= 0 ? small : big;
  return {pos, neg, pos * neg * du};
}

void RelaxFamily::validate() const {
  if (!(steepness > 0.0) || !std::isfinite(steepness)) {
    throw std::invalid_argument("relax family: steepness must be positive and finite");
  }
  if (kind == RelaxKind::logistic && !(lambda >= 0.0 && lambda < 1.0)) {
    throw std::invalid_argument("relax family: lambda must lie in [0, 1)");
  }
}

double relax_fn(double x, const RelaxFamily& family) { return family(x); }

Tensor relax(const Tensor& x, const RelaxFamily& family) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = family(x[i]);
  std::vector<Tensor> ins{x};
  return make_result(Tensor(x.shape(), std::move(out)), ins, [x, family](std::span<const double> g, auto gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * family.derivative(x[i]);
  });
}

SortingNetwork build_network(NetworkKind kind, std::size_t length) {
  if (length == 0) throw std::invalid_argument("build_network: length must be at least 1");
  SortingNetwork net;
  net.kind = kind;
  net.length = length;
  if (kind == NetworkKind::odd_even) {
    net.padded_length = length;
    for (std::size_t t = 0; t < length; ++t) {
      Layer layer;
      for (std::size_t i = t % 2; i + 1 < length; i += 2) layer.emplace_back(i, i + 1);
      net.layers.push_back(std::move(layer));
    }
    net.block_schedule = block_schedule(net);
    return net;
  }
  // Bitonic, all comparators ascending: a mirrored merge step followed by
  // half-cleaners at each block size.
  const std::size_t n = next_pow2(length);
  net.padded_length = n;
  if (n == 1) {
    net.layers.emplace_back();
    net.block_schedule = block_schedule(net);
    return net;
  }
  for (std::size_t k = 2; k <= n; k <<= 1) {
    Layer flip;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t within = i % k;
      if (within < k / 2) flip.emplace_back(i, i - within + (k - 1 - within));
    }
    net.layers.push_back(std::move(flip));
    for (std::size_t j = k / 4; j >= 1; j >>= 1) {
      Layer half;
      for (std::size_t i = 0; i < n; ++i) {
        if ((i & j) == 0) half.emplace_back(i, i + j);
      }
      net.layers.push_back(std::move(half));
    }
  }
  net.block_schedule = block_schedule(net);
  return net;
}

SwapResult swap_layer(const Tensor& values, const Layer& layer, const RelaxFamily& family) {
  require_vector("swap_layer", values);
  const std::size_t n = values.numel();
  check_layer(layer, n);
  if (layer.empty()) {
    return {values, Tensor::identity(n)};
  }
  std::vector<std::size_t> is, js;
  for (auto [i, j] : layer) {
    is.push_back(i);
    js.push_back(j);
  }
  Tensor alpha = relax(ops::sub(ops::gather(values, js), ops::gather(values, is)), family);

  std::vector<double> p(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) p[k * n + k] = 1.0;
  for (std::size_t m = 0; m < layer.size(); ++m) {
    const auto [i, j] = layer[m];
    p[i * n + i] = p[j * n + j] = alpha[m];
    p[i * n + j] = p[j * n + i] = 1.0 - alpha[m];
  }
  std::vector<Tensor> ins{alpha};
  Tensor perm = make_result(Tensor({n, n}, std::move(p)), ins, [layer, n](std::span<const double> g, auto gin) {
    for (std::size_t m = 0; m < layer.size(); ++m) {
      const auto [i, j] = layer[m];
      gin[0][m] += g[i * n + i] + g[j * n + j] - g[i * n + j] - g[j * n + i];
    }
  });
  Tensor out = ops::matmul(perm, values.reshape({n, 1})).reshape({n});
  return {out, perm};
}

Tensor soft_sort_perm(const Tensor& values, const SortingNetwork& network, const RelaxFamily& family) {
  require_vector("soft_sort", values);
  family.validate();
  if (values.numel() != network.length) {
    throw ShapeError("soft_sort: " + std::to_string(values.numel()) + " values for a network of length " +
                     std::to_string(network.length));
  }
  const std::size_t r = network.length;
  const std::size_t n = network.padded_length;
  Tape* tape = active_tape();
  const bool tracked = tape != nullptr && values.requires_grad();
  auto trace = tracked ? std::make_shared<Trace>() : nullptr;
  std::vector<double> q = run_network(values.data(), network, family, trace.get());

  std::vector<double> perm;
  if (r == n) {
    perm = std::move(q);
  } else {
    perm.resize(r * r);
    for (std::size_t k = 0; k < r; ++k) std::copy_n(&q[k * n], r, &perm[k * r]);
  }
  Tensor out({r, r}, std::move(perm));
  if (!tracked) return out;

  std::vector<Tensor> ins{values};
  return tape->record(std::move(out), ins, [trace, r, n](std::span<const double> g, auto gin) {
    std::vector<double> gq(n * n, 0.0), gv(n, 0.0);
    for (std::size_t k = 0; k < r; ++k) std::copy_n(&g[k * r], r, &gq[k * n]);
    // Going backward a row's support only shrinks, so gq rows are needed on
    // [lo, hi) of the exchange alone; columns outside are never read again.
    for (std::size_t t = trace->exchanges.size(); t-- > 0;) {
      const auto& e = trace->exchanges[t];
      double* gi = &gq[e.i * n];
      double* gj = &gq[e.j * n];
      double dalpha = 0.0;
      if (e.free) {
        const std::size_t w = e.hi - e.lo;
        const double* qi = &trace->rows[e.offset];
        const double* qj = qi + w;
        const double* ga = gi + e.lo;
        const double* gb = gj + e.lo;
        for (std::size_t c = 0; c < w; ++c) dalpha += (ga[c] - gb[c]) * (qi[c] - qj[c]);
        dalpha += (gv[e.i] - gv[e.j]) * (e.vi - e.vj);
      }
      const double a = e.alpha, b = e.comp;
      mix_rows(gi + e.lo, gj + e.lo, e.hi - e.lo, a, b);
      const double x = gv[e.i], y = gv[e.j];
      gv[e.i] = a * x + b * y;
      gv[e.j] = b * x + a * y;
      if (e.free) {
        gv[e.j] += dalpha * e.slope;
        gv[e.i] -= dalpha * e.slope;
      }
    }
    for (std::size_t k = 0; k < r; ++k) gin[0][k] += gv[k];
  });
}


Tensor sorted_cross_entropy(const Tensor& teacher_values, const Tensor& values, const SortingNetwork& network,
                            const RelaxFamily& teacher, const RelaxFamily& student) {
  require_vector("sorted_cross_entropy", values);
  require_vector("sorted_cross_entropy", teacher_values);
  teacher.validate();
  student.validate();
  const std::size_t r = network.length;
  const std::size_t n = network.padded_length;
  if (values.numel() != r || teacher_values.numel() != r) {
    throw ShapeError("sorted_cross_entropy: " + std::to_string(values.numel()) + " and " +
                     std::to_string(teacher_values.numel()) + " values for a network of length " + std::to_string(r));
  }
  const auto ex_t = plan_exchanges(teacher_values.data(), network, teacher);
  const auto ex_s = plan_exchanges(values.data(), network, student);
  const std::size_t m = ex_s.size();
  std::vector<std::vector<std::uint32_t>> derived;
  if (network.block_schedule.empty()) derived = block_schedule(network);
  const auto& schedule = network.block_schedule.empty() ? derived : network.block_schedule;

  thread_local Scratch w;
  w.qt.resize(n * kBlock);
  w.qs.resize(n * kBlock);
  w.g.resize(r * kBlock);
  w.saved.resize(2 * kBlock * m);
  w.lanes.assign(m * kBlock, 0.0);  // per-column partial sums of dL/dalpha
  double total = 0.0;

  for (std::size_t b = 0; b < schedule.size(); ++b) {
    const std::size_t c0 = b * kBlock;
    const std::size_t width = std::min(kBlock, r - c0);
    const auto& touched = schedule[b];
    std::fill(w.qt.begin(), w.qt.end(), 0.0);
    std::fill(w.qs.begin(), w.qs.end(), 0.0);
    for (std::size_t c = 0; c < width; ++c) w.qt[(c0 + c) * kBlock + c] = w.qs[(c0 + c) * kBlock + c] = 1.0;
    for (std::uint32_t k : touched) {
      const auto& e = ex_t[k];
      mix_block(&w.qt[e.i * kBlock], &w.qt[e.j * kBlock], e.alpha, e.comp);
    }
    for (std::size_t u = 0; u < touched.size(); ++u) {
      const auto& e = ex_s[touched[u]];
      double* qi = &w.qs[e.i * kBlock];
      double* qj = &w.qs[e.j * kBlock];
      if (e.free) {
        std::copy_n(qi, kBlock, &w.saved[2 * kBlock * u]);
        std::copy_n(qj, kBlock, &w.saved[2 * kBlock * u + kBlock]);
      }
      mix_block(qi, qj, e.alpha, e.comp);
    }

    // Cross-entropy over the real rows, and its gradient in Qs. Columns past
    // width are zero in both and contribute nothing.
    Eigen::Map<const Eigen::ArrayXd> qs(w.qs.data(), static_cast<Eigen::Index>(r * kBlock));
    Eigen::Map<const Eigen::ArrayXd> qt(w.qt.data(), static_cast<Eigen::Index>(r * kBlock));
    Eigen::Map<Eigen::ArrayXd> g(w.g.data(), static_cast<Eigen::Index>(r * kBlock));
    if ((qs < 0.0).any() || qs.isNaN().any()) {
      throw DomainError("log: argument " + std::to_string(qs.minCoeff()) + " is negative");
    }
    total -= (qt * qs.max(kLogFloor).log()).sum();
    g = (qs > kLogFloor).select(-qt / qs, 0.0);

    for (std::size_t u = touched.size(); u-- > 0;) {
      const std::size_t k = touched[u];
      const auto& e = ex_s[k];
      // Rows at or past r carry no gradient; their block rows are zero.
      if (e.i >= r) continue;
      double* gi = &w.g[e.i * kBlock];
      double* gj = e.j < r ? &w.g[e.j * kBlock] : nullptr;
      if (gj == nullptr) continue;
      if (e.free) {
        const double* pi = &w.saved[2 * kBlock * u];
        const double* pj = pi + kBlock;
        double* d = &w.lanes[k * kBlock];
        for (std::size_t c = 0; c < kBlock; ++c) d[c] += (gi[c] - gj[c]) * (pi[c] - pj[c]);
      }
      mix_block(gi, gj, e.alpha, e.comp);
    }
  }

  // Value path: alphas depend on the values each exchange saw.
  std::vector<double> gv(n, 0.0);
  for (std::size_t k = m; k-- > 0;) {
    const auto& e = ex_s[k];
    double d = 0.0;
    for (std::size_t c = 0; c < kBlock; ++c) d += w.lanes[k * kBlock + c];
    if (e.free) d += (gv[e.i] - gv[e.j]) * (e.vi - e.vj);
    const double x = gv[e.i], y = gv[e.j];
    gv[e.i] = e.alpha * x + e.comp * y;
    gv[e.j] = e.comp * x + e.alpha * y;
    if (e.free) {
      gv[e.j] += d * e.slope;
      gv[e.i] -= d * e.slope;
    }
  }
  gv.resize(r);
  const Tensor grad = Tensor::vector(std::move(gv));

  std::vector<Tensor> ins{values};
  return make_result(Tensor::scalar(total), ins, [grad](std::span<const double> go, auto gin) {
    const auto d = grad.data();
    for (std::size_t k = 0; k < d.size(); ++k) gin[0][k] += go[0] * d[k];
  });
}

RelaxedSortResult soft_sort(const Tensor& values, const SortingNetwork& network, const RelaxFamily& family) {
  Tensor perm = soft_sort_perm(values, network, family);
  const std::size_t r = network.length;
  Tensor sorted = ops::matmul(perm, values.reshape({r, 1})).reshape({r});
  return {sorted, perm};
}

RelaxedSortResult soft_sort_layerwise(const Tensor& values, const SortingNetwork& network,
                                      const RelaxFamily& family) {
  require_vector("soft_sort_layerwise", values);
  family.validate();
  if (network.padded_length != network.length) {
    throw std::invalid_argument("soft_sort_layerwise: padded networks are not supported");
  }
  if (values.numel() != network.length) {
    throw ShapeError("soft_sort_layerwise: length mismatch");
  }
  Tensor v = values;
  Tensor q = Tensor::identity(network.length);
  for (const auto& layer : network.layers) {
    auto step = swap_layer(v, layer, family);
    v = step.values;
    q = ops::matmul(step.perm, q);
  }
  return {v, q};
}

HardSort hard_sort_oracle(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n == 0) throw std::invalid_argument("hard_sort_oracle: empty input");
  HardSort out;
  out.order.resize(n);
  std::iota(out.order.begin(), out.order.end(), std::size_t{0});
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> p(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    out.sorted.push_back(values[out.order[k]]);
    p[k * n + out.order[k]] = 1.0;
  }
  out.perm = Tensor({n, n}, std::move(p));
  return out;
}

std::string to_string(NetworkKind kind) { return kind == NetworkKind::odd_even ? "odd_even" : "bitonic"; }

NetworkKind network_kind_from_string(const std::string& s) {
  if (s == "odd_even") return NetworkKind::odd_even;
  if (s == "bitonic") return NetworkKind::bitonic;
  throw std::invalid_argument("unknown sorting network '" + s + "'");
}

std::string to_string(RelaxKind kind) { return kind == RelaxKind::arctan ? "arctan" : "logistic"; }

RelaxKind relax_kind_from_string(const std::string& s) {
  if (s == "arctan") return RelaxKind::arctan;
  if (s == "logistic") return RelaxKind::logistic;
  throw std::invalid_argument("unknown relax family '" + s + "'");
}

}  // namespace neco::sortnet
