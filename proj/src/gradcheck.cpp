#include "neco/gradcheck.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "neco/loss.hpp"
#include "neco/rng.hpp"
#include "neco/sortnet.hpp"
#include "neco/views.hpp"

namespace neco {

namespace {

Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

// Convex mix of random permutation matrices.
Tensor doubly_stochastic(std::size_t n, Rng& rng) {
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

sortnet::RelaxFamily family(sortnet::RelaxKind kind, double beta) {
  return {kind, beta, kind == sortnet::RelaxKind::logistic ? 0.25 : 0.0};
}

class Suite {
 public:
  explicit Suite(const GradcheckOptions& opt) : opt_(opt) {}

  // fn and point are drawn afresh per instance by make().
  void check(std::string component, std::string variant,
             const std::function<std::pair<std::function<Tensor(const Tensor&)>, Tensor>(Rng&)>& make) {
    GradcheckRow row{std::move(component), std::move(variant), opt_.instances, 0.0, true};
    Rng rng(derive_seed(opt_.seed, row.component + "/" + row.variant));
    for (std::size_t i = 0; i < opt_.instances; ++i) {
      auto [fn, x] = make(rng);
      row.max_error = std::max(row.max_error, finite_difference_check(fn, x, opt_.eps));
    }
    row.pass = row.max_error <= opt_.tolerance;
    rows_.push_back(std::move(row));
  }

  std::vector<GradcheckRow> take() { return std::move(rows_); }

 private:
  GradcheckOptions opt_;
  std::vector<GradcheckRow> rows_;
};

}  // namespace

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opt) {
  using sortnet::RelaxKind;
  Suite s(opt);
  const std::vector<std::pair<std::string, sortnet::RelaxFamily>> families{
      {"arctan", family(RelaxKind::arctan, 100)}, {"logistic", family(RelaxKind::logistic, 100)}};

  for (const auto& [name, fam] : families) {
    s.check("relax_fn", name, [fam](Rng& rng) {
      return std::pair{std::function<Tensor(const Tensor&)>(
                           [fam](const Tensor& x) { return ops::sum(sortnet::relax(x, fam)); }),
                       uniform_tensor({8}, rng, -2, 2)};
    });
  }

  for (const auto& [name, fam] : families) {
    for (std::size_t n : opt.sizes) {
      if (n < 2) continue;
      s.check("swap_layer", name + " R=" + std::to_string(n), [fam, n](Rng& rng) {
        sortnet::Layer layer;
        for (std::size_t i = 0; i + 1 < n; i += 2) layer.emplace_back(i, i + 1);
        Tensor w = uniform_tensor({n, n}, rng, -2, 2);
        auto fn = [fam, layer, w](const Tensor& x) {
          auto r = sortnet::swap_layer(x, layer, fam);
          return ops::add(ops::sum(ops::mul(r.perm, w)), ops::sum(r.values));
        };
        return std::pair{std::function<Tensor(const Tensor&)>(fn), uniform_tensor({n}, rng, -2, 2)};
      });
    }
  }

  for (auto kind : {sortnet::NetworkKind::odd_even, sortnet::NetworkKind::bitonic}) {
    for (const auto& [name, fam] : families) {
      for (std::size_t n : opt.sizes) {
        if (n < 2) continue;
        auto net = std::make_shared<sortnet::SortingNetwork>(sortnet::build_network(kind, n));
        s.check("soft_sort", to_string(kind) + " " + name + " R=" + std::to_string(n), [fam, n, net](Rng& rng) {
          Tensor w = uniform_tensor({n, n}, rng, -2, 2);
          Tensor u = uniform_tensor({n}, rng, -2, 2);
          auto fn = [fam, net, w, u](const Tensor& x) {
            auto r = sortnet::soft_sort(x, *net, fam);
            return ops::add(ops::sum(ops::mul(r.perm, w)), ops::sum(ops::mul(r.sorted_values, u)));
          };
          return std::pair{std::function<Tensor(const Tensor&)>(fn), uniform_tensor({n}, rng, -2, 2)};
        });
      }
    }
  }

  s.check("roi_align", "4x4 -> 7x7", [](Rng& rng) {
    Tensor w = uniform_tensor({49, 3}, rng, -2, 2);
    const Box box{rng.uniform(0, 0.4), rng.uniform(0, 0.4), rng.uniform(0.6, 1), rng.uniform(0.6, 1)};
    const bool mirrored = rng.bernoulli(0.5);
    auto fn = [w, box, mirrored](const Tensor& t) {
      FeatureGrid g;
      g.tokens = t;
      g.rows = g.cols = 4;
      return ops::sum(ops::mul(roi_align(g, box, 7, mirrored), w));
    };
    return std::pair{std::function<Tensor(const Tensor&)>(fn), uniform_tensor({16, 3}, rng, -2, 2)};
  });

  for (std::size_t n : {3u, 6u}) {
    s.check("cross_entropy_perm", "R=" + std::to_string(n), [n](Rng& rng) {
      Tensor qt = doubly_stochastic(n, rng);
      auto fn = [qt](const Tensor& qs) { return cross_entropy_perm(qt, qs); };
      return std::pair{std::function<Tensor(const Tensor&)>(fn), uniform_tensor({n, n}, rng, 0.2, 1.0)};
    });
  }

  for (auto net : {SortChoice::bitonic, SortChoice::odd_even, SortChoice::none}) {
    s.check("neco_loss", to_string(net) + " cosine N'<=4 R<=8", [net](Rng& rng) {
      LossConfig cfg;
      cfg.network = net;
      const std::size_t n = 1 + rng.below(4);
      const std::size_t r = 5 + rng.below(4);
      Tensor ft = uniform_tensor({n, 5}, rng, -2, 2);
      ReferenceSet refs;
      refs.features = uniform_tensor({r, 5}, rng, -2, 2);
      for (std::size_t i = 0; i < r; ++i) refs.source_index.emplace_back(0, i);
      auto fn = [cfg, ft, refs](const Tensor& fs) { return neco_loss(fs, ft, refs, cfg); };
      return std::pair{std::function<Tensor(const Tensor&)>(fn), uniform_tensor({n, 5}, rng, -2, 2)};
    });
  }
  return s.take();
}

nlohmann::json to_json(const GradcheckRow& r) {
  return {{"component", r.component},
          {"variant", r.variant},
          {"instances", r.instances},
          {"max_rel_error", r.max_error},
          {"pass", r.pass}};
}

}  // namespace neco
