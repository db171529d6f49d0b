// Acceptance run: one PASS/FAIL line per criterion AC1..AC10.
//
//   acceptance [--cli PATH] [--threads N] [AC1 AC7 ...]
//
// Without criterion names every criterion runs. Exit status is nonzero when
// any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "neco/eval.hpp"
#include "neco/gradcheck.hpp"
#include "neco/loss.hpp"
#include "neco/sortnet.hpp"
#include "neco/trainer.hpp"
#include "neco/views.hpp"

namespace fs = std::filesystem;
using namespace neco;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << x;
  return os.str();
}

Tensor uniform(Shape shape, Rng& rng, double lo = -2, double hi = 2) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

Tensor random_doubly_stochastic(std::size_t n, Rng& rng) {
  std::vector<double> q(n * n, 0.0);
  std::vector<double> w(1 + rng.below(5));
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

// Values with pairwise gaps >= gap, shuffled.
std::vector<double> spaced(std::size_t n, Rng& rng, double gap) {
  std::vector<double> v(n);
  double x = rng.uniform(-3, 3);
  for (auto& e : v) {
    e = x;
    x += gap + rng.uniform(0, 0.5);
  }
  rng.shuffle(v);
  return v;
}

const std::vector<sortnet::RelaxFamily> kFamilies(double beta) {
  return {{sortnet::RelaxKind::logistic, beta, 0.25}, {sortnet::RelaxKind::arctan, beta, 0.0}};
}

// ---------------------------------------------------------------- AC1

Outcome ac1() {
  const auto t0 = Clock::now();
  GradcheckOptions opt;
  opt.seed = 1;
  const auto rows = run_gradcheck(opt);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  bool ok = true;
  for (const auto& r : rows) {
    if (r.max_error >= worst) {
      worst = r.max_error;
      worst_name = r.component + " " + r.variant;
    }
    ok = ok && r.pass && r.instances == 10;
  }
  return {ok && secs < 60.0, std::to_string(rows.size()) + " checks x 10 instances, max rel err " + fmt(worst) +
                                 " (" + worst_name + "), " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- AC2

Outcome ac2() {
  Rng rng(2);
  double worst = 0;
  bool in_range = true;
  std::size_t count = 0;
  for (auto kind : {sortnet::NetworkKind::odd_even, sortnet::NetworkKind::bitonic}) {
    for (double beta : {1.0, 100.0}) {
      for (const auto& fam : kFamilies(beta)) {
        for (std::size_t r : {2u, 4u, 8u, 16u}) {
          const auto net = sortnet::build_network(kind, r);
          for (int inst = 0; inst < 100; ++inst) {
            const Tensor q = sortnet::soft_sort_perm(uniform({r}, rng), net, fam);
            for (std::size_t i = 0; i < r; ++i) {
              double row = 0, col = 0;
              for (std::size_t j = 0; j < r; ++j) {
                row += q.at(i, j);
                col += q.at(j, i);
                in_range = in_range && q.at(i, j) >= 0.0 && q.at(i, j) <= 1.0;
              }
              worst = std::max({worst, std::abs(row - 1), std::abs(col - 1)});
            }
            ++count;
          }
        }
      }
    }
  }
  return {worst <= 1e-9 && in_range,
          std::to_string(count) + " matrices, max |sum - 1| = " + fmt(worst) + (in_range ? ", entries in [0,1]" : ", entry outside [0,1]")};
}

// ---------------------------------------------------------------- AC3

Outcome ac3() {
  Rng rng(3);
  double worst = 0;
  bool monotone = true, agree = true;
  std::size_t count = 0;
  const std::vector<std::size_t> lengths{2, 3, 4, 5, 7, 8, 11, 16, 20, 32};
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = lengths[static_cast<std::size_t>(inst) % lengths.size()];
    const auto v = spaced(n, rng, 0.1);
    const auto oracle = sortnet::hard_sort_oracle(v);
    for (auto kind : {sortnet::NetworkKind::odd_even, sortnet::NetworkKind::bitonic}) {
      for (const auto& fam : kFamilies(1e6)) {
        const auto r = sortnet::soft_sort(Tensor::vector(v), sortnet::build_network(kind, n), fam);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(r.perm.at(i, j) - oracle.perm.at(i, j)));
          if (i > 0) monotone = monotone && r.sorted_values[i] >= r.sorted_values[i - 1];
          agree = agree && std::abs(r.sorted_values[i] - oracle.sorted[i]) <= 1e-3 * (1 + std::abs(oracle.sorted[i]));
        }
        ++count;
      }
    }
  }
  return {worst <= 1e-3 && monotone && agree, std::to_string(count) +
                                                  " sorts (both networks, lengths incl. non-powers of two), max |Q - oracle| = " +
                                                  fmt(worst)};
}

// ---------------------------------------------------------------- AC4

Outcome ac4() {
  Rng rng(4);
  double min_slack = INFINITY;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 2 + rng.below(15);
    const Tensor qt = random_doubly_stochastic(n, rng);
    const Tensor qs = random_doubly_stochastic(n, rng);
    min_slack = std::min(min_slack, cross_entropy_perm(qt, qs).item() - cross_entropy_perm(qt, qt).item());
  }
  return {min_slack >= -1e-10, "100 pairs, min CE(Qt,Qs) - CE(Qt,Qt) = " + fmt(min_slack)};
}

// ---------------------------------------------------------------- AC5

ReferenceSet refs_of(Tensor feats) {
  ReferenceSet r;
  for (std::size_t i = 0; i < feats.rows(); ++i) r.source_index.emplace_back(i / 4, i % 4);
  r.features = std::move(feats);
  return r;
}

Tensor scale_rows(const Tensor& t, Rng& rng) {
  std::vector<double> d(t.data().begin(), t.data().end());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double c = rng.uniform(0.1, 10);
    for (std::size_t j = 0; j < t.cols(); ++j) d[i * t.cols() + j] *= c;
  }
  return Tensor(t.shape(), std::move(d));
}

Outcome ac5() {
  Rng rng(5);
  double perm_err = 0, scale_err = 0;
  for (int inst = 0; inst < 20; ++inst) {
    LossConfig cfg;
    cfg.network = inst % 3 == 0 ? SortChoice::odd_even : inst % 3 == 1 ? SortChoice::bitonic : SortChoice::none;
    const std::size_t n = 2 + rng.below(6), r = 4 + rng.below(12), d = 3 + rng.below(6);
    const Tensor fs = uniform({n, d}, rng), ft = uniform({n, d}, rng), fr = uniform({r, d}, rng);
    const ReferenceSet refs = refs_of(fr);
    const double base = neco_loss(fs, ft, refs, cfg).item();

    std::vector<std::size_t> perm(r);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    ReferenceSet shuffled;
    shuffled.features = ops::gather_rows(fr, perm);
    for (std::size_t i = 0; i < r; ++i) shuffled.source_index.push_back(refs.source_index[perm[i]]);
    perm_err = std::max(perm_err, std::abs(neco_loss(fs, ft, shuffled, cfg).item() - base));

    ReferenceSet scaled = refs;
    scaled.features = scale_rows(fr, rng);
    scale_err = std::max(scale_err,
                         std::abs(neco_loss(scale_rows(fs, rng), scale_rows(ft, rng), scaled, cfg).item() - base));
  }
  return {perm_err <= 1e-9 && scale_err <= 1e-9,
          "20 instances, permutation |dL| = " + fmt(perm_err) + ", rescaling |dL| = " + fmt(scale_err)};
}

// ---------------------------------------------------------------- AC6

std::vector<double> naive_bilinear(const Tensor& tokens, std::size_t rows, std::size_t cols, double x, double y) {
  const double u = std::clamp(x * static_cast<double>(cols) - 0.5, 0.0, static_cast<double>(cols - 1));
  const double v = std::clamp(y * static_cast<double>(rows) - 0.5, 0.0, static_cast<double>(rows - 1));
  std::vector<double> out(tokens.cols(), 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double wy = std::max(0.0, 1.0 - std::abs(v - static_cast<double>(i)));
    for (std::size_t j = 0; j < cols; ++j) {
      const double wx = std::max(0.0, 1.0 - std::abs(u - static_cast<double>(j)));
      for (std::size_t c = 0; c < tokens.cols(); ++c) out[c] += wy * wx * tokens.at(i * cols + j, c);
    }
  }
  return out;
}

Outcome ac6() {
  Rng rng(6);
  // Hungarian against exhaustive search.
  std::size_t hungarian_bad = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + static_cast<std::size_t>(inst) % 7;
    Tensor c = uniform({n, n}, rng, 0, 10);
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    double best = INFINITY;
    do {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += c.at(i, p[i]);
      best = std::min(best, s);
    } while (std::next_permutation(p.begin(), p.end()));
    if (std::abs(hungarian(c).cost - best) > 1e-9) ++hungarian_bad;
  }
  // roi_align against a tent-weight bilinear interpolator.
  double roi_err = 0;
  for (int inst = 0; inst < 20; ++inst) {
    FeatureGrid g;
    g.rows = 4 + rng.below(6);
    g.cols = 4 + rng.below(6);
    g.tokens = uniform({g.rows * g.cols, 5}, rng);
    const double x0 = rng.uniform(0, 0.6), y0 = rng.uniform(0, 0.6);
    const Box box{x0, y0, x0 + rng.uniform(0.1, 1 - x0), y0 + rng.uniform(0.1, 1 - y0)};
    const bool mirrored = rng.bernoulli(0.5);
    const Tensor out = roi_align(g, box, 7, mirrored);
    for (std::size_t r = 0; r < 7; ++r) {
      for (std::size_t c = 0; c < 7; ++c) {
        const double fx = (static_cast<double>(c) + 0.5) / 7.0;
        const double x = mirrored ? box.x1 - fx * box.width() : box.x0 + fx * box.width();
        const double y = box.y0 + (static_cast<double>(r) + 0.5) / 7.0 * box.height();
        const auto ref = naive_bilinear(g.tokens, g.rows, g.cols, x, y);
        for (std::size_t k = 0; k < 5; ++k) roi_err = std::max(roi_err, std::abs(out.at(r * 7 + c, k) - ref[k]));
      }
    }
  }
  // k-means inertia per iteration.
  bool monotone = true;
  for (int inst = 0; inst < 20; ++inst) {
    const auto a = kmeans(uniform({300, 4}, rng), 2 + rng.below(10), 300, static_cast<std::uint64_t>(inst));
    for (std::size_t i = 1; i < a.inertia_trace.size(); ++i) {
      monotone = monotone && a.inertia_trace[i] <= a.inertia_trace[i - 1] * (1 + 1e-12);
    }
  }
  return {hungarian_bad == 0 && roi_err <= 1e-6 && monotone,
          "hungarian mismatches " + std::to_string(hungarian_bad) + "/100, roi_align max err " + fmt(roi_err) +
              ", k-means inertia " + (monotone ? "monotone" : "NOT monotone") + " on 20 runs"};
}

// ---------------------------------------------------------------- AC7

struct Scores {
  double cluster = 0, incontext = 0;
};

Scores evaluate(const TrainConfig& cfg, const ParamSet& p, const std::vector<SyntheticScene>& train,
                const std::vector<SyntheticScene>& val, std::size_t C) {
  EvalOptions o;
  o.K = C;
  o.k = 30;
  o.fraction = 1.0;
  o.seeds = 3;
  return {eval_cluster(cfg.encoder, p, val, C, o, false).miou_mean,
          eval_incontext(cfg.encoder, p, train, val, C, o).miou_mean};
}

Outcome ac7(std::size_t threads) {
  const auto t0 = Clock::now();
  DatasetManifest m;  // 512 train scenes, seed 0
  const auto train = generate_dataset(m);
  m.split = Split::val;
  m.num_scenes = 128;
  const auto val = generate_dataset(m);

  double d_cluster = 0, d_incontext = 0;
  std::ostringstream per;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.threads = threads;
    TrainState st = init_state(cfg);
    warm_start(st, cfg, train);
    const Scores before = evaluate(cfg, st.student, train, val, m.num_classes);
    neco::train(st, cfg, train);
    const Scores after = evaluate(cfg, st.student, train, val, m.num_classes);
    d_cluster += (after.cluster - before.cluster) / 3.0;
    d_incontext += (after.incontext - before.incontext) / 3.0;
    per << " seed" << seed << "[cluster " << fmt(before.cluster) << "->" << fmt(after.cluster) << ", incontext "
        << fmt(before.incontext) << "->" << fmt(after.incontext) << "]";
  }
  const double secs = seconds_since(t0);
  return {d_cluster > 0 && d_incontext > 0 && secs < 900.0,
          "mean gain cluster " + fmt(d_cluster) + ", incontext " + fmt(d_incontext) + ", runtime " + fmt(secs, 4) +
              " s (limit 900, " + std::to_string(threads) + " threads);" + per.str()};
}

// ---------------------------------------------------------------- AC8

struct RunResult {
  int status = -1;
  std::string out;
};

RunResult run(const std::string& cmd) {
  RunResult r;
  FILE* p = popen((cmd + " 2>/dev/null").c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::set<std::string> keys_of(const json& j) {
  std::set<std::string> k;
  for (const auto& [key, v] : j.items()) k.insert(key);
  return k;
}

Outcome ac8(const std::string& cli, std::size_t threads) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found: '" + cli + "'"};
  const fs::path dir = fs::temp_directory_path() / ("neco_ac8_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const std::string data = (dir / "data").string();
  const std::string bin = cli + " --threads " + std::to_string(threads);
  if (run(bin + " gen-data --out " + data + " --scenes 64 --val-scenes 16 --seed 8").status != 0) {
    return {false, "gen-data failed"};
  }
  const std::vector<std::vector<std::string>> configs{
      {"--ema", "true"},
      {"--ema", "false"},
      {"--top_k", "4"},
      {"--top_k", "all"},
      {"--reference_mode", "intra"},
      {"--reference_mode", "inter"},
      {"--network", "odd_even"},
      {"--network", "bitonic"},
      {"--network", "none"},
      {"--steepness_student", "10", "--steepness_teacher", "100"},
      {"--steepness_student", "100", "--steepness_teacher", "10"},
      {"--steepness_student", "1000", "--steepness_teacher", "1000"},
      {"--patch_policy", "fg"},
      {"--patch_policy", "bg"},
      {"--patch_policy", "both"},
  };
  std::set<std::string> schema;
  std::size_t ok = 0;
  std::string failures;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    std::string flags, name;
    for (const auto& f : configs[i]) {
      flags += " " + f;
      name += (name.empty() ? "" : " ") + f;
    }
    const std::string out = (dir / ("run" + std::to_string(i))).string();
    auto tr = run(bin + " train --quiet --data " + data + " --out " + out + " --epochs 2" + flags);
    auto ev = run(bin + " eval --checkpoint " + out + "/checkpoint.bin --data " + data + " --protocol cluster");
    bool good = tr.status == 0 && ev.status == 0;
    if (good) {
      try {
        const json t = json::parse(tr.out), e = json::parse(ev.out);
        good = t["epoch_losses"].size() == 2 && e["mIoU_mean"].get<double>() >= 0 && e["mIoU_mean"].get<double>() <= 1;
        const auto k = keys_of(e);
        if (schema.empty()) schema = k;
        good = good && k == schema;
      } catch (const std::exception&) {
        good = false;
      }
    }
    if (good) {
      ++ok;
    } else {
      failures += " [" + name + "]";
    }
  }
  fs::remove_all(dir);
  return {ok == configs.size(), std::to_string(ok) + "/" + std::to_string(configs.size()) +
                                    " ablation configs trained 2 epochs via the CLI with same-schema reports" +
                                    (failures.empty() ? "" : "; failed:" + failures)};
}

// ---------------------------------------------------------------- AC9

Outcome ac9(std::size_t threads) {
  DatasetManifest m;
  m.num_scenes = 64;
  const auto data = generate_dataset(m);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.threads = threads;
  auto trajectory = [&](TrainState& st, std::optional<std::size_t> stop) {
    std::vector<double> l;
    TrainHooks h;
    h.on_step = [&](const StepRecord& r) { l.push_back(r.loss); };
    h.stop_at = stop;
    neco::train(st, cfg, data, h);
    return l;
  };
  TrainState a = init_state(cfg), b = init_state(cfg);
  const auto la = trajectory(a, std::nullopt);
  const auto lb = trajectory(b, std::nullopt);
  const bool same = la == lb;

  TrainState c = init_state(cfg);
  auto lc = trajectory(c, 3);
  const fs::path ckpt = fs::temp_directory_path() / ("neco_ac9_" + std::to_string(::getpid()) + ".ckpt");
  save_checkpoint(ckpt, c, cfg, Dtype::f64);
  TrainState resumed = load_checkpoint(ckpt, cfg);
  fs::remove(ckpt);
  const auto rest = trajectory(resumed, std::nullopt);
  lc.insert(lc.end(), rest.begin(), rest.end());
  bool params_equal = same_layout(resumed.student, a.student);
  for (std::size_t i = 0; params_equal && i < a.student.size(); ++i) {
    const auto x = a.student.values()[i].data(), y = resumed.student.values()[i].data();
    params_equal = std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  }
  return {same && lc == la && params_equal,
          std::to_string(la.size()) + "-step trajectories " + (same ? "identical" : "DIFFER") + "; resume at step 3 " +
              (lc == la ? "bitwise equal" : "DIFFERS") + ", final parameters " + (params_equal ? "bitwise equal" : "DIFFER")};
}

// ---------------------------------------------------------------- AC10

Outcome ac10() {
  const std::size_t T = 800;
  const double m0 = momentum_schedule(0, T, 0.9995), mT = momentum_schedule(T, T, 0.9995);
  const double lr = cosine_lr(T, T, 1e-4);
  return {m0 == 0.9995 && mT == 1.0 && lr == 0.0,
          "momentum(0) = " + fmt(m0, 6) + ", momentum(T) = " + fmt(mT, 6) + ", cosine_lr(T) = " + fmt(lr)};
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli = NECO_CLI_PATH;
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  std::set<std::string> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (a == "--threads" && i + 1 < argc) {
      threads = std::stoul(argv[++i]);
    } else {
      selected.insert(a);
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"AC1", ac1},
      {"AC2", ac2},
      {"AC3", ac3},
      {"AC4", ac4},
      {"AC5", ac5},
      {"AC6", ac6},
      {"AC7", [&] { return ac7(threads); }},
      {"AC8", [&] { return ac8(cli, threads); }},
      {"AC9", [&] { return ac9(threads); }},
      {"AC10", ac10},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!selected.empty() && !selected.count(name)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << name << " " << (o.pass ? "PASS" : "FAIL") << " " << o.detail << std::endl;
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
