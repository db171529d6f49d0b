// neco: data generation, training, evaluation and diagnostics.
//
// Every command prints JSON on stdout. Failures print one JSON line
// {"error": ..., "kind": ...} on stderr and exit nonzero.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "neco/eval.hpp"
#include "neco/gradcheck.hpp"
#include "neco/sortnet.hpp"
#include "neco/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace neco;

namespace {

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    double x = 0;
    try {
      x = std::stod(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size()) throw std::invalid_argument("not a number: '" + item + "'");
    out.push_back(x);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------- gen-data

struct GenData {
  fs::path out;
  std::uint64_t seed = 0;
  std::size_t scenes = 512;
  std::size_t val_scenes = 128;
  std::size_t classes = 4;
  std::size_t size = 64;
};

json cmd_gen_data(const GenData& g) {
  json report{{"command", "gen-data"}, {"out", g.out.string()}, {"splits", json::object()}};
  for (Split split : {Split::train, Split::val}) {
    DatasetManifest m;
    m.num_scenes = split == Split::train ? g.scenes : g.val_scenes;
    m.num_classes = g.classes;
    m.height = m.width = g.size;
    m.split = split;
    m.seed = g.seed;
    m.validate();
    Dataset d{m, generate_dataset(m)};
    const fs::path path = split_path(g.out, split);
    write_dataset(path, d);
    report["splits"][to_string(split)] = {{"path", path.string()},
                                          {"scenes", m.num_scenes},
                                          {"classes", m.num_classes},
                                          {"height", m.height},
                                          {"width", m.width},
                                          {"seed", m.seed}};
  }
  return report;
}

// ---------------------------------------------------------------- train

struct Train {
  fs::path config_file, data, out;
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> overrides;
  std::string dtype = "f64";
  std::optional<std::size_t> stop_at;
  fs::path resume;
  bool quiet = false;
};

TrainConfig effective_config(const Train& t, std::size_t threads) {
  TrainConfig cfg;
  cfg.threads = threads;
  if (!t.config_file.empty()) apply_config_file(cfg, t.config_file);
  for (const auto& [k, v] : t.overrides) set_config_value(cfg, k, v);
  if (t.seed) cfg.seed = *t.seed;
  cfg.validate();
  return cfg;
}

json cmd_train(const Train& t, std::size_t threads) {
  const TrainConfig cfg = effective_config(t, threads);
  const Dataset train_set = read_dataset(split_path(t.data, Split::train));
  const fs::path ckpt = t.out / "checkpoint.bin";
  const fs::path log_path = t.out / "train_log.jsonl";
  fs::create_directories(t.out);

  TrainState state;
  std::vector<double> warm;
  const bool resuming = !t.resume.empty();
  if (resuming) {
    state = load_checkpoint(t.resume, cfg);
  } else {
    state = init_state(cfg);
    warm = warm_start(state, cfg, train_set.scenes);
  }

  std::ofstream log(log_path, resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  TrainHooks hooks;
  hooks.stop_at = t.stop_at;
  hooks.on_step = [&](const StepRecord& r) {
    const std::string line = to_json(r).dump();
    log << line << '\n';
    if (!t.quiet) std::cerr << line << '\n';
  };
  const auto epoch_losses = neco::train(state, cfg, train_set.scenes, hooks);
  save_checkpoint(ckpt, state, cfg, t.dtype == "f32" ? Dtype::f32 : Dtype::f64);

  json report{{"command", "train"},
              {"config", to_json(cfg)},
              {"config_hash", config_hash(cfg)},
              {"data", t.data.string()},
              {"dataset", {{"scenes", train_set.manifest.num_scenes},
                           {"classes", train_set.manifest.num_classes},
                           {"seed", train_set.manifest.seed}}},
              {"resumed_from", resuming ? json(t.resume.string()) : json(nullptr)},
              {"warm_losses", warm},
              {"epoch_losses", epoch_losses},
              {"steps", state.step},
              {"checkpoint", ckpt.string()},
              {"checkpoint_dtype", t.dtype},
              {"log", log_path.string()}};
  write_json(t.out / "train_report.json", report);
  return report;
}

// ---------------------------------------------------------------- eval

struct Eval {
  fs::path checkpoint, data, out;
  std::string protocol = "cluster";
  EvalOptions opt;
  bool K_given = false;
};

json cmd_eval(Eval e) {
  json stored;
  const TrainState state = load_checkpoint_unchecked(e.checkpoint, &stored);
  const TrainConfig cfg = config_from_json(stored);
  const Dataset val = read_dataset(split_path(e.data, Split::val));
  const std::size_t C = val.manifest.num_classes;
  if (!e.K_given) e.opt.K = e.protocol == "overcluster" ? 3 * C : C;

  EvalReport r;
  if (e.protocol == "cluster" || e.protocol == "overcluster") {
    r = eval_cluster(cfg.encoder, state.student, val.scenes, C, e.opt, e.protocol == "overcluster");
  } else {
    const Dataset train = read_dataset(split_path(e.data, Split::train));
    if (train.manifest.num_classes != C) throw std::invalid_argument("train and val class counts differ");
    r = eval_incontext(cfg.encoder, state.student, train.scenes, val.scenes, C, e.opt);
  }
  json report = to_json(r);
  report["command"] = "eval";
  report["checkpoint"] = e.checkpoint.string();
  report["data"] = e.data.string();
  report["config"] = stored;
  report["eval"] = {{"temperature", e.opt.temperature}, {"max_iters", e.opt.max_iters}, {"cap", e.opt.cap},
                    {"normalize", e.opt.normalize},     {"seed", e.opt.seed},           {"num_classes", C}};
  if (!e.out.empty()) write_json(e.out, report);
  return report;
}

// ---------------------------------------------------------------- diagnostics

json cmd_gradcheck(const GradcheckOptions& opt, const std::string& sizes) {
  GradcheckOptions o = opt;
  o.sizes.clear();
  for (double s : parse_list(sizes)) o.sizes.push_back(static_cast<std::size_t>(s));
  json rows = json::array();
  bool all = true;
  for (const auto& r : run_gradcheck(o)) {
    rows.push_back(to_json(r));
    all = all && r.pass;
  }
  return {{"command", "gradcheck"}, {"seed", o.seed},       {"sizes", o.sizes}, {"eps", o.eps},
          {"tolerance", o.tolerance}, {"checks", rows}, {"pass", all}};
}

struct SortDemo {
  std::string values;
  double beta = 100;
  std::string network = "odd_even";
  std::string relax = "logistic";
  double lambda = 0.25;
};

json cmd_sort_demo(const SortDemo& d) {
  const auto v = parse_list(d.values);
  sortnet::RelaxFamily fam{sortnet::relax_kind_from_string(d.relax), d.beta, d.lambda};
  fam.validate();
  const auto net = sortnet::build_network(sortnet::network_kind_from_string(d.network), v.size());
  const auto r = sortnet::soft_sort(Tensor::vector(v), net, fam);
  json q = json::array();
  for (std::size_t i = 0; i < v.size(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < v.size(); ++j) row.push_back(r.perm.at(i, j));
    q.push_back(row);
  }
  const auto hard = sortnet::hard_sort_oracle(v);
  return {{"command", "sort-demo"},
          {"values", v},
          {"network", d.network},
          {"relax", d.relax},
          {"beta", d.beta},
          {"lambda", d.lambda},
          {"layers", net.layers.size()},
          {"sorted", std::vector<double>(r.sorted_values.data().begin(), r.sorted_values.data().end())},
          {"Q", q},
          {"hard_sorted", hard.sorted}};
}

int fail(const std::string& kind, const std::string& what, int code) {
  std::cerr << json{{"error", what}, {"kind", kind}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neighbour-consistency dense post-pretraining toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = default_threads();
  app.add_option("--threads", threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic train/val dataset");
  g->add_option("--out", gen.out, "Dataset root")->required();
  g->add_option("--seed", gen.seed);
  g->add_option("--scenes", gen.scenes, "Training scenes");
  g->add_option("--val-scenes", gen.val_scenes, "Validation scenes");
  g->add_option("--classes", gen.classes, "Classes including background");
  g->add_option("--size", gen.size, "Image side in pixels");

  Train tr;
  auto* t = app.add_subcommand("train", "Warm start, then NeCo training; writes checkpoint and log");
  t->add_option("--config", tr.config_file, "key = value config file")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "Dataset root")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.seed);
  t->add_option("--dtype", tr.dtype, "Checkpoint blob precision")->check(CLI::IsMember({"f32", "f64"}));
  t->add_option("--stop-at", tr.stop_at, "Stop after this many total steps");
  t->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_flag("--quiet", tr.quiet, "Do not echo step records to stderr");
  std::map<std::string, std::string> raw;
  for (const auto& key : config_keys()) {
    if (key == "seed" || key == "threads") continue;
    t->add_option("--" + key, raw[key], "Config override");
  }

  Eval ev;
  auto* e = app.add_subcommand("eval", "Frozen-feature evaluation of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Dataset root")->required();
  e->add_option("--protocol", ev.protocol)->check(CLI::IsMember({"cluster", "overcluster", "incontext"}));
  auto* K = e->add_option("--K", ev.opt.K, "Clusters (default: classes, or 3x classes when overclustering)");
  e->add_option("--k", ev.opt.k, "Neighbours for incontext");
  e->add_option("--fraction", ev.opt.fraction, "Training fraction for the memory bank");
  auto* seeds = e->add_option("--seeds", ev.opt.seeds, "Repeats (default 5 for incontext with --fraction < 1, else 1)");
  e->add_option("--seed", ev.opt.seed);
  e->add_option("--temperature", ev.opt.temperature);
  e->add_option("--cap", ev.opt.cap, "Memory bank cap");
  e->add_option("--max-iters", ev.opt.max_iters);
  e->add_flag("--normalize", ev.opt.normalize, "Unit-normalise tokens before k-means");
  e->add_option("--out", ev.out, "Also write the report here");

  GradcheckOptions gc;
  std::string sizes = "2,4,8,16";
  auto* c = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable component");
  c->add_option("--seed", gc.seed);
  c->add_option("--sizes", sizes, "Comma-separated sorting lengths");
  c->add_option("--instances", gc.instances);

  SortDemo sd;
  auto* s = app.add_subcommand("sort-demo", "Relaxed sort of a few values");
  s->add_option("--values", sd.values, "Comma-separated values")->required();
  s->add_option("--beta", sd.beta, "Steepness");
  s->add_option("--network", sd.network)->check(CLI::IsMember({"odd_even", "bitonic"}));
  s->add_option("--relax", sd.relax)->check(CLI::IsMember({"logistic", "arctan"}));
  s->add_option("--lambda", sd.lambda);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    return fail("usage", ex.what(), 2);
  }

  try {
    json out;
    if (*g) {
      out = cmd_gen_data(gen);
    } else if (*t) {
      for (const auto& [k, v] : raw) {
        if (t->count("--" + k)) tr.overrides[k] = v;
      }
      out = cmd_train(tr, threads);
    } else if (*e) {
      ev.K_given = K->count() > 0;
      if (!seeds->count() && ev.protocol == "incontext" && ev.opt.fraction < 1.0) ev.opt.seeds = 5;
      out = cmd_eval(ev);
    } else if (*c) {
      out = cmd_gradcheck(gc, sizes);
      std::cout << out.dump() << std::endl;
      return out["pass"].get<bool>() ? 0 : 1;
    } else if (*s) {
      out = cmd_sort_demo(sd);
    }
    std::cout << out.dump() << std::endl;
    return 0;
  } catch (const TrainingError& ex) {
    return fail("training", ex.what(), 3);
  } catch (const std::invalid_argument& ex) {
    return fail("invalid_argument", ex.what(), 1);
  } catch (const std::exception& ex) {
    return fail("runtime", ex.what(), 1);
  }
}
