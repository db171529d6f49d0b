#include "neco/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include "neco/rng.hpp"

namespace neco {

// ---------------------------------------------------------------- config

namespace {

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || !std::isfinite(x)) {
    throw std::invalid_argument("config: '" + key + "' expects a real number, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config: '" + key + "' expects a boolean, got '" + v + "'");
}

template <class F>
auto parse_enum(const std::string& key, const std::string& v, F from_string) {
  try {
    return from_string(v);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config: '" + key + "': " + e.what());
  }
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<nlohmann::json(const TrainConfig&)> get;
};

#define NECO_SIZE(name, member)                                                                                   \
  {                                                                                                               \
    name, {                                                                                                       \
      [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_size(k, v); },           \
          [](const TrainConfig& c) { return nlohmann::json(c.member); }                                           \
    }                                                                                                             \
  }
#define NECO_REAL(name, member)                                                                                   \
  {                                                                                                               \
    name, {                                                                                                       \
      [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_real(k, v); },           \
          [](const TrainConfig& c) { return nlohmann::json(c.member); }                                           \
    }                                                                                                             \
  }
#define NECO_BOOL(name, member)                                                                                   \
  {                                                                                                               \
    name, {                                                                                                       \
      [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); },           \
          [](const TrainConfig& c) { return nlohmann::json(c.member); }                                           \
    }                                                                                                             \
  }
#define NECO_ENUM(name, member, from)                                                                             \
  {                                                                                                               \
    name, {                                                                                                       \
      [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_enum(k, v, from); },     \
          [](const TrainConfig& c) { return nlohmann::json(to_string(c.member)); }                                \
    }                                                                                                             \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table{
      NECO_SIZE("epochs", epochs),
      NECO_SIZE("batch_size", batch_size),
      NECO_REAL("lr_backbone", lr_backbone),
      NECO_REAL("lr_head", lr_head),
      NECO_REAL("weight_decay", weight_decay),
      {"seed",
       {[](TrainConfig& c, const std::string& k, const std::string& v) { c.seed = parse_size(k, v); },
        [](const TrainConfig& c) { return nlohmann::json(c.seed); }}},
      NECO_BOOL("ema", ema),
      NECO_REAL("ema_m0", ema_m0),
      NECO_SIZE("grid", grid),
      NECO_BOOL("local_view", local_view),
      NECO_SIZE("warm_epochs", warm_epochs),
      NECO_REAL("warm_lr", warm_lr),
      NECO_SIZE("threads", threads),
      NECO_REAL("steepness_student", loss.steepness_student),
      NECO_REAL("steepness_teacher", loss.steepness_teacher),
      NECO_ENUM("network", loss.network, sort_choice_from_string),
      NECO_ENUM("relax", loss.relax, sortnet::relax_kind_from_string),
      NECO_REAL("lambda", loss.lambda),
      {"top_k",
       {[](TrainConfig& c, const std::string& k, const std::string& v) {
          c.loss.top_k = v == "all" ? 0 : parse_size(k, v);
          if (v != "all" && c.loss.top_k == 0) throw std::invalid_argument("config: 'top_k' must be positive or 'all'");
        },
        [](const TrainConfig& c) {
          return c.loss.top_k == 0 ? nlohmann::json("all") : nlohmann::json(c.loss.top_k);
        }}},
      NECO_ENUM("similarity", loss.similarity, similarity_from_string),
      NECO_ENUM("reference_mode", loss.reference_mode, reference_mode_from_string),
      NECO_ENUM("patch_policy", loss.patch_policy, patch_policy_from_string),
      NECO_REAL("attention_mass", loss.attention_mass),
      NECO_SIZE("num_references", loss.num_references),
      NECO_SIZE("patch", encoder.patch),
      NECO_SIZE("dim", encoder.dim),
      NECO_SIZE("depth", encoder.depth),
      NECO_SIZE("heads", encoder.heads),
      NECO_SIZE("mlp_hidden", encoder.mlp_hidden),
      NECO_SIZE("head_hidden", head.hidden),
      NECO_SIZE("head_out", head.out),
      NECO_SIZE("global_size", views.global.size),
      NECO_SIZE("local_size", views.local.size),
      NECO_REAL("global_scale_min", views.global.scale_min),
      NECO_REAL("global_scale_max", views.global.scale_max),
      NECO_REAL("local_scale_min", views.local.scale_min),
      NECO_REAL("local_scale_max", views.local.scale_max),
      NECO_BOOL("flip", views.flip),
      NECO_BOOL("jitter", views.jitter.enabled),
  };
  return table;
}

#undef NECO_SIZE
#undef NECO_REAL
#undef NECO_BOOL
#undef NECO_ENUM

}  // namespace

void TrainConfig::validate() const {
  if (threads == 0) throw std::invalid_argument("config: threads must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be at least 1");
  if (!(lr_backbone > 0) || !(lr_head > 0) || !(warm_lr > 0)) {
    throw std::invalid_argument("config: learning rates must be positive");
  }
  if (weight_decay < 0) throw std::invalid_argument("config: weight_decay must be non-negative");
  if (!(ema_m0 >= 0 && ema_m0 <= 1)) throw std::invalid_argument("config: ema_m0 must lie in [0, 1]");
  if (grid == 0) throw std::invalid_argument("config: grid must be positive");
  if (views.global.size % encoder.patch != 0 || views.local.size % encoder.patch != 0) {
    throw std::invalid_argument("config: view sizes must be multiples of the patch size");
  }
  if (head.in != encoder.dim) throw std::invalid_argument("config: head input width must equal encoder dim");
  loss.validate();
  encoder.validate();
  head.validate();
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  it->second.set(cfg, key, value);
  if (key == "dim") cfg.head.in = cfg.encoder.dim;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(no) + ": ";
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected 'key = value'");
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + e.what());
    }
  }
}

void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  for (const auto& [k, v] : j.items()) set_config_value(cfg, k, v.is_string() ? v.get<std::string>() : v.dump());
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, f] : fields()) j[k] = f.get(cfg);
  return j;
}

std::uint64_t config_hash(const TrainConfig& cfg) {
  nlohmann::json j = to_json(cfg);
  j.erase("threads");
  return mix64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------- optimiser

double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (step > total) throw std::invalid_argument("cosine_lr: step beyond total");
  if (total == 0) return lr0;
  return lr0 * (std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)) + 1.0) / 2.0;
}

void adam_step(ParamSet& params, const std::vector<Tensor>& grads, AdamState& state, const std::vector<double>& lrs,
               double weight_decay) {
  const std::size_t n = params.size();
  if (grads.size() != n || lrs.size() != n) throw ShapeError("adam_step: parameter, gradient and lr counts differ");
  if (state.m.empty()) {
    for (const auto& p : params.values()) {
      state.m.push_back(Tensor::zeros(p.shape()));
      state.v.push_back(Tensor::zeros(p.shape()));
    }
  }
  if (state.m.size() != n) throw ShapeError("adam_step: moment count differs from parameter count");
  ++state.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = params.values()[i];
    if (grads[i].shape() != p.shape()) {
      throw ShapeError("adam_step: gradient of '" + params.names()[i] + "' has shape " + shape_str(grads[i].shape()));
    }
    auto w = p.mutable_data();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    auto g = grads[i].data();
    const double decay = p.rank() >= 2 ? weight_decay : 0.0;
    const double lr = lrs[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = kAdamBeta1 * m[k] + (1.0 - kAdamBeta1) * g[k];
      v[k] = kAdamBeta2 * v[k] + (1.0 - kAdamBeta2) * g[k] * g[k];
      const double mh = m[k] / c1;
      const double vh = v[k] / c2;
      w[k] -= lr * (mh / (std::sqrt(vh) + kAdamEps) + decay * w[k]);
    }
  }
}

std::vector<double> param_lrs(const ParamSet& params, double lr_backbone, double lr_head) {
  std::vector<double> out;
  for (const auto& name : params.names()) out.push_back(name.rfind("head.", 0) == 0 ? lr_head : lr_backbone);
  return out;
}

// ---------------------------------------------------------------- training

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  Rng rng(derive_seed(cfg.seed, "init"));
  ParamSet enc = init_encoder(cfg.encoder, rng);
  ParamSet head = init_head(cfg.head, rng);
  for (std::size_t i = 0; i < head.size(); ++i) enc.add(head.names()[i], head.values()[i]);
  s.student = std::move(enc);
  s.teacher = s.student.detached();
  return s;
}

nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}, {"momentum", r.momentum}};
}

namespace {

FeatureGrid project_grid(const ParamSet& params, FeatureGrid grid) {
  grid.tokens = project(params, grid.tokens);
  return grid;
}

void accumulate(std::vector<Tensor>& acc, const Gradients& g, const ParamSet& watched) {
  if (acc.empty()) {
    for (const auto& p : watched.values()) acc.push_back(Tensor::zeros(p.shape()));
  }
  for (std::size_t i = 0; i < watched.size(); ++i) {
    auto src = g.of(watched.values()[i]).data();
    auto dst = acc[i].mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

void add_grads(std::vector<Tensor>& acc, std::vector<Tensor> g) {
  if (acc.empty()) {
    for (const auto& t : g) acc.push_back(Tensor::zeros(t.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    auto src = g[i].data();
    auto dst = acc[i].mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

// Runs fn(0..n-1) on up to `threads` workers; rethrows the first failure.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

void check_finite(double loss, const std::vector<Tensor>& grads, const ParamSet& params, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingError("non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (double x : grads[i].data()) {
      if (!std::isfinite(x)) {
        throw TrainingError("non-finite gradient for '" + params.names()[i] + "' at step " + std::to_string(step));
      }
    }
  }
}

}  // namespace

StepRecord train_step(TrainState& state, const TrainConfig& cfg, const std::vector<const Image*>& batch,
                      std::uint64_t step_seed, std::size_t total_steps) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::size_t B = batch.size();
  const std::size_t step = state.step;
  if (!cfg.ema) state.teacher = state.student.detached();

  std::vector<std::pair<View, View>> views;
  views.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    Rng rng(derive_seed(step_seed, "views", b));
    views.push_back(sample_views(*batch[b], cfg.views, rng));
  }

  std::vector<FeatureGrid> teacher_grids;
  {
    NoGradScope off;
    for (const auto& v : views) {
      teacher_grids.push_back(
          project_grid(state.teacher, encode(cfg.encoder, state.teacher, patchify(v.first.image, cfg.encoder.patch))));
    }
  }

  Rng ref_rng(derive_seed(step_seed, "refs"));
  std::optional<ReferenceSet> shared_refs;
  if (cfg.loss.reference_mode == ReferenceMode::inter) {
    shared_refs = sample_references(teacher_grids, cfg.loss, cfg.loss.num_references, ref_rng);
  }

  std::vector<ReferenceSet> refs;
  refs.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    refs.push_back(shared_refs ? *shared_refs
                               : sample_references(teacher_grids, cfg.loss, cfg.loss.num_references, ref_rng, b));
  }

  const std::size_t num_views = cfg.local_view ? 2 : 1;
  const double norm = 1.0 / static_cast<double>(B * num_views);
  std::vector<double> losses(B, 0.0);
  std::vector<std::vector<Tensor>> image_grads(B);
  auto run_image = [&](std::size_t b) {
    const auto& [v1, v2] = views[b];
    Tape tape;
    TapeScope scope(tape);
    ParamSet w = state.student.watched(tape);

    // View 1 against the teacher's view 1: same crop, the whole view aligns.
    FeatureGrid s1 = project_grid(w, encode(cfg.encoder, w, patchify(v1.image, cfg.encoder.patch)));
    Tensor t1 = roi_align(teacher_grids[b], Box{}, cfg.grid);
    Tensor loss = neco_loss(roi_align(s1, Box{}, cfg.grid), t1, refs[b], cfg.loss);

    if (cfg.local_view) {
      FeatureGrid s2 = project_grid(w, encode(cfg.encoder, w, patchify(v2.image, cfg.encoder.patch)));
      auto [box_t, box_s] = intersection_boxes(v1.crop, v2.crop);
      Tensor t2 = roi_align(teacher_grids[b], box_t, cfg.grid, v1.crop.flip);
      loss = ops::add(loss, neco_loss(roi_align(s2, box_s, cfg.grid, v2.crop.flip), t2, refs[b], cfg.loss));
    }
    loss = ops::scale(loss, norm);
    losses[b] = loss.item();
    accumulate(image_grads[b], tape.backward(loss), w);
  };
  try {
    parallel_for(B, cfg.threads, run_image);
  } catch (const DomainError& e) {
    throw TrainingError("non-finite values at step " + std::to_string(step) + ": " + e.what());
  }

  // Summed in image order so the result does not depend on the thread count.
  std::vector<Tensor> grads;
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    total += losses[b];
    add_grads(grads, std::move(image_grads[b]));
  }
  check_finite(total, grads, state.student, step);

  StepRecord rec;
  rec.step = step;
  rec.loss = total;
  rec.lr = cosine_lr(step, total_steps, cfg.lr_backbone);
  adam_step(state.student, grads, state.adam,
            param_lrs(state.student, rec.lr, cosine_lr(step, total_steps, cfg.lr_head)), cfg.weight_decay);
  if (cfg.ema) {
    rec.momentum = momentum_schedule(step, total_steps, cfg.ema_m0);
    ema_update(state.teacher, state.student, rec.momentum);
  } else {
    rec.momentum = 0.0;
    state.teacher = state.student.detached();
  }
  ++state.step;
  return rec;
}

std::size_t steps_per_epoch(const TrainConfig& cfg, std::size_t num_scenes) {
  const std::size_t n = num_scenes / cfg.batch_size;
  if (n == 0) {
    throw std::invalid_argument("train: " + std::to_string(num_scenes) + " scenes cannot fill a batch of " +
                                std::to_string(cfg.batch_size));
  }
  return n;
}

namespace {

std::vector<std::size_t> epoch_order(std::uint64_t seed, const char* tag, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, tag, epoch));
  rng.shuffle(order);
  return order;
}

// Clean per-patch mean colours of `img`: N x C.
Tensor patch_means(const Image& img, std::size_t patch) {
  const std::size_t rows = img.height / patch, cols = img.width / patch;
  std::vector<double> out(rows * cols * img.channels, 0.0);
  const double inv = 1.0 / static_cast<double>(patch * patch);
  for (std::size_t gy = 0; gy < rows; ++gy)
    for (std::size_t gx = 0; gx < cols; ++gx)
      for (std::size_t c = 0; c < img.channels; ++c) {
        double s = 0;
        for (std::size_t y = gy * patch; y < (gy + 1) * patch; ++y)
          for (std::size_t x = gx * patch; x < (gx + 1) * patch; ++x) s += img.at(c, y, x);
        out[(gy * cols + gx) * img.channels + c] = s * inv;
      }
  return Tensor({rows * cols, img.channels}, std::move(out));
}

}  // namespace

std::vector<double> warm_start(TrainState& state, const TrainConfig& cfg, const std::vector<SyntheticScene>& scenes) {
  cfg.validate();
  const std::size_t spe = steps_per_epoch(cfg, scenes.size());
  // Linear probe appended after the encoder tensors; dropped at the end.
  ParamSet params;
  const std::size_t n_model = state.student.size();
  for (std::size_t i = 0; i < n_model; ++i) params.add(state.student.names()[i], state.student.values()[i]);
  Rng probe_rng(derive_seed(cfg.seed, "warm/probe"));
  params.add("probe.w", Tensor({cfg.encoder.dim, cfg.encoder.channels}, [&] {
               std::vector<double> d(cfg.encoder.dim * cfg.encoder.channels);
               for (auto& x : d) x = probe_rng.truncated_normal(0.02);
               return d;
             }()));
  params.add("probe.b", Tensor::zeros({cfg.encoder.channels}));
  const auto lrs = std::vector<double>(params.size(), cfg.warm_lr);
  AdamState adam;
  std::vector<double> epoch_means;
  for (std::size_t e = 0; e < cfg.warm_epochs; ++e) {
    auto order = epoch_order(cfg.seed, "warm/epoch", e, scenes.size());
    double epoch_total = 0;
    for (std::size_t s = 0; s < spe; ++s) {
      std::vector<Tensor> grads;
      double step_loss = 0;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t idx = order[s * cfg.batch_size + b];
        Rng rng(derive_seed(cfg.seed, "warm/view", (e * scenes.size() + idx)));
        CropParams crop = sample_crop(cfg.views.global, cfg.views.flip, rng);
        Image clean = crop_resize(scenes[idx].image, crop.box, cfg.views.global.size, crop.flip);
        Image noisy = photometric_jitter(clean, cfg.views.jitter, crop.color_jitter_seed);
        Tensor target = patch_means(clean, cfg.encoder.patch);
        Tape tape;
        TapeScope scope(tape);
        ParamSet w = params.watched(tape);
        FeatureGrid g = encode(cfg.encoder, w, patchify(noisy, cfg.encoder.patch));
        Tensor pred = ops::add_rowvec(ops::matmul(g.tokens, w.get("probe.w")), w.get("probe.b"));
        Tensor diff = ops::sub(pred, target);
        Tensor loss = ops::scale(ops::mean(ops::mul(diff, diff)), 1.0 / static_cast<double>(cfg.batch_size));
        step_loss += loss.item();
        accumulate(grads, tape.backward(loss), w);
      }
      check_finite(step_loss, grads, params, s);
      adam_step(params, grads, adam, lrs, 0.0);
      epoch_total += step_loss;
    }
    epoch_means.push_back(epoch_total / static_cast<double>(spe));
  }
  ParamSet student;
  for (std::size_t i = 0; i < n_model; ++i) student.add(params.names()[i], params.values()[i]);
  state.student = std::move(student);
  state.teacher = state.student.detached();
  state.adam = AdamState{};
  state.step = 0;
  return epoch_means;
}

std::vector<double> train(TrainState& state, const TrainConfig& cfg, const std::vector<SyntheticScene>& scenes,
                          const TrainHooks& hooks) {
  cfg.validate();
  const std::size_t spe = steps_per_epoch(cfg, scenes.size());
  const std::size_t total_steps = cfg.epochs * spe;
  std::vector<double> epoch_means;
  double epoch_total = 0;
  std::size_t epoch_steps = 0;
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  while (state.step < total_steps) {
    if (hooks.stop_at && state.step >= *hooks.stop_at) break;
    const std::size_t s = state.step;
    const std::size_t epoch = s / spe;
    if (epoch != order_epoch) {
      order = epoch_order(cfg.seed, "epoch", epoch, scenes.size());
      order_epoch = epoch;
    }
    std::vector<const Image*> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(&scenes[order[(s % spe) * cfg.batch_size + b]].image);
    StepRecord rec = train_step(state, cfg, batch, derive_seed(cfg.seed, "step", s), total_steps);
    rec.epoch = epoch;
    if (hooks.on_step) hooks.on_step(rec);
    epoch_total += rec.loss;
    ++epoch_steps;
    if (s % spe == spe - 1) {
      if (epoch_steps == spe) epoch_means.push_back(epoch_total / static_cast<double>(spe));
      epoch_total = 0;
      epoch_steps = 0;
    }
  }
  return epoch_means;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr const char* kCheckpointFormat = "neco-checkpoint-v1";

struct Entry {
  std::string name;
  const Tensor* tensor;
};

std::string hex64(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << x;
  return os.str();
}

void put_le(std::vector<char>& out, std::uint64_t bits, int bytes) {
  for (int b = 0; b < bytes; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

std::uint64_t get_le(const char* p, int bytes) {
  std::uint64_t x = 0;
  for (int b = 0; b < bytes; ++b) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return x;
}

struct Parsed {
  nlohmann::json header;
  std::vector<char> blob;
};

Parsed read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  Parsed p;
  try {
    p.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw FormatError("load_checkpoint: " + path.string() + " has no JSON manifest");
  }
  if (!p.header.is_object() || p.header.value("format", "") != kCheckpointFormat) {
    throw FormatError("load_checkpoint: " + path.string() + " is not a checkpoint");
  }
  p.blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return p;
}

TrainState decode(const Parsed& p) {
  const std::string dtype = p.header.at("dtype").get<std::string>();
  const int width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
  if (width == 0) throw FormatError("load_checkpoint: unknown dtype '" + dtype + "'");
  TrainState s;
  std::vector<Tensor> m, v;
  for (const auto& e : p.header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n * width > p.blob.size()) throw FormatError("load_checkpoint: tensor '" + name + "' overruns the file");
    std::vector<double> d(n);
    for (std::size_t k = 0; k < n; ++k) {
      const char* at = &p.blob[offset + k * width];
      d[k] = width == 8 ? std::bit_cast<double>(get_le(at, 8))
                        : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(at, 4))));
    }
    Tensor t(std::move(shape), std::move(d));
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash), local = name.substr(slash + 1);
    if (group == "student") s.student.add(local, t);
    else if (group == "teacher") s.teacher.add(local, t);
    else if (group == "adam_m") m.push_back(t);
    else if (group == "adam_v") v.push_back(t);
    else throw FormatError("load_checkpoint: unknown tensor group in '" + name + "'");
  }
  s.step = p.header.at("step").get<std::size_t>();
  s.adam.t = p.header.at("adam_t").get<std::size_t>();
  s.adam.m = std::move(m);
  s.adam.v = std::move(v);
  if (!same_layout(s.student, s.teacher)) throw FormatError("load_checkpoint: teacher and student layouts differ");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg, Dtype dtype) {
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < state.student.size(); ++i) {
    entries.push_back({"student/" + state.student.names()[i], &state.student.values()[i]});
  }
  for (std::size_t i = 0; i < state.teacher.size(); ++i) {
    entries.push_back({"teacher/" + state.teacher.names()[i], &state.teacher.values()[i]});
  }
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    entries.push_back({"adam_m/" + state.student.names()[i], &state.adam.m[i]});
    entries.push_back({"adam_v/" + state.student.names()[i], &state.adam.v[i]});
  }
  const int width = dtype == Dtype::f64 ? 8 : 4;
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<char> blob;
  for (const auto& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", blob.size()}});
    for (double x : e.tensor->data()) {
      if (width == 8) put_le(blob, std::bit_cast<std::uint64_t>(x), 8);
      else put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(x)), 4);
    }
  }
  nlohmann::json header{{"format", kCheckpointFormat},
                        {"dtype", width == 8 ? "f64" : "f32"},
                        {"step", state.step},
                        {"adam_t", state.adam.t},
                        {"config_hash", hex64(config_hash(cfg))},
                        {"config", to_json(cfg)},
                        {"tensors", tensors}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out << header.dump() << '\n';
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg) {
  Parsed p = read_raw(path);
  const std::string stored = p.header.at("config_hash").get<std::string>();
  const std::string expected = hex64(config_hash(cfg));
  if (stored != expected) {
    throw std::invalid_argument("load_checkpoint: config hash mismatch (checkpoint " + stored + ", run " + expected + ")");
  }
  return decode(p);
}

TrainState load_checkpoint_unchecked(const std::filesystem::path& path, nlohmann::json* stored_config) {
  Parsed p = read_raw(path);
  if (stored_config) *stored_config = p.header.at("config");
  return decode(p);
}

}  // namespace neco
