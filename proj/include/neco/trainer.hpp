#pragma once

// Post-pretraining loop: a warm start followed by neighbour-consistency
// training of a student against an EMA teacher.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "neco/loss.hpp"
#include "neco/model.hpp"
#include "neco/synth.hpp"
#include "neco/views.hpp"

namespace neco {

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 16;
  double lr_backbone = 1e-4;
  double lr_head = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  bool ema = true;
  double ema_m0 = 0.9995;
  std::size_t grid = 7;          // aligned g x g grid
  bool local_view = true;        // also train the local view against the teacher
  std::size_t warm_epochs = 3;
  double warm_lr = 1e-3;
  // Worker threads for the per-image tapes. Results do not depend on it.
  std::size_t threads = 1;
  LossConfig loss;
  EncoderConfig encoder;
  HeadConfig head;
  ViewConfig views;

  void validate() const;
};

// Flat key = value access used by the config file and CLI overrides. Unknown
// keys and unparsable values throw std::invalid_argument.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();
// UTF-8 lines `key = value`; '#' starts a comment. Errors name the line.
void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& origin = "config");
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);
// Inverse of to_json(TrainConfig).
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
// Hash of every field that affects the trajectory (all but threads).
std::uint64_t config_hash(const TrainConfig& cfg);

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t t = 0;
};

struct TrainState {
  ParamSet student;  // encoder + "head.*" tensors
  ParamSet teacher;
  AdamState adam;
  std::size_t step = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double cosine_lr(std::size_t step, std::size_t total, double lr0);

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Adam with bias correction; weight decay is decoupled and applies to
// matrices only. lrs holds one rate per parameter.
void adam_step(ParamSet& params, const std::vector<Tensor>& grads, AdamState& state, const std::vector<double>& lrs,
               double weight_decay);

std::vector<double> param_lrs(const ParamSet& params, double lr_backbone, double lr_head);

TrainState init_state(const TrainConfig& cfg);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0;
  double lr = 0;
  double momentum = 0;
};

nlohmann::json to_json(const StepRecord& r);

// One optimisation step on `batch`. total_steps sets both schedules.
StepRecord train_step(TrainState& state, const TrainConfig& cfg, const std::vector<const Image*>& batch,
                      std::uint64_t step_seed, std::size_t total_steps);

// Mean patch colour regression from jittered inputs through a linear probe;
// updates the student encoder and resets the teacher to a copy of it.
// Returns per-epoch mean loss.
std::vector<double> warm_start(TrainState& state, const TrainConfig& cfg, const std::vector<SyntheticScene>& scenes);

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  // Stop after this many total steps (for checkpoint/resume).
  std::optional<std::size_t> stop_at;
};

// Runs NeCo epochs from state.step onward. Returns per-epoch mean loss of the
// epochs that ran to completion.
std::vector<double> train(TrainState& state, const TrainConfig& cfg, const std::vector<SyntheticScene>& scenes,
                          const TrainHooks& hooks = {});

std::size_t steps_per_epoch(const TrainConfig& cfg, std::size_t num_scenes);

enum class Dtype { f64, f32 };

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg,
                     Dtype dtype = Dtype::f64);
// Throws if the stored config hash differs from config_hash(cfg).
TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg);
// Reads the parameters only (for evaluation), with the stored config.
TrainState load_checkpoint_unchecked(const std::filesystem::path& path, nlohmann::json* stored_config = nullptr);

}  // namespace neco
