#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "flatland/data.hpp"
#include "flatland/distill.hpp"
#include "flatland/landscape.hpp"
#include "flatland/model.hpp"
#include "flatland/pipeline.hpp"
#include "flatland/shakedrop.hpp"

namespace flatland {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalConfig {
  int tta_epochs = 16;
  int holdout_domain = -1;  // -1: no held-out domain
  double val_fraction = 0.1;
};

struct LandscapeConfig {
  double radius = 1.0;
  int steps_1d = 41;
  int steps_2d = 21;
  DirectionMode mode = DirectionMode::kFilterNorm;
  int batch_size = 256;
  int resolution = 0;  // 0: use the dataset resolution
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/out";
  DatasetConfig dataset;
  PyramidSpec model;
  ShakeDropConfig shakedrop;
  DistillConfig distill;
  std::vector<StagePlan> stages;
  EvalConfig eval;
  LandscapeConfig landscape;

  void validate() const {
    dataset.validate();
    model.validate();
    shakedrop.validate();
    distill.validate();
    validate_stage_plans(stages);
    const int interior = model.interior_resolution();
    for (const auto& st : stages) {
      const int f = st.resolution / interior;
      if (st.resolution % interior != 0 || (f != 1 && f != 2 && f != 4)) {
        throw ConfigError("stages[" + std::to_string(st.stage_index - 1) + "].resolution " +
                          std::to_string(st.resolution) +
                          " is incompatible with the model interior resolution " +
                          std::to_string(interior));
      }
    }
    if (eval.tta_epochs < 1) throw ConfigError("eval.tta_epochs must be >= 1");
    if (eval.holdout_domain < -1 || eval.holdout_domain >= dataset.num_domains) {
      throw ConfigError("eval.holdout_domain must be -1 or a valid domain index");
    }
    if (!(eval.val_fraction >= 0.0 && eval.val_fraction < 1.0)) {
      throw ConfigError("eval.val_fraction must be in [0, 1)");
    }
    if (!(landscape.radius > 0.0)) throw ConfigError("landscape.radius must be positive");
    if (landscape.steps_1d < 3) throw ConfigError("landscape.steps_1d must be >= 3");
    if (landscape.steps_2d < 3) throw ConfigError("landscape.steps_2d must be >= 3");
    if (landscape.batch_size < 1) throw ConfigError("landscape.batch_size must be >= 1");
    if (landscape.resolution != 0 && landscape.resolution < 8) {
      throw ConfigError("landscape.resolution must be 0 (dataset default) or >= 8");
    }
  }

  /// Domains used for training splits: all of them, or all but the
  /// held-out one.
  std::vector<int> train_domains() const {
    std::vector<int> out;
    for (int d = 0; d < dataset.num_domains; ++d) {
      if (d != eval.holdout_domain) out.push_back(d);
    }
    return out;
  }
};

/// Stage defaults follow the published schedule: momentum SGD from a 0.1
/// peak with decay 0.9 down to 1e-4 for the low-resolution pair, then a
/// gentler adaptive-optimizer fine-tune from 0.01 with decay 0.8 down to
/// 1e-5 for the high-resolution pair.
inline StagePlan default_stage_plan(int stage_index, int base_resolution) {
  if (stage_index < 1 || stage_index > 4) {
    throw std::invalid_argument("default_stage_plan: stage_index must be 1..4");
  }
  StagePlan p;
  p.stage_index = stage_index;
  const bool high = stage_index >= 3;
  p.resolution = high ? 2 * base_resolution : base_resolution;
  p.loss_mode = (stage_index % 2 == 0) ? LossMode::kDistill : LossMode::kCrossEntropy;
  p.optimizer.kind = high ? OptimKind::kAdamW : OptimKind::kSgd;
  p.optimizer.momentum = 0.9;
  p.optimizer.weight_decay = 5e-4;
  p.alrs.warmup_epochs = 5;
  p.alrs.target_lr = high ? 0.01 : 0.1;
  p.alrs.decay_rate = high ? 0.8 : 0.9;
  p.alrs.slope_threshold = 0.2;
  p.alrs.diff_threshold = 0.2;
  p.alrs.min_lr = high ? 1e-5 : 1e-4;
  p.batch_size = high ? 16 : 48;
  p.max_epochs = 500;
  p.augment = {AugKind::kAutoAugment, AugKind::kColorJitter, AugKind::kRandomCrop, AugKind::kCutMix};
  return p;
}

inline RunConfig default_run_config() {
  RunConfig cfg;
  cfg.dataset = DatasetConfig{};
  cfg.model.input_resolution = cfg.dataset.resolution;
  for (int s = 1; s <= 4; ++s) cfg.stages.push_back(default_stage_plan(s, cfg.dataset.resolution));
  return cfg;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

inline void parse_dataset(const nlohmann::json& j, DatasetConfig& cfg) {
  check_keys(j, "dataset", {"num_classes", "num_domains", "images_per_class_per_domain",
                            "resolution", "style_strength", "noise_level"});
  read_field(j, "num_classes", cfg.num_classes, "dataset");
  read_field(j, "num_domains", cfg.num_domains, "dataset");
  read_field(j, "images_per_class_per_domain", cfg.images_per_class_per_domain, "dataset");
  read_field(j, "resolution", cfg.resolution, "dataset");
  read_field(j, "style_strength", cfg.style_strength, "dataset");
  read_field(j, "noise_level", cfg.noise_level, "dataset");
}

inline void parse_model(const nlohmann::json& j, PyramidSpec& cfg) {
  check_keys(j, "model",
             {"input_resolution", "stem_downsample_factor", "base_channels", "total_channel_add",
              "num_stages", "blocks_per_stage", "bottleneck_ratio", "widen_factor"});
  read_field(j, "input_resolution", cfg.input_resolution, "model");
  read_field(j, "stem_downsample_factor", cfg.stem_downsample_factor, "model");
  read_field(j, "base_channels", cfg.base_channels, "model");
  read_field(j, "total_channel_add", cfg.total_channel_add, "model");
  read_field(j, "num_stages", cfg.num_stages, "model");
  read_field(j, "blocks_per_stage", cfg.blocks_per_stage, "model");
  read_field(j, "bottleneck_ratio", cfg.bottleneck_ratio, "model");
  read_field(j, "widen_factor", cfg.widen_factor, "model");
}

inline void parse_shakedrop(const nlohmann::json& j, ShakeDropConfig& cfg) {
  check_keys(j, "shakedrop", {"gate_prob", "alpha_range", "gamma_range",
                              "literal_coupled_backward", "per_example", "depth_decay"});
  read_field(j, "gate_prob", cfg.gate_prob, "shakedrop");
  read_field(j, "literal_coupled_backward", cfg.literal_coupled_backward, "shakedrop");
  read_field(j, "per_example", cfg.per_example, "shakedrop");
  read_field(j, "depth_decay", cfg.depth_decay, "shakedrop");
  for (const char* key : {"alpha_range", "gamma_range"}) {
    if (!j.contains(key)) continue;
    const auto& r = j.at(key);
    if (!r.is_array() || r.size() != 2) {
      throw ConfigError(std::string("shakedrop.") + key + " must be a [lo, hi] pair");
    }
    auto& dst = std::string(key) == "alpha_range" ? cfg.alpha_range : cfg.gamma_range;
    try {
      dst = {r[0].get<double>(), r[1].get<double>()};
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("bad value for shakedrop.") + key);
    }
  }
}

inline void parse_distill(const nlohmann::json& j, DistillConfig& cfg) {
  check_keys(j, "distill",
             {"temperature", "kd_weight", "ema_decay", "kl_literal_order", "tau_squared_scale"});
  read_field(j, "temperature", cfg.temperature, "distill");
  read_field(j, "kd_weight", cfg.kd_weight, "distill");
  read_field(j, "ema_decay", cfg.ema_decay, "distill");
  read_field(j, "kl_literal_order", cfg.kl_literal_order, "distill");
  read_field(j, "tau_squared_scale", cfg.tau_squared_scale, "distill");
}

inline void parse_stage(const nlohmann::json& j, StagePlan& p, int index) {
  const std::string where = "stages[" + std::to_string(index) + "]";
  check_keys(j, where,
             {"resolution", "loss_mode", "scheduler", "optimizer", "alrs", "batch_size",
              "max_epochs", "augment", "cutmix_prob", "cutmix_beta", "crop_pad"});
  read_field(j, "resolution", p.resolution, where);
  if (j.contains("loss_mode")) {
    p.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
  }
  if (j.contains("scheduler")) {
    p.scheduler = sched_kind_from_string(j.at("scheduler").get<std::string>());
  }
  read_field(j, "batch_size", p.batch_size, where);
  read_field(j, "max_epochs", p.max_epochs, where);
  read_field(j, "cutmix_prob", p.cutmix_prob, where);
  read_field(j, "cutmix_beta", p.cutmix_beta, where);
  read_field(j, "crop_pad", p.crop_pad, where);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_keys(o, where + ".optimizer",
               {"kind", "momentum", "weight_decay", "beta1", "beta2", "eps"});
    if (o.contains("kind")) {
      const std::string kind = o.at("kind").get<std::string>();
      if (kind == "sgd") {
        p.optimizer.kind = OptimKind::kSgd;
      } else if (kind == "adamw") {
        p.optimizer.kind = OptimKind::kAdamW;
      } else {
        throw ConfigError("unknown optimizer kind '" + kind + "' in " + where);
      }
    }
    read_field(o, "momentum", p.optimizer.momentum, where + ".optimizer");
    read_field(o, "weight_decay", p.optimizer.weight_decay, where + ".optimizer");
    read_field(o, "beta1", p.optimizer.beta1, where + ".optimizer");
    read_field(o, "beta2", p.optimizer.beta2, where + ".optimizer");
    read_field(o, "eps", p.optimizer.eps, where + ".optimizer");
  }
  if (j.contains("alrs")) {
    const auto& a = j.at("alrs");
    check_keys(a, where + ".alrs",
               {"warmup_epochs", "target_lr", "decay_rate", "slope_threshold", "diff_threshold",
                "min_lr", "prose_decrease_rule"});
    read_field(a, "warmup_epochs", p.alrs.warmup_epochs, where + ".alrs");
    read_field(a, "target_lr", p.alrs.target_lr, where + ".alrs");
    read_field(a, "decay_rate", p.alrs.decay_rate, where + ".alrs");
    read_field(a, "slope_threshold", p.alrs.slope_threshold, where + ".alrs");
    read_field(a, "diff_threshold", p.alrs.diff_threshold, where + ".alrs");
    read_field(a, "min_lr", p.alrs.min_lr, where + ".alrs");
    read_field(a, "prose_decrease_rule", p.alrs.prose_decrease_rule, where + ".alrs");
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    if (!a.is_array()) throw ConfigError(where + ".augment must be an array of names");
    p.augment.clear();
    for (const auto& entry : a) p.augment.push_back(aug_kind_from_string(entry.get<std::string>()));
  }
}

inline void parse_eval(const nlohmann::json& j, EvalConfig& cfg) {
  check_keys(j, "eval", {"tta_epochs", "holdout_domain", "val_fraction"});
  read_field(j, "tta_epochs", cfg.tta_epochs, "eval");
  read_field(j, "holdout_domain", cfg.holdout_domain, "eval");
  read_field(j, "val_fraction", cfg.val_fraction, "eval");
}

inline void parse_landscape(const nlohmann::json& j, LandscapeConfig& cfg) {
  check_keys(j, "landscape",
             {"radius", "steps_1d", "steps_2d", "mode", "batch_size", "resolution"});
  read_field(j, "radius", cfg.radius, "landscape");
  read_field(j, "steps_1d", cfg.steps_1d, "landscape");
  read_field(j, "steps_2d", cfg.steps_2d, "landscape");
  read_field(j, "batch_size", cfg.batch_size, "landscape");
  read_field(j, "resolution", cfg.resolution, "landscape");
  if (j.contains("mode")) cfg.mode = direction_mode_from_string(j.at("mode").get<std::string>());
}

}  // namespace detail

/// Parse a run configuration. Every section and field is optional and
/// falls back to the defaults; unknown keys anywhere are errors. The
/// FLATLAND_SEED environment variable, when set, overrides the seed.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, "config", {"seed", "output_dir", "dataset", "model", "shakedrop", "distill",
                                   "stages", "eval", "landscape"});
  RunConfig cfg;
  detail::read_field(j, "seed", cfg.seed, "config");
  detail::read_field(j, "output_dir", cfg.output_dir, "config");
  if (j.contains("dataset")) detail::parse_dataset(j.at("dataset"), cfg.dataset);

  cfg.model.input_resolution = cfg.dataset.resolution;
  if (j.contains("model")) detail::parse_model(j.at("model"), cfg.model);
  if (j.contains("shakedrop")) detail::parse_shakedrop(j.at("shakedrop"), cfg.shakedrop);
  if (j.contains("distill")) detail::parse_distill(j.at("distill"), cfg.distill);

  for (int s = 1; s <= 4; ++s) cfg.stages.push_back(default_stage_plan(s, cfg.dataset.resolution));
  if (j.contains("stages")) {
    const auto& stages = j.at("stages");
    if (!stages.is_array() || stages.size() != 4) {
      throw ConfigError("stages must be an array of exactly 4 entries");
    }
    for (int i = 0; i < 4; ++i) {
      detail::parse_stage(stages[static_cast<std::size_t>(i)], cfg.stages[static_cast<std::size_t>(i)], i);
    }
  }
  if (j.contains("eval")) detail::parse_eval(j.at("eval"), cfg.eval);
  if (j.contains("landscape")) detail::parse_landscape(j.at("landscape"), cfg.landscape);

  if (const char* env = std::getenv("FLATLAND_SEED")) {
    try {
      std::size_t pos = 0;
      cfg.seed = std::stoull(env, &pos);
      if (pos != std::string(env).size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("FLATLAND_SEED must be an unsigned integer, got '" + std::string(env) + "'");
    }
  }

  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace flatland
