#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flatland/checkpoint.hpp"
#include "flatland/config.hpp"
#include "flatland/io.hpp"
#include "flatland/landscape.hpp"
#include "flatland/ops.hpp"
#include "flatland/pipeline.hpp"

namespace fs = std::filesystem;
using namespace flatland;

namespace {

constexpr const char* kToolkitVersion = "1.0.0";

std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// "all", "2", "1,3", "1-3", or combinations. Returns sorted unique
/// stage numbers in 1..4.
std::vector<int> parse_stage_selection(const std::string& s) {
  if (s == "all" || s.empty()) return {1, 2, 3, 4};
  std::set<int> picked;
  std::stringstream ss(s);
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (token.empty()) throw std::runtime_error("--stages: empty entry in '" + s + "'");
    const auto dash = token.find('-');
    int lo = 0, hi = 0;
    try {
      if (dash == std::string::npos) {
        lo = hi = std::stoi(token);
      } else {
        lo = std::stoi(token.substr(0, dash));
        hi = std::stoi(token.substr(dash + 1));
      }
    } catch (const std::exception&) {
      throw std::runtime_error("--stages: cannot parse '" + token + "'");
    }
    if (lo > hi || lo < 1 || hi > 4) {
      throw std::runtime_error("--stages: entry '" + token + "' outside 1..4");
    }
    for (int v = lo; v <= hi; ++v) picked.insert(v);
  }
  return {picked.begin(), picked.end()};
}

void write_stage_metrics_csv(const std::string& path, const StagePlan& plan,
                             const StageMetrics& metrics) {
  CsvWriter csv(path);
  csv.add_comment("stage=" + std::to_string(plan.stage_index));
  csv.add_comment("loss_mode=" + loss_mode_to_string(plan.loss_mode));
  csv.add_comment("resolution=" + std::to_string(plan.resolution));
  csv.set_header({"epoch", "lr", "train_loss", "val_accuracy"});
  for (const EpochRow& r : metrics.rows) {
    csv.add_row({std::to_string(r.epoch), fmt_double(r.lr), fmt_double(r.train_loss),
                 fmt_double(r.val_accuracy)});
  }
  csv.write();
}

struct CommonArgs {
  std::string config_path;
  std::string out_override;
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args.config_path);
  if (!args.out_override.empty()) cfg.output_dir = args.out_override;
  return cfg;
}

int cmd_train(const CommonArgs& args, const std::string& stages_arg) {
  RunConfig cfg = load_config(args);
  const std::vector<int> selection = parse_stage_selection(stages_arg);
  fs::create_directories(cfg.output_dir);

  SyntheticDomainDataset data(cfg.dataset, cfg.seed);
  const SplitIndices split = split_train_val(data, cfg.train_domains(), cfg.eval.val_fraction,
                                             cfg.seed);
  WidePyramidNet model(cfg.model, cfg.dataset.num_classes, cfg.shakedrop, cfg.seed);

  TrainContext ctx;
  ctx.data = &data;
  ctx.train_indices = split.train;
  ctx.val_indices = split.val;
  ctx.distill = cfg.distill;
  ctx.seed = cfg.seed;

  const auto on_stage = [&](const StagePlan& plan, WidePyramidNet& m, const StageMetrics& metrics) {
    const std::string tag = "stage" + std::to_string(plan.stage_index);
    write_stage_metrics_csv(cfg.output_dir + "/" + tag + "_metrics.csv", plan, metrics);
    write_sched_trace_csv(cfg.output_dir + "/" + tag + "_sched.csv", metrics.sched_rows,
                          {"stage=" + std::to_string(plan.stage_index),
                           "scheduler=" + std::string(plan.scheduler == SchedKind::kAlrs
                                                          ? "alrs"
                                                          : "cosine")});
    save_checkpoint(cfg.output_dir + "/" + tag + ".ckpt", m);
    std::cout << tag << " (" << loss_mode_to_string(plan.loss_mode) << " @" << plan.resolution
              << "px): " << metrics.epochs_run << " epochs, final train loss "
              << fmt_double(metrics.final_train_loss) << ", val accuracy "
              << fmt_double(metrics.val_accuracy) << "\n";
  };

  if (selection.size() == 4) {
    run_dfp(model, cfg.stages, ctx, on_stage);
  } else {
    for (int s : selection) {
      const StagePlan& plan = cfg.stages[static_cast<std::size_t>(s - 1)];
      const StageMetrics metrics = train_stage(model, plan, ctx);
      on_stage(plan, model, metrics);
    }
  }
  save_checkpoint(cfg.output_dir + "/model.ckpt", model);

  nlohmann::json manifest;
  manifest["command"] = "train";
  manifest["config_path"] = args.config_path;
  manifest["config_hash"] = fnv1a64_hex(read_file_bytes(args.config_path));
  manifest["seed"] = cfg.seed;
  manifest["stages"] = selection;
  manifest["toolkit_version"] = kToolkitVersion;
  manifest["checkpoint_format_version"] = kCheckpointVersion;
  manifest["created"] = utc_timestamp();
  std::ofstream mf(cfg.output_dir + "/manifest.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write manifest in " + cfg.output_dir);
  mf << manifest.dump(2) << "\n";

  std::cout << "wrote " << cfg.output_dir << "/model.ckpt\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt_path, int tta_override, bool lodo) {
  RunConfig cfg = load_config(args);
  fs::create_directories(cfg.output_dir);
  SyntheticDomainDataset data(cfg.dataset, cfg.seed);
  const int resolution = cfg.stages.back().resolution;

  if (lodo) {
    const auto make_model = [&](int held) {
      return WidePyramidNet(cfg.model, cfg.dataset.num_classes, cfg.shakedrop,
                            cfg.seed + static_cast<std::uint64_t>(held) * 0x9e37 + 1);
    };
    const LodoResult result = leave_one_domain_out(data, cfg.stages, cfg.distill, cfg.seed,
                                                   cfg.eval.val_fraction, make_model);
    CsvWriter csv(cfg.output_dir + "/lodo.csv");
    csv.set_header({"held_out_domain", "accuracy"});
    for (const LodoFold& f : result.folds) {
      csv.add_row({std::to_string(f.held_out_domain), fmt_double(f.accuracy)});
      std::cout << "held-out domain " << f.held_out_domain << ": accuracy "
                << fmt_double(f.accuracy) << "\n";
    }
    csv.add_row({"mean", fmt_double(result.mean_accuracy)});
    csv.write();
    std::cout << "mean held-out accuracy " << fmt_double(result.mean_accuracy) << "\n";
    std::cout << "wrote " << cfg.output_dir << "/lodo.csv\n";
    return 0;
  }

  if (ckpt_path.empty()) throw std::runtime_error("eval: --checkpoint is required without --lodo");
  WidePyramidNet model = load_checkpoint(ckpt_path);
  if (model.num_classes() != cfg.dataset.num_classes) {
    throw std::runtime_error("eval: checkpoint has " + std::to_string(model.num_classes()) +
                             " classes, dataset has " + std::to_string(cfg.dataset.num_classes));
  }

  const int tta_epochs = tta_override >= 0 ? tta_override : cfg.eval.tta_epochs;
  const StagePlan& final_plan = cfg.stages.back();
  const SplitIndices split = split_train_val(data, cfg.train_domains(), cfg.eval.val_fraction,
                                             cfg.seed);

  std::vector<std::pair<std::string, std::vector<int>>> splits;
  if (!split.val.empty()) splits.emplace_back("val", split.val);
  if (cfg.eval.holdout_domain >= 0) {
    splits.emplace_back("holdout", data.indices_of_domain(cfg.eval.holdout_domain));
  }
  if (splits.empty()) throw std::runtime_error("eval: no validation split and no held-out domain");

  CsvWriter csv(cfg.output_dir + "/eval.csv");
  csv.add_comment("checkpoint=" + ckpt_path);
  csv.add_comment("resolution=" + std::to_string(resolution));
  csv.add_comment("tta_epochs=" + std::to_string(tta_epochs));
  csv.set_header({"split", "count", "accuracy", "tta_accuracy"});
  for (const auto& [name, indices] : splits) {
    const double plain = evaluate_accuracy(model, data, indices, resolution);
    const double tta = tta_epochs == 0
                           ? plain
                           : evaluate_tta_accuracy(model, data, indices, resolution, tta_epochs,
                                                   final_plan.augment, cfg.seed,
                                                   final_plan.crop_pad);
    csv.add_row({name, std::to_string(indices.size()), fmt_double(plain), fmt_double(tta)});
    std::cout << name << ": n=" << indices.size() << " accuracy " << fmt_double(plain) << " tta "
              << fmt_double(tta) << "\n";
  }
  csv.write();
  std::cout << "wrote " << cfg.output_dir << "/eval.csv\n";
  return 0;
}

int cmd_landscape(const CommonArgs& args, const std::string& ckpt_path, const std::string& mode,
                  double radius_override, int steps_override, bool svg) {
  RunConfig cfg = load_config(args);
  fs::create_directories(cfg.output_dir);
  if (mode != "1d" && mode != "2d") throw std::runtime_error("landscape: --mode must be 1d or 2d");

  WidePyramidNet model = load_checkpoint(ckpt_path);
  SyntheticDomainDataset data(cfg.dataset, cfg.seed);
  if (model.num_classes() != cfg.dataset.num_classes) {
    throw std::runtime_error("landscape: checkpoint has " + std::to_string(model.num_classes()) +
                             " classes, dataset has " + std::to_string(cfg.dataset.num_classes));
  }

  const int resolution =
      cfg.landscape.resolution > 0 ? cfg.landscape.resolution : cfg.dataset.resolution;
  const double radius = radius_override > 0 ? radius_override : cfg.landscape.radius;
  const SplitIndices split = split_train_val(data, cfg.train_domains(), cfg.eval.val_fraction,
                                             cfg.seed);
  std::vector<int> batch = split.train;
  if (batch.size() > static_cast<std::size_t>(cfg.landscape.batch_size)) {
    batch.resize(static_cast<std::size_t>(cfg.landscape.batch_size));
  }
  const Tensor images = render_batch(data, batch, resolution);
  const Tensor labels = one_hot_labels(data, batch);

  auto params = model.parameters();
  const auto loss_fn = [&]() {
    Tape tape;
    const int input = tape.constant(images);
    WidePyramidNet::StepContext step{cfg.seed, 0};
    const int logits = model.forward(tape, input, step);
    const int loss = soft_cross_entropy(tape, logits, labels);
    return static_cast<double>(tape.value(loss).data[0]);
  };

  std::vector<std::string> metadata = {
      "checkpoint=" + ckpt_path,
      "mode=" + mode,
      "direction=" + direction_mode_to_string(cfg.landscape.mode),
      "resolution=" + std::to_string(resolution),
      "batch=" + std::to_string(batch.size()),
      "seed=" + std::to_string(cfg.seed),
  };

  RngStream dir_rng(cfg.seed, 0x1a5d, 1);
  const Direction d1 = sample_direction(params, cfg.landscape.mode, dir_rng);
  if (mode == "1d") {
    const int steps = steps_override > 0 ? steps_override : cfg.landscape.steps_1d;
    const Slice1D slice = loss_slice_1d(params, loss_fn, d1, radius, steps);
    const std::string csv_path = cfg.output_dir + "/slice1d.csv";
    write_slice_csv(csv_path, slice, metadata);
    if (svg) {
      svg_line_plot(cfg.output_dir + "/slice1d.svg", "loss along a random direction", "t", "loss",
                    slice.ts, {{"loss", slice.losses}});
    }
    std::cout << "sharpness " << fmt_double(sharpness_from_slice(slice)) << "\n";
    std::cout << "wrote " << csv_path << "\n";
    return 0;
  }

  RngStream dir_rng2(cfg.seed, 0x1a5d, 2);
  const Direction d2 = sample_direction(params, cfg.landscape.mode, dir_rng2);
  const int steps = steps_override > 0 ? steps_override : cfg.landscape.steps_2d;
  const Slice2D slice = loss_slice_2d(params, loss_fn, d1, d2, radius, steps);
  const std::string csv_path = cfg.output_dir + "/slice2d.csv";
  write_slice_csv(csv_path, slice, metadata);
  if (svg) svg_heatmap(cfg.output_dir + "/slice2d.svg", "loss surface slice", slice);

  // sharpness along direction 1, read off the grid row nearest t2 = 0
  int j0 = 0;
  for (int j = 1; j < slice.steps; ++j) {
    if (std::abs(slice.ts[static_cast<std::size_t>(j)]) <
        std::abs(slice.ts[static_cast<std::size_t>(j0)])) {
      j0 = j;
    }
  }
  Slice1D center;
  center.radius = slice.radius;
  center.base_loss = slice.base_loss;
  center.ts = slice.ts;
  for (int i = 0; i < slice.steps; ++i) {
    center.losses.push_back(slice.losses[static_cast<std::size_t>(i) * slice.steps + j0]);
  }
  std::cout << "sharpness " << fmt_double(sharpness_from_slice(center)) << "\n";
  std::cout << "wrote " << csv_path << "\n";
  return 0;
}

void write_ppm(const std::string& path, const Tensor& img) {
  const int R = img.dim(1);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open image file for writing: " + path);
  f << "P6\n" << R << " " << R << "\n255\n";
  const std::int64_t plane = static_cast<std::int64_t>(R) * R;
  for (std::int64_t p = 0; p < plane; ++p) {
    for (int ch = 0; ch < 3; ++ch) {
      const float v = img.data[static_cast<std::size_t>(ch * plane + p)];
      const int byte = static_cast<int>(std::lround(255.0 * std::min(1.0f, std::max(0.0f, v))));
      f.put(static_cast<char>(byte));
    }
  }
  if (!f) throw std::runtime_error("failed writing image file: " + path);
}

int cmd_gen_data(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  const std::string dir = cfg.output_dir + "/dataset";
  fs::create_directories(dir);
  SyntheticDomainDataset data(cfg.dataset, cfg.seed);

  CsvWriter csv(dir + "/labels.csv");
  csv.add_comment("seed=" + std::to_string(cfg.seed));
  csv.add_comment("resolution=" + std::to_string(cfg.dataset.resolution));
  csv.set_header({"index", "domain", "class", "file"});
  for (int i = 0; i < data.size(); ++i) {
    const auto item = data.item(i);
    char name[48];
    std::snprintf(name, sizeof(name), "d%d_c%d_i%03d.ppm", item.domain_id, item.class_id,
                  item.index);
    write_ppm(dir + "/" + name, data.render(i, cfg.dataset.resolution));
    csv.add_row({std::to_string(i), std::to_string(item.domain_id), std::to_string(item.class_id),
                 name});
  }
  csv.write();
  std::cout << "wrote " << data.size() << " images to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flat-minima training toolkit"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string stages_arg = "all";
  std::string ckpt_path;
  std::string mode = "1d";
  int tta_override = -1;
  bool lodo = false;
  double radius_override = 0.0;
  int steps_override = 0;
  bool svg = false;

  auto* train = app.add_subcommand("train", "run the staged training pipeline");
  train->add_option("--config", common.config_path, "run config JSON")->required();
  train->add_option("--out", common.out_override, "override the output directory");
  train->add_option("--stages", stages_arg, "stage selection, e.g. all, 1, 1-2, 1,3");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (or run leave-one-domain-out)");
  eval->add_option("--config", common.config_path, "run config JSON")->required();
  eval->add_option("--out", common.out_override, "override the output directory");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate");
  eval->add_option("--tta", tta_override, "augmented passes per image (0 disables TTA)");
  eval->add_flag("--lodo", lodo, "train fresh models leaving out each domain in turn");

  auto* landscape = app.add_subcommand("landscape", "probe the loss surface around a checkpoint");
  landscape->add_option("--config", common.config_path, "run config JSON")->required();
  landscape->add_option("--out", common.out_override, "override the output directory");
  landscape->add_option("--checkpoint", ckpt_path, "checkpoint to probe")->required();
  landscape->add_option("--mode", mode, "1d or 2d");
  landscape->add_option("--r", radius_override, "slice radius (default from config)");
  landscape->add_option("--steps", steps_override, "grid steps per axis (default from config)");
  landscape->add_flag("--svg", svg, "also render an SVG plot");

  auto* gen = app.add_subcommand("gen-data", "materialize the synthetic dataset as PPM images");
  gen->add_option("--config", common.config_path, "run config JSON")->required();
  gen->add_option("--out", common.out_override, "override the output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(common, stages_arg);
    if (eval->parsed()) return cmd_eval(common, ckpt_path, tta_override, lodo);
    if (landscape->parsed()) {
      return cmd_landscape(common, ckpt_path, mode, radius_override, steps_override, svg);
    }
    if (gen->parsed()) return cmd_gen_data(common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
