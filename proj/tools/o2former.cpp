// Command-line entry point: generate | train | eval | ablate | visualize.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <CLI11.hpp>

#include <iostream>

#include "o2former/harness.hpp"
#include "o2former/synthdata.hpp"

namespace {

using namespace o2former;

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  std::string device = "cpu";
  std::optional<std::string> profile;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("--config", c.config, "JSON experiment config");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--device", c.device, "cpu or gpu")->check(CLI::IsMember({"cpu", "gpu"}));
  cmd->add_option("--profile", c.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg;
  if (c.config.empty()) {
    nlohmann::json j = nlohmann::json::object();
    if (!c.seed) j["seed"] = 0;
    cfg = parse_config(j, c.profile, c.seed);
  } else {
    cfg = load_config(c.config, c.profile, c.seed);
  }
  if (c.device == "gpu") {
    if (!torch::cuda::is_available()) {
      throw ConfigError("device: gpu requested but no CUDA device is available");
    }
    cfg.train.device = "gpu";
  }
  return cfg;
}

std::filesystem::path out_dir(const Common& c, const std::string& fallback) {
  return c.out.empty() ? std::filesystem::path(fallback) : std::filesystem::path(c.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ship instance segmentation: data generation, training and evaluation"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, ablate_c, vis_c;
  auto* gen = app.add_subcommand("generate", "write a synthetic COCO-format dataset");
  add_common(gen, gen_c);

  auto* train = app.add_subcommand("train", "train a model on a generated dataset");
  add_common(train, train_c);
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(ev, eval_c);
  std::string eval_ckpt, eval_split, eval_data;
  bool oracle = false;
  ev->add_option("--checkpoint", eval_ckpt, "model checkpoint");
  ev->add_option("--split", eval_split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  ev->add_option("--data", eval_data, "dataset directory (overrides data.dir)");
  ev->add_flag("--oracle", oracle, "use ground truth as predictions");

  auto* ab = app.add_subcommand("ablate", "train and evaluate the four module variants");
  add_common(ab, ablate_c);

  auto* vis = app.add_subcommand("visualize", "write C2 feature heatmaps before/after OAEM");
  add_common(vis, vis_c, false);
  std::string vis_ckpt, vis_image, vis_baseline;
  vis->add_option("--checkpoint", vis_ckpt, "model checkpoint")->required();
  vis->add_option("--image", vis_image, "PNG image")->required();
  vis->add_option("--baseline", vis_baseline, "checkpoint trained without OAEM");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      auto cfg = resolve(gen_c);
      const auto dir = out_dir(gen_c, cfg.data_dir);
      auto ds = generate_dataset(cfg.dataset, dir);
      save_json(dir / "config.json", cfg.to_json(), 2);
      std::cout << "wrote " << ds.images.size() << " images and " << ds.annotations.size()
                << " instances to " << dir.string() << "\n";
    } else if (*train) {
      auto cfg = resolve(train_c);
      if (train_c.device == "gpu") throw ConfigError("device: training on gpu is not supported");
      const auto data = load_dataset(cfg.data_dir);
      TrainOptions opts;
      opts.out_dir = out_dir(train_c, "runs/train");
      if (!resume.empty()) opts.resume = resume;
      const int64_t total = planned_steps(cfg.train, static_cast<int64_t>(data.split("train").size()));
      opts.on_step = [total](const StepLog& s) {
        if (s.step % 50 == 0 || s.step == total) {
          std::cout << "step " << s.step << "/" << total << " epoch " << s.epoch << " loss "
                    << s.total << "\n";
        }
      };
      std::filesystem::create_directories(opts.out_dir);
      save_json(opts.out_dir / "config.json", cfg.to_json(), 2);
      auto result = train_model(cfg, data, opts);
      std::cout << "final checkpoint " << result.final_checkpoint.string() << "\n";
    } else if (*ev) {
      auto cfg = resolve(eval_c);
      if (!eval_split.empty()) cfg.eval.split = eval_split;
      if (oracle) cfg.eval.oracle = true;
      const auto data = load_dataset(eval_data.empty() ? cfg.data_dir : eval_data);
      std::optional<std::filesystem::path> ckpt;
      if (!eval_ckpt.empty()) ckpt = eval_ckpt;
      auto result = evaluate(cfg, ckpt, data, out_dir(eval_c, "runs/eval"));
      for (const std::string split : {"offshore", "inshore", "all"}) {
        std::cout << result.splits.at(split).to_table(split);
      }
    } else if (*ab) {
      auto cfg = resolve(ablate_c);
      const auto dir = out_dir(ablate_c, "runs/ablate");
      run_ablation(cfg, dir);
      std::ifstream table(dir / "ablation.txt");
      std::cout << table.rdbuf();
    } else if (*vis) {
      auto cfg = resolve(vis_c);
      torch::set_num_threads(cfg.train.threads);
      std::optional<std::filesystem::path> baseline;
      if (!vis_baseline.empty()) baseline = vis_baseline;
      for (const auto& p : visualize(vis_ckpt, load_image(vis_image), out_dir(vis_c, "runs/visualize"), baseline)) {
        std::cout << "wrote " << p.string() << "\n";
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
