#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "o2former/harness.hpp"
#include "o2former/synthdata.hpp"

using namespace o2former;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::path(O2FORMER_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Run {
  int code;
  std::string output;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(O2FORMER_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[512];
  while (fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// A model and dataset small enough for sub-second steps.
json tiny_config(const fs::path& data_dir) {
  return {{"seed", 1},
          {"data", {{"dir", data_dir.string()}}},
          {"scene", {{"image_size", 64}, {"min_length", 12.0}, {"max_length", 28.0}, {"min_width", 4.0}}},
          {"dataset", {{"num_images", 4}, {"test_fraction", 0.5}}},
          {"model",
           {{"num_queries", 5}, {"embed_dim", 16}, {"decoder_layers", 1}, {"backbone_width", 2}, {"num_heads", 2},
            {"ffn_dim", 32}}},
          {"train", {{"epochs", 1}, {"batch_size", 2}, {"lr_milestones", json::array()}, {"augment", {{"enabled", false}}}}},
          {"ablate", {{"image_size", 64}, {"num_images", 2}, {"max_steps", 3}, {"loss_probe_step", 2}}}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  save_json(dir / "config.json", j, 2);
  return dir / "config.json";
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli_codes");
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("generate").code, 2);  // --config missing

  save_json(dir / "noseed.json", json{{"dataset", {{"num_images", 2}}}});
  auto r = cli("generate --config " + (dir / "noseed.json").string() + " --out " + (dir / "d").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("seed"), std::string::npos) << r.output;

  save_json(dir / "typo.json", json{{"seed", 1}, {"modle", json::object()}});
  r = cli("generate --config " + (dir / "typo.json").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("modle"), std::string::npos) << r.output;

  const auto cfg = write_config(dir, tiny_config(dir / "data"));
  if (!torch::cuda::is_available()) {
    EXPECT_EQ(cli("generate --config " + cfg.string() + " --device gpu").code, 2);
  }
  EXPECT_EQ(cli("eval --config " + cfg.string() + " --checkpoint " + (dir / "none.ckpt").string()).code, 1);
  // --seed on the command line satisfies the requirement.
  EXPECT_EQ(cli("generate --config " + (dir / "noseed.json").string() + " --seed 4 --out " + (dir / "d").string()).code, 0);
}

TEST(Cli, GenerateIsBitwiseReproducible) {
  const auto dir = scratch("cli_generate");
  const auto cfg = write_config(dir, tiny_config(dir / "unused"));
  ASSERT_EQ(cli("generate --config " + cfg.string() + " --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(cli("generate --config " + cfg.string() + " --out " + (dir / "b").string()).code, 0);
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 4 + 3);  // images, annotations, manifest, config
  ASSERT_EQ(cli("generate --config " + cfg.string() + " --seed 2 --out " + (dir / "c").string()).code, 0);
  EXPECT_NE(slurp(dir / "a" / "annotations.json"), slurp(dir / "c" / "annotations.json"));
}

TEST(Cli, TrainWritesLossCsvAndCheckpoints) {
  const auto dir = scratch("cli_train");
  auto j = tiny_config(dir / "data");
  j["dataset"]["num_images"] = 4;
  j["dataset"]["test_fraction"] = 0.0;
  j["train"]["epochs"] = 100;
  j["train"]["max_steps"] = 200;
  j["train"]["checkpoint_every"] = 100;
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(cli("generate --config " + cfg.string()).code, 0);
  auto r = cli("train --config " + cfg.string() + " --out " + (dir / "run").string());
  ASSERT_EQ(r.code, 0) << r.output;
  auto rows = read_csv(dir / "run" / "loss.csv");
  ASSERT_EQ(rows.size(), 201u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"step", "epoch", "lr", "total", "cls", "bce", "dice"}));
  for (size_t i = 1; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].size(), 7u);
    EXPECT_EQ(std::stoll(rows[i][0]), static_cast<long long>(i));
    EXPECT_TRUE(std::isfinite(std::stod(rows[i][3])));
  }
  EXPECT_TRUE(fs::exists(dir / "run" / "ckpt_step_000100.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "run" / "ckpt_step_000200.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "run" / "final.ckpt"));
  auto ck = read_checkpoint(dir / "run" / "final.ckpt");
  EXPECT_EQ(ck.meta["train_state"]["step"], 200);
  EXPECT_EQ(ck.meta["config"]["seed"], 1);
}

TEST(Training, LearningRateFollowsMilestones) {
  const auto dir = scratch("train_lr");
  auto j = tiny_config(dir / "data");
  j["dataset"]["test_fraction"] = 0.0;
  j["train"]["epochs"] = 3;
  j["train"]["batch_size"] = 4;
  j["train"]["lr"] = 1e-3;
  j["train"]["lr_milestones"] = {1, 2};
  auto cfg = parse_config(j);
  generate_dataset(cfg.dataset, dir / "data");
  TrainOptions o;
  o.out_dir = dir / "run";
  auto result = train_model(cfg, load_dataset(dir / "data"), o);
  ASSERT_EQ(result.log.size(), 3u);
  EXPECT_NEAR(result.log[0].lr, 1e-3, 1e-15);
  EXPECT_NEAR(result.log[1].lr, 1e-4, 1e-15);
  EXPECT_NEAR(result.log[2].lr, 1e-5, 1e-15);
  EXPECT_EQ(planned_steps(cfg.train, 4), 3);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const auto dir = scratch("train_resume");
  auto j = tiny_config(dir / "data");
  j["dataset"]["test_fraction"] = 0.0;
  j["train"]["epochs"] = 5;
  j["train"]["checkpoint_every"] = 4;
  j["train"]["augment"]["enabled"] = true;
  auto cfg = parse_config(j);
  generate_dataset(cfg.dataset, dir / "data");
  const auto data = load_dataset(dir / "data");
  TrainOptions full;
  full.out_dir = dir / "full";
  auto a = train_model(cfg, data, full);
  ASSERT_EQ(a.steps, 10);
  TrainOptions resumed;
  resumed.out_dir = dir / "resumed";
  resumed.resume = dir / "full" / "ckpt_step_000004.ckpt";
  auto b = train_model(cfg, data, resumed);
  ASSERT_EQ(b.log.size(), 6u);
  for (size_t i = 0; i < b.log.size(); ++i) {
    EXPECT_EQ(b.log[i].step, a.log[i + 4].step);
    EXPECT_NEAR(b.log[i].total, a.log[i + 4].total, 1e-6) << "step " << b.log[i].step;
  }
  auto wa = read_checkpoint(a.final_checkpoint), wb = read_checkpoint(b.final_checkpoint);
  ASSERT_EQ(wa.tensors.size(), wb.tensors.size());
  for (size_t i = 0; i < wa.tensors.size(); ++i) {
    EXPECT_TRUE(torch::equal(wa.tensors[i].second, wb.tensors[i].second)) << wa.tensors[i].first;
  }
  // loss.csv continues from the checkpoint step.
  auto rows = read_csv(dir / "resumed" / "loss.csv");
  EXPECT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[1][0], "5");
}

TEST(Training, NonFiniteLossNamesTheBatch) {
  const auto dir = scratch("train_nan");
  auto j = tiny_config(dir / "data");
  j["train"]["lr"] = 1e30;
  j["train"]["epochs"] = 20;
  j["train"]["grad_clip_norm"] = 0.0;
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(cli("generate --config " + cfg.string()).code, 0);
  auto r = cli("train --config " + cfg.string() + " --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("batch index"), std::string::npos) << r.output;
  ASSERT_TRUE(fs::exists(dir / "run" / "nan_batch.json"));
  auto dump = load_json(dir / "run" / "nan_batch.json");
  EXPECT_TRUE(dump.contains("image_ids"));
}

TEST(Eval, OracleScoresOneAndReportSchema) {
  const auto dir = scratch("eval_oracle");
  auto j = tiny_config(dir / "data");
  j["dataset"]["num_images"] = 6;
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(cli("generate --config " + cfg.string()).code, 0);
  auto r = cli("eval --config " + cfg.string() + " --oracle --split all --out " + (dir / "ev").string());
  ASSERT_EQ(r.code, 0) << r.output;
  auto report = load_json(dir / "ev" / "report.json");
  const std::set<std::string> keys = {"AP_m", "AP50", "AP75", "AP_S", "AP_M", "AP_L"};
  for (const std::string split : {"offshore", "inshore", "all"}) {
    ASSERT_TRUE(report["splits"].contains(split));
    std::set<std::string> got;
    for (const auto& [k, v] : report["splits"][split].items()) {
      got.insert(k);
      if (!v.is_null()) EXPECT_DOUBLE_EQ(v.get<double>(), 1.0) << split << " " << k;
    }
    EXPECT_EQ(got, keys);
  }
  EXPECT_EQ(report["config"]["model"]["num_queries"], 5);
  EXPECT_TRUE(fs::exists(dir / "ev" / "predictions.json"));
  EXPECT_TRUE(fs::exists(dir / "ev" / "report.txt"));
  auto preds = load_json(dir / "ev" / "predictions.json");
  ASSERT_FALSE(preds.empty());
  EXPECT_EQ(preds[0]["category_id"], kShipCategoryId);
}

TEST(Eval, EmptyPredictionsScoreZero) {
  const auto dir = scratch("eval_empty");
  auto cfg = parse_config(tiny_config(dir / "data"));
  generate_dataset(cfg.dataset, dir / "data");
  const auto data = load_dataset(dir / "data");
  const auto ids = data.split("all");
  std::map<int64_t, InstanceSet> none;
  for (auto id : ids) none[id] = InstanceSet{};
  auto splits = evaluate_splits(none, data, ids, {});
  EXPECT_DOUBLE_EQ(*splits.at("all").ap, 0.0);
  EXPECT_DOUBLE_EQ(*splits.at("all").ap50, 0.0);
}

TEST(Eval, CheckpointArchitectureMismatchNamesFields) {
  const auto dir = scratch("eval_mismatch");
  auto j = tiny_config(dir / "data");
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(cli("generate --config " + cfg.string()).code, 0);
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir / "run").string()).code, 0);
  j["model"]["num_queries"] = 7;
  j["model"]["decoder_layers"] = 2;
  save_json(dir / "other.json", j);
  auto r = cli("eval --config " + (dir / "other.json").string() + " --checkpoint " +
               (dir / "run" / "final.ckpt").string() + " --out " + (dir / "ev").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("num_queries"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("decoder_layers"), std::string::npos) << r.output;
  auto ok = cli("eval --config " + cfg.string() + " --checkpoint " + (dir / "run" / "final.ckpt").string() +
                " --out " + (dir / "ev").string());
  EXPECT_EQ(ok.code, 0) << ok.output;
}

TEST(Ablate, FourVariantsWithCurvesAndFlagOnlyDiff) {
  const auto dir = scratch("ablate");
  const auto cfg = write_config(dir, tiny_config(dir / "data"));
  auto r = cli("ablate --config " + cfg.string() + " --out " + (dir / "ab").string());
  ASSERT_EQ(r.code, 0) << r.output;
  auto report = load_json(dir / "ab" / "ablation.json");
  ASSERT_EQ(report["variants"].size(), 4u);
  std::vector<std::string> names;
  for (const auto& row : report["variants"]) {
    names.push_back(row["variant"]);
    EXPECT_TRUE(fs::exists(dir / "ab" / row["loss_curve"].get<std::string>()));
    EXPECT_EQ(row["steps"], 3);
    EXPECT_TRUE(row["loss_at_probe"].is_number());
    for (const std::string split : {"offshore", "inshore", "all"}) EXPECT_TRUE(row["splits"].contains(split));
  }
  EXPECT_EQ(names, (std::vector<std::string>{"baseline", "+OQG", "+OAEM", "+both"}));
  auto base = report["variants"][0]["model"], both = report["variants"][3]["model"];
  EXPECT_NE(report["variants"][0]["config_hash"], report["variants"][3]["config_hash"]);
  auto diff = json::diff(base, both);
  std::set<std::string> paths;
  for (const auto& d : diff) paths.insert(d["path"]);
  EXPECT_EQ(paths, (std::set<std::string>{"/use_oqg", "/use_oaem"}));
  EXPECT_TRUE(fs::exists(dir / "ab" / "ablation.txt"));
}

TEST(Visualize, HeatmapsAtC2Resolution) {
  const auto dir = scratch("visualize");
  auto j = tiny_config(dir / "data");
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(cli("generate --config " + cfg.string()).code, 0);
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir / "run").string()).code, 0);
  j["model"]["use_oaem"] = false;
  save_json(dir / "base.json", j);
  ASSERT_EQ(cli("train --config " + (dir / "base.json").string() + " --out " + (dir / "base").string()).code, 0);
  const auto image = dir / "data" / "images" / "img_000001.png";
  auto r = cli("visualize --checkpoint " + (dir / "run" / "final.ckpt").string() + " --image " + image.string() +
               " --out " + (dir / "v2").string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::vector<std::string> two;
  for (const auto& e : fs::directory_iterator(dir / "v2")) two.push_back(e.path().filename());
  std::sort(two.begin(), two.end());
  EXPECT_EQ(two, (std::vector<std::string>{"c2_after_oaem.png", "c2_before_oaem.png"}));
  r = cli("visualize --checkpoint " + (dir / "run" / "final.ckpt").string() + " --image " + image.string() +
          " --baseline " + (dir / "base" / "final.ckpt").string() + " --out " + (dir / "v3").string());
  ASSERT_EQ(r.code, 0) << r.output;
  for (const std::string f : {"c2_before_oaem.png", "c2_after_oaem.png", "c2_no_oaem.png"}) {
    auto png = read_png_rgb(dir / "v3" / f);
    EXPECT_EQ(png.height, 16);
    EXPECT_EQ(png.width, 16);
  }
}

TEST(Visualize, ChannelMeanMatchesLoopOracle) {
  torch::manual_seed(3);
  auto f = torch::randn({6, 4, 4});
  auto h = channel_mean_heatmap(f);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      double s = 0;
      for (int c = 0; c < 6; ++c) s += f[c][y][x].item<float>();
      EXPECT_NEAR(h[y][x].item<double>(), s / 6.0, 1e-6);
    }
}

TEST(Visualize, ColorScaleEndpointsAndDegenerateInput) {
  const auto stops = heatmap_stops();
  auto zero = colorize(channel_mean_heatmap(torch::zeros({3, 4, 4})), 0.0, 0.0);
  for (int p = 0; p < 16; ++p)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(zero.data[3 * p + c], stops[0][c]);
  auto ramp = torch::tensor({{0.0, 0.5, 1.0}}, torch::kFloat64);
  auto img = colorize(ramp, 0.0, 1.0);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(img.data[c], stops[0][c]);
    EXPECT_EQ(img.data[3 + c], stops[2][c]);
    EXPECT_EQ(img.data[6 + c], stops[4][c]);
  }
}
