#include "o2former/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace o2former {

namespace F = torch::nn::functional;

namespace {

std::filesystem::path ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());
  return dir;
}

torch::Tensor resize(const torch::Tensor& chw, int64_t h, int64_t w, bool nearest) {
  auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w});
  if (nearest) {
    opts.mode(torch::kNearest);
  } else {
    opts.mode(torch::kBilinear).align_corners(false);
  }
  return F::interpolate(chw.unsqueeze(0), opts).squeeze(0);
}

// Places `src` [C,h,w] into a [C,H,W] canvas: crops when larger, pads with
// zeros when smaller; (oy, ox) is the offset of the smaller into the larger.
torch::Tensor crop_or_pad(const torch::Tensor& src, int64_t H, int64_t W, int64_t oy, int64_t ox) {
  const int64_t h = src.size(1), w = src.size(2);
  auto out = torch::zeros({src.size(0), H, W}, src.options());
  const int64_t sy = h >= H ? oy : 0, dy = h >= H ? 0 : oy;
  const int64_t sx = w >= W ? ox : 0, dx = w >= W ? 0 : ox;
  const int64_t ch = std::min(H, h), cw = std::min(W, w);
  out.narrow(1, dy, ch).narrow(2, dx, cw).copy_(src.narrow(1, sy, ch).narrow(2, sx, cw));
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string format_step(const StepLog& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%d,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                static_cast<long long>(s.step), s.epoch, s.lr, s.total, s.cls, s.bce, s.dice);
  return buf;
}

constexpr const char* kLossHeader = "step,epoch,lr,total,cls,bce,dice\n";

// Keeps rows with step <= `keep` of an existing loss log.
std::string truncated_log(const std::filesystem::path& path, int64_t keep) {
  std::string out = kLossHeader;
  std::ifstream in(path);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= keep) out += line + "\n";
  }
  return out;
}

nlohmann::json architecture(const ModelConfig& c) {
  auto j = model_config_to_json(c);
  j.erase("seed");
  j.erase("score_threshold");
  j.erase("mask_threshold");
  return j;
}

}  // namespace

const Sample& LoadedDataset::sample(int64_t image_id) const {
  for (const auto& s : samples) {
    if (s.image_id == image_id) return s;
  }
  throw IoError("dataset has no image " + std::to_string(image_id));
}

std::vector<int64_t> LoadedDataset::split(const std::string& name) const {
  if (name == "all") {
    std::vector<int64_t> ids;
    for (const auto& s : samples) ids.push_back(s.image_id);
    return ids;
  }
  if (!manifest.contains(name)) throw ConfigError("unknown split '" + name + "'");
  return manifest.at(name).get<std::vector<int64_t>>();
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "annotations.json")) {
    throw IoError("no dataset at " + dir.string() + " (annotations.json missing)");
  }
  LoadedDataset d;
  d.dir = dir;
  d.coco = load_coco(dir / "annotations.json");
  if (std::filesystem::exists(dir / "manifest.json")) {
    d.manifest = load_manifest(dir);
  } else {
    std::vector<int64_t> ids;
    for (const auto& im : d.coco.images) ids.push_back(im.id);
    d.manifest = {{"train", ids}, {"test", nlohmann::json::array()}};
  }
  for (const auto& im : d.coco.images) {
    Sample s;
    s.image_id = im.id;
    s.scene = im.scene;
    s.image = load_image(dir / im.file_name);
    if (s.image.size(1) != im.height || s.image.size(2) != im.width) {
      throw IoError((dir / im.file_name).string() + ": size differs from annotations.json");
    }
    s.gt = d.coco.instances(im.id);
    d.samples.push_back(std::move(s));
  }
  return d;
}

torch::Tensor load_image(const std::filesystem::path& path) {
  Image8 im = read_png_rgb(path);
  auto t = torch::from_blob(im.data.data(), {im.height, im.width, 3}, torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0f).contiguous();
}

Sample augment(const Sample& s, const AugmentConfig& config, Xoshiro256& rng) {
  if (!config.enabled) return s;
  const int64_t H = s.image.size(1), W = s.image.size(2);
  auto image = s.image;
  auto masks = s.gt.mask_tensor(static_cast<int>(H), static_cast<int>(W));
  if (rng.uniform() < config.flip_prob) {
    image = image.flip({2});
    masks = masks.flip({2});
  }
  if (config.crop) {
    const double scale = rng.uniform(config.scale_min, config.scale_max);
    const int64_t h = std::max<int64_t>(1, std::lround(scale * H));
    const int64_t w = std::max<int64_t>(1, std::lround(scale * W));
    const int64_t oy = rng.uniform_int(0, std::abs(h - H));
    const int64_t ox = rng.uniform_int(0, std::abs(w - W));
    image = crop_or_pad(resize(image, h, w, false), H, W, oy, ox);
    if (masks.size(0) > 0) masks = crop_or_pad(resize(masks, h, w, true), H, W, oy, ox);
  }
  Sample out;
  out.image_id = s.image_id;
  out.scene = s.scene;
  out.image = image.contiguous();
  for (int64_t k = 0; k < masks.size(0); ++k) {
    auto m = BinaryMask::from_tensor(masks[k]);
    if (m.area() < 4) continue;
    out.gt.masks.push_back(std::move(m));
    out.gt.labels.push_back(s.gt.labels[static_cast<size_t>(k)]);
  }
  return out;
}

Batch make_batch(const std::vector<Sample>& samples, torch::Dtype dtype) {
  Batch b;
  std::vector<torch::Tensor> images;
  for (const auto& s : samples) {
    images.push_back(s.image);
    const int64_t h = s.image.size(1) / 4, w = s.image.size(2) / 4;
    b.targets.push_back(make_loss_target(s.gt, h, w, dtype));
    b.image_ids.push_back(s.image_id);
  }
  b.images = torch::stack(images).to(dtype);
  return b;
}

std::vector<int64_t> epoch_order(const std::vector<int64_t>& ids, uint64_t seed, int epoch) {
  std::vector<int64_t> order = ids;
  auto rng = derived_stream(seed, 0x10000ULL + static_cast<uint64_t>(epoch));
  for (size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

int64_t planned_steps(const TrainConfig& config, int64_t num_images) {
  const int64_t per_epoch = (num_images + config.batch_size - 1) / config.batch_size;
  const int64_t total = per_epoch * config.epochs;
  return config.max_steps > 0 ? std::min(total, config.max_steps) : total;
}

Checkpoint make_checkpoint(const ExperimentConfig& config, const O2Former& model,
                           const torch::optim::AdamW* optimizer, int64_t step) {
  Checkpoint ckpt;
  ckpt.meta["model"] = model_config_to_json(model->config());
  ckpt.meta["config"] = config.to_json();
  ckpt.meta["train_state"] = {{"step", step}};
  add_module_state(ckpt, *model);
  if (optimizer) add_optimizer_state(ckpt, *model, *optimizer);
  return ckpt;
}

O2Former load_model(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected) {
  if (!ckpt.meta.contains("model")) throw IoError("checkpoint has no model config");
  const ModelConfig stored = model_config_from_json(ckpt.meta.at("model"));
  if (expected) {
    const auto a = architecture(stored);
    const auto b = architecture(*expected);
    std::string diff;
    for (const auto& item : a.items()) {
      if (item.value() != b.at(item.key())) {
        diff += (diff.empty() ? "" : ", ") + ("model." + item.key());
        diff += " (checkpoint " + item.value().dump() + ", config " + b.at(item.key()).dump() + ")";
      }
    }
    if (!diff.empty()) throw ConfigError("checkpoint/config mismatch: " + diff);
  }
  ModelConfig c = stored;
  if (expected) {
    c.score_threshold = expected->score_threshold;
    c.mask_threshold = expected->mask_threshold;
  }
  O2Former model(c);
  load_module_state(*model, ckpt);
  model->eval();
  return model;
}

TrainResult train_model(const ExperimentConfig& config, const LoadedDataset& data,
                        const TrainOptions& options) {
  const auto& tc = config.train;
  if (tc.device == "gpu" && !torch::cuda::is_available()) {
    throw ConfigError("train.device: gpu requested but no CUDA device is available");
  }
  torch::set_num_threads(tc.threads);
  std::vector<int64_t> ids = options.image_ids.empty() ? data.split("train") : options.image_ids;
  if (ids.empty()) throw IoError("training split of " + data.dir.string() + " is empty");
  ensure_dir(options.out_dir);

  torch::manual_seed(static_cast<uint64_t>(config.model.seed));
  O2Former model(config.model);
  model->train();
  torch::optim::AdamW optimizer(model->parameters(),
                                torch::optim::AdamWOptions(tc.lr).weight_decay(tc.weight_decay));

  int64_t step = 0;
  const auto log_path = options.out_dir / "loss.csv";
  std::string log_text = kLossHeader;
  if (options.resume) {
    const auto ckpt = read_checkpoint(*options.resume);
    const ModelConfig stored = model_config_from_json(ckpt.meta.at("model"));
    if (architecture(stored) != architecture(config.model)) {
      throw ConfigError("resume checkpoint was trained with a different model config");
    }
    load_module_state(*model, ckpt);
    load_optimizer_state(optimizer, *model, ckpt);
    step = ckpt.meta.at("train_state").at("step").get<int64_t>();
    if (std::filesystem::exists(log_path)) log_text = truncated_log(log_path, step);
  }
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  log << log_text;
  log.flush();

  const int64_t n = static_cast<int64_t>(ids.size());
  const int64_t per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const int64_t total_steps = planned_steps(tc, n);
  const LossWeights weights;

  TrainResult result;
  int cached_epoch = -1;
  std::vector<int64_t> order;
  while (step < total_steps) {
    const int epoch = static_cast<int>(step / per_epoch);
    const int64_t batch_index = step % per_epoch;
    if (epoch != cached_epoch) {
      order = epoch_order(ids, config.seed, epoch);
      cached_epoch = epoch;
    }
    const double lr = tc.lr_at_epoch(epoch);
    for (auto& group : optimizer.param_groups()) {
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
    }

    std::vector<Sample> samples;
    const int64_t begin = batch_index * tc.batch_size;
    const int64_t end = std::min(n, begin + tc.batch_size);
    for (int64_t i = begin; i < end; ++i) {
      auto rng = derived_stream(config.seed ^ 0xA5A5A5A5ULL,
                                static_cast<uint64_t>(step) * 4096 + static_cast<uint64_t>(i - begin));
      samples.push_back(augment(data.sample(order[static_cast<size_t>(i)]), tc.augment, rng));
    }
    Batch batch = make_batch(samples);

    optimizer.zero_grad();
    auto out = model->forward(batch.images);
    auto fail = [&](const nlohmann::json& loss) {
      nlohmann::json dump = {{"step", step + 1},
                             {"epoch", epoch},
                             {"batch_index", batch_index},
                             {"image_ids", batch.image_ids},
                             {"loss", loss}};
      save_json(options.out_dir / "nan_batch.json", dump, 2);
      throw TrainingError("non-finite loss at step " + std::to_string(step + 1) + " (epoch " +
                          std::to_string(epoch) + ", batch index " + std::to_string(batch_index) +
                          ", images " + nlohmann::json(batch.image_ids).dump() + ")");
    };
    // Matching rejects non-finite costs, so diverged outputs are caught here.
    for (const auto& layer : out.layers) {
      if (!torch::isfinite(layer.class_logits).all().item<bool>() ||
          !torch::isfinite(layer.mask_logits).all().item<bool>()) {
        fail(nullptr);
      }
    }
    auto report = total_loss(out.layers, batch.targets, weights);
    const double total = report.total.item<double>();
    if (!std::isfinite(total)) fail({{"cls", report.cls}, {"bce", report.bce}, {"dice", report.dice}});
    report.total.backward();
    if (tc.grad_clip_norm > 0.0) torch::nn::utils::clip_grad_norm_(model->parameters(), tc.grad_clip_norm);
    optimizer.step();
    ++step;

    StepLog entry{step, epoch, lr, total, report.cls, report.bce, report.dice};
    log << format_step(entry);
    log.flush();
    result.log.push_back(entry);
    if (options.on_step) options.on_step(entry);

    if (tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "ckpt_step_%06lld.ckpt", static_cast<long long>(step));
      write_checkpoint(options.out_dir / name, make_checkpoint(config, model, &optimizer, step));
    }
  }
  result.steps = step;
  result.final_checkpoint = options.out_dir / "final.ckpt";
  write_checkpoint(result.final_checkpoint, make_checkpoint(config, model, &optimizer, step));
  return result;
}

std::map<int64_t, InstanceSet> run_inference(O2Former& model, const LoadedDataset& data,
                                             const std::vector<int64_t>& ids) {
  model->eval();
  std::map<int64_t, InstanceSet> preds;
  for (int64_t id : ids) {
    const auto& s = data.sample(id);
    preds[id] = model->predict(s.image.unsqueeze(0)).at(0);
  }
  return preds;
}

std::map<int64_t, InstanceSet> oracle_predictions(const LoadedDataset& data,
                                                  const std::vector<int64_t>& ids) {
  std::map<int64_t, InstanceSet> preds;
  for (int64_t id : ids) {
    InstanceSet set = data.sample(id).gt;
    set.scores = std::vector<double>(set.size(), 1.0);
    preds[id] = std::move(set);
  }
  return preds;
}

std::map<std::string, EvalReport> evaluate_splits(const std::map<int64_t, InstanceSet>& preds,
                                                  const LoadedDataset& data,
                                                  const std::vector<int64_t>& ids,
                                                  const EvalOptions& options) {
  std::map<std::string, EvalReport> out;
  for (const std::string split : {"offshore", "inshore", "all"}) {
    std::vector<InstanceSet> p, g;
    for (int64_t id : ids) {
      const auto& s = data.sample(id);
      if (split != "all" && s.scene != split) continue;
      const auto it = preds.find(id);
      InstanceSet empty;
      empty.scores.emplace();
      p.push_back(it == preds.end() ? empty : it->second);
      g.push_back(s.gt);
    }
    out[split] = coco_summary(p, g, options);
  }
  return out;
}

EvalResult evaluate(const ExperimentConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                    const LoadedDataset& data, const std::filesystem::path& out_dir) {
  torch::set_num_threads(config.train.threads);
  ensure_dir(out_dir);
  const auto ids = data.split(config.eval.split);
  std::map<int64_t, InstanceSet> preds;
  nlohmann::json source;
  if (config.eval.oracle) {
    preds = oracle_predictions(data, ids);
    source = "oracle";
  } else {
    if (!checkpoint) throw ConfigError("eval: a checkpoint is required unless eval.oracle is set");
    auto model = load_model(read_checkpoint(*checkpoint), config.model);
    preds = run_inference(model, data, ids);
    source = checkpoint->string();
  }
  save_json(out_dir / "predictions.json", predictions_to_json(preds));

  EvalOptions options{config.eval.buckets, config.eval.max_detections};
  EvalResult result;
  result.splits = evaluate_splits(preds, data, ids, options);
  nlohmann::json splits = nlohmann::json::object();
  std::string table;
  for (const std::string split : {"offshore", "inshore", "all"}) {
    const auto& r = result.splits.at(split);
    splits[split] = r.to_json();
    table += r.to_table(split + " (" + std::to_string(r.num_gt) + " instances)") + "\n";
  }
  result.report = {{"config", config.to_json()},
                   {"predictions", source},
                   {"split", config.eval.split},
                   {"num_images", ids.size()},
                   {"splits", splits}};
  save_json(out_dir / "report.json", result.report, 2);
  write_text(out_dir / "report.txt", table);
  return result;
}

std::vector<AblationVariant> ablation_variants() {
  return {{"baseline", false, false}, {"+OQG", true, false}, {"+OAEM", false, true}, {"+both", true, true}};
}

SceneSpec ablation_scene(const ExperimentConfig& config) {
  SceneSpec s = config.dataset.scene;
  const double r = static_cast<double>(config.ablate.image_size) / s.image_size;
  s.image_size = config.ablate.image_size;
  s.min_length *= r;
  s.max_length *= r;
  s.min_width = std::max(3.0, s.min_width * r);
  s.min_separation = std::max(1.0, std::round(s.min_separation * r));
  s.max_ships = std::max(s.min_ships, static_cast<int>(std::lround(s.max_ships * std::min(1.0, r * 2))));
  return s;
}

nlohmann::json run_ablation(const ExperimentConfig& config, const std::filesystem::path& out_dir) {
  ensure_dir(out_dir);
  DatasetSpec ds = config.dataset;
  ds.scene = ablation_scene(config);
  ds.num_images = config.ablate.num_images;
  ds.test_fraction = 0.0;
  generate_dataset(ds, out_dir / "data");
  const auto data = load_dataset(out_dir / "data");
  ensure_dir(out_dir / "loss_curves");

  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream table;
  table << "variant   OQG OAEM  config_hash       loss@" << config.ablate.loss_probe_step
        << "   split     AP_m   AP50   AP75   AP_S   AP_M   AP_L\n";
  for (const auto& v : ablation_variants()) {
    ExperimentConfig c = config;
    c.data_dir = (out_dir / "data").string();
    c.dataset = ds;
    c.model.use_oqg = v.use_oqg;
    c.model.use_oaem = v.use_oaem;
    c.train.max_steps = config.ablate.max_steps;
    c.train.epochs = std::max<int>(c.train.epochs,
                                   static_cast<int>((config.ablate.max_steps * c.train.batch_size +
                                                     ds.num_images - 1) / ds.num_images));
    c.train.lr_milestones.clear();
    c.train.checkpoint_every = 0;
    c.eval.split = "train";
    c.eval.oracle = false;

    std::string dir_name = v.name;
    std::replace(dir_name.begin(), dir_name.end(), '+', 'w');
    const auto run_dir = out_dir / dir_name;
    TrainOptions topts;
    topts.out_dir = run_dir;
    auto trained = train_model(c, data, topts);
    auto eval = evaluate(c, trained.final_checkpoint, data, run_dir / "eval");
    std::filesystem::copy_file(run_dir / "loss.csv", out_dir / "loss_curves" / (dir_name + ".csv"),
                               std::filesystem::copy_options::overwrite_existing);

    std::optional<double> probe;
    for (const auto& s : trained.log) {
      if (s.step == config.ablate.loss_probe_step) probe = s.total;
    }
    const auto model_json = model_config_to_json(c.model);
    nlohmann::json splits = nlohmann::json::object();
    for (const auto& [name, r] : eval.splits) splits[name] = r.to_json();
    rows.push_back({{"variant", v.name},
                    {"use_oqg", v.use_oqg},
                    {"use_oaem", v.use_oaem},
                    {"config_hash", config_hash(model_json)},
                    {"model", model_json},
                    {"steps", trained.steps},
                    {"final_loss", trained.log.empty() ? 0.0 : trained.log.back().total},
                    {"loss_probe_step", config.ablate.loss_probe_step},
                    {"loss_at_probe", probe ? nlohmann::json(*probe) : nlohmann::json(nullptr)},
                    {"loss_curve", "loss_curves/" + dir_name + ".csv"},
                    {"splits", splits}});

    auto cell = [](const std::optional<double>& x) {
      char buf[16];
      if (x) {
        std::snprintf(buf, sizeof buf, "%7.3f", *x);
      } else {
        std::snprintf(buf, sizeof buf, "%7s", "undef");
      }
      return std::string(buf);
    };
    for (const std::string split : {"offshore", "inshore", "all"}) {
      const auto& r = eval.splits.at(split);
      char head[128];
      std::snprintf(head, sizeof head, "%-9s %3s %4s  %s  %9s   %-8s", v.name.c_str(),
                    v.use_oqg ? "y" : "n", v.use_oaem ? "y" : "n",
                    config_hash(model_json).c_str(), probe ? std::to_string(*probe).substr(0, 9).c_str() : "n/a",
                    split.c_str());
      table << head << cell(r.ap) << cell(r.ap50) << cell(r.ap75) << cell(r.ap_small)
            << cell(r.ap_medium) << cell(r.ap_large) << "\n";
    }
  }
  nlohmann::json report = {{"config", config.to_json()},
                           {"scene", scene_spec_to_json(ds.scene)},
                           {"variants", rows}};
  save_json(out_dir / "ablation.json", report, 2);
  write_text(out_dir / "ablation.txt", table.str());
  return report;
}

torch::Tensor channel_mean_heatmap(const torch::Tensor& chw) {
  if (chw.dim() != 3) throw ShapeError("channel_mean_heatmap: expected [C,H,W]");
  return chw.detach().to(torch::kCPU).to(torch::kFloat64).mean(0);
}

std::array<std::array<uint8_t, 3>, 5> heatmap_stops() {
  return {{{0, 0, 4}, {87, 16, 110}, {188, 55, 84}, {249, 142, 9}, {252, 255, 164}}};
}

Image8 colorize(const torch::Tensor& heatmap, double lo, double hi) {
  const auto stops = heatmap_stops();
  auto h = heatmap.to(torch::kFloat64).contiguous();
  Image8 out{static_cast<int>(h.size(0)), static_cast<int>(h.size(1)), 3, {}};
  out.data.reserve(static_cast<size_t>(h.numel()) * 3);
  const double* v = h.data_ptr<double>();
  for (int64_t i = 0; i < h.numel(); ++i) {
    double t = hi > lo ? (v[i] - lo) / (hi - lo) : 0.0;
    t = std::clamp(t, 0.0, 1.0) * 4.0;
    const int k = std::min(3, static_cast<int>(t));
    const double f = t - k;
    for (int c = 0; c < 3; ++c) {
      const double value = stops[k][c] + f * (stops[k + 1][c] - stops[k][c]);
      out.data.push_back(static_cast<uint8_t>(std::lround(value)));
    }
  }
  return out;
}

std::vector<std::filesystem::path> visualize(const std::filesystem::path& checkpoint,
                                             const torch::Tensor& image,
                                             const std::filesystem::path& out_dir,
                                             const std::optional<std::filesystem::path>& baseline) {
  ensure_dir(out_dir);
  torch::NoGradGuard no_grad;
  std::vector<std::pair<std::string, torch::Tensor>> maps;
  {
    auto model = load_model(read_checkpoint(checkpoint));
    auto out = model->forward(image.unsqueeze(0));
    maps.emplace_back("c2_before_oaem.png", channel_mean_heatmap(out.c2_before_oaem[0]));
    maps.emplace_back("c2_after_oaem.png", channel_mean_heatmap(out.c2_after_oaem[0]));
  }
  if (baseline) {
    auto model = load_model(read_checkpoint(*baseline));
    auto out = model->forward(image.unsqueeze(0));
    maps.emplace_back("c2_no_oaem.png", channel_mean_heatmap(out.c2_after_oaem[0]));
  }
  double lo = maps[0].second.min().item<double>();
  double hi = maps[0].second.max().item<double>();
  for (const auto& [name, m] : maps) {
    lo = std::min(lo, m.min().item<double>());
    hi = std::max(hi, m.max().item<double>());
  }
  std::vector<std::filesystem::path> written;
  for (const auto& [name, m] : maps) {
    write_png(out_dir / name, colorize(m, lo, hi));
    written.push_back(out_dir / name);
  }
  return written;
}

}  // namespace o2former
