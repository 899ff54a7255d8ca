#include "o2former/config.hpp"

#include <cstdio>
#include <set>

#include "o2former/coco.hpp"

namespace o2former {

namespace {

using nlohmann::json;

// One JSON object of the config; tracks which keys were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& dst) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name(key) + ": wrong type (got " + j_.at(key).dump() + ")");
    }
  }

  void read(const char* key, std::optional<double>& dst) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    if (v.is_null()) {
      dst.reset();
    } else if (v.is_number()) {
      dst = v.get<double>();
    } else {
      throw ConfigError(name(key) + ": expected a number or null");
    }
  }

  std::optional<Section> sub(const char* key) {
    if (!j_.contains(key)) return std::nullopt;
    seen_.insert(key);
    return Section(j_.at(key), name(key));
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + name(item.key()) + "'");
    }
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_scene(Section& s, SceneSpec& c) {
  s.read("image_size", c.image_size);
  s.read("min_ships", c.min_ships);
  s.read("max_ships", c.max_ships);
  s.read("min_length", c.min_length);
  s.read("max_length", c.max_length);
  s.read("min_aspect", c.min_aspect);
  s.read("max_aspect", c.max_aspect);
  s.read("min_width", c.min_width);
  s.read("fixed_angle", c.fixed_angle);
  s.read("min_separation", c.min_separation);
  s.read("looks", c.looks);
  s.read("max_retries", c.max_retries);
  s.finish();
}

void read_model(Section& s, ModelConfig& c) {
  s.read("num_queries", c.num_queries);
  s.read("num_angles", c.num_angles);
  s.read("embed_dim", c.embed_dim);
  s.read("decoder_layers", c.decoder_layers);
  s.read("backbone_width", c.backbone_width);
  s.read("eta", c.eta);
  s.read("seed", c.seed);
  s.read("num_heads", c.num_heads);
  s.read("ffn_dim", c.ffn_dim);
  s.read("use_oqg", c.use_oqg);
  s.read("use_oaem", c.use_oaem);
  s.read("oaem_activation", c.oaem_activation);
  s.read("score_threshold", c.score_threshold);
  s.read("mask_threshold", c.mask_threshold);
  s.finish();
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("train." + key + ": " + why);
  };
  if (epochs < 1) fail("epochs", "must be positive");
  if (batch_size < 1) fail("batch_size", "must be positive");
  if (!(lr > 0.0)) fail("lr", "must be positive");
  if (weight_decay < 0.0) fail("weight_decay", "must be non-negative");
  for (size_t i = 0; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] >= epochs) fail("lr_milestones", "milestones must be < epochs");
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
      fail("lr_milestones", "milestones must be strictly increasing");
    }
  }
  if (!(lr_decay > 0.0)) fail("lr_decay", "must be positive");
  if (max_steps < 0) fail("max_steps", "must be non-negative");
  if (augment.flip_prob < 0.0 || augment.flip_prob > 1.0) fail("augment.flip_prob", "must lie in [0, 1]");
  if (!(augment.scale_min > 0.0) || augment.scale_max < augment.scale_min) {
    fail("augment.scale_max", "need 0 < scale_min <= scale_max");
  }
  if (checkpoint_every < 0) fail("checkpoint_every", "must be non-negative");
  if (grad_clip_norm < 0.0) fail("grad_clip_norm", "must be non-negative");
  if (device != "cpu" && device != "gpu") fail("device", "expected \"cpu\" or \"gpu\"");
  if (threads < 1) fail("threads", "must be positive");
}

double TrainConfig::lr_at_epoch(int epoch) const {
  double v = lr;
  for (int m : lr_milestones) {
    if (epoch >= m) v *= lr_decay;
  }
  return v;
}

void EvalConfig::validate() const {
  if (split != "train" && split != "test" && split != "all") {
    throw ConfigError("eval.split: expected \"train\", \"test\" or \"all\"");
  }
  if (max_detections < 1) throw ConfigError("eval.max_detections: must be positive");
}

void AblateConfig::validate() const {
  if (image_size < 32 || image_size % 32 != 0) {
    throw ConfigError("ablate.image_size: must be a positive multiple of 32");
  }
  if (num_images < 1) throw ConfigError("ablate.num_images: must be positive");
  if (max_steps < 1) throw ConfigError("ablate.max_steps: must be positive");
  if (loss_probe_step < 1) throw ConfigError("ablate.loss_probe_step: must be positive");
}

ExperimentConfig ExperimentConfig::for_profile(const std::string& profile) {
  ExperimentConfig c;
  c.profile = profile;
  if (profile == "desk") {
    c.dataset.scene = SceneSpec{};
    c.dataset.num_images = 32;
    c.dataset.test_fraction = 0.25;
    c.model.num_queries = 20;
    c.model.decoder_layers = 3;
    c.model.backbone_width = 8;
    c.model.embed_dim = 128;
    c.model.num_heads = 8;
    c.model.ffn_dim = 512;
    c.train.epochs = 50;
    c.train.batch_size = 4;
    c.train.lr = 1e-4;
    c.train.lr_milestones = {30, 40};
    c.train.grad_clip_norm = 1.0;
  } else if (profile == "paper") {
    c.dataset.scene = SceneSpec::benchmark();
    c.dataset.num_images = 200;
    c.dataset.test_fraction = 0.2;
    c.model.num_queries = 100;
    c.model.decoder_layers = 9;
    c.model.backbone_width = kReferenceBackboneWidth;
    c.model.embed_dim = kDefaultEmbedDim;
    c.model.num_heads = 8;
    c.model.ffn_dim = 2048;
    c.train.epochs = 500;
    c.train.batch_size = 8;
    c.train.lr = 1e-4;
    c.train.lr_milestones = {300, 400};
    c.train.grad_clip_norm = 1.0;
    c.ablate.image_size = 256;
    c.ablate.num_images = 64;
    c.ablate.max_steps = 5000;
  } else {
    throw ConfigError("profile: expected \"desk\" or \"paper\", got \"" + profile + "\"");
  }
  return c;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  model.validate();
  train.validate();
  eval.validate();
  ablate.validate();
  if (dataset.scene.image_size % 32 != 0) {
    throw ConfigError("scene.image_size: must be a multiple of 32 for the backbone");
  }
}

nlohmann::json scene_spec_to_json(const SceneSpec& s) {
  return {{"image_size", s.image_size},
          {"min_ships", s.min_ships},
          {"max_ships", s.max_ships},
          {"min_length", s.min_length},
          {"max_length", s.max_length},
          {"min_aspect", s.min_aspect},
          {"max_aspect", s.max_aspect},
          {"min_width", s.min_width},
          {"fixed_angle", s.fixed_angle ? json(*s.fixed_angle) : json(nullptr)},
          {"min_separation", s.min_separation},
          {"looks", s.looks},
          {"max_retries", s.max_retries}};
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"num_queries", c.num_queries},
          {"num_angles", c.num_angles},
          {"embed_dim", c.embed_dim},
          {"decoder_layers", c.decoder_layers},
          {"backbone_width", c.backbone_width},
          {"eta", c.eta},
          {"seed", c.seed},
          {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},
          {"use_oqg", c.use_oqg},
          {"use_oaem", c.use_oaem},
          {"oaem_activation", c.oaem_activation},
          {"score_threshold", c.score_threshold},
          {"mask_threshold", c.mask_threshold}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& base) {
  ModelConfig c = base;
  Section s(j, "model");
  read_model(s, c);
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  json model_j = model_config_to_json(model);
  model_j.erase("seed");
  return {{"seed", seed},
          {"profile", profile},
          {"data", {{"dir", data_dir}}},
          {"scene", scene_spec_to_json(dataset.scene)},
          {"dataset",
           {{"num_images", dataset.num_images},
            {"inshore_fraction", dataset.inshore_fraction},
            {"dense_fraction", dataset.dense_fraction},
            {"test_fraction", dataset.test_fraction}}},
          {"model", model_j},
          {"train",
           {{"epochs", train.epochs},
            {"batch_size", train.batch_size},
            {"lr", train.lr},
            {"weight_decay", train.weight_decay},
            {"lr_milestones", train.lr_milestones},
            {"lr_decay", train.lr_decay},
            {"max_steps", train.max_steps},
            {"augment",
             {{"enabled", train.augment.enabled},
              {"flip_prob", train.augment.flip_prob},
              {"scale_min", train.augment.scale_min},
              {"scale_max", train.augment.scale_max},
              {"crop", train.augment.crop}}},
            {"checkpoint_every", train.checkpoint_every},
            {"grad_clip_norm", train.grad_clip_norm},
            {"device", train.device},
            {"threads", train.threads}}},
          {"eval",
           {{"split", eval.split},
            {"size_buckets", to_string(eval.buckets)},
            {"max_detections", eval.max_detections},
            {"oracle", eval.oracle}}},
          {"ablate",
           {{"image_size", ablate.image_size},
            {"num_images", ablate.num_images},
            {"max_steps", ablate.max_steps},
            {"loss_probe_step", ablate.loss_probe_step}}}};
}

ExperimentConfig parse_config(const nlohmann::json& j, const std::optional<std::string>& profile,
                              const std::optional<uint64_t>& seed) {
  Section top(j, "");
  std::string profile_name = "desk";
  top.read("profile", profile_name);
  if (profile) profile_name = *profile;
  ExperimentConfig c = ExperimentConfig::for_profile(profile_name);

  if (!j.contains("seed") && !seed) throw ConfigError("seed: required key missing");
  top.read("seed", c.seed);
  if (seed) c.seed = *seed;

  if (auto s = top.sub("data")) {
    s->read("dir", c.data_dir);
    s->finish();
  }
  if (auto s = top.sub("scene")) read_scene(*s, c.dataset.scene);
  if (auto s = top.sub("dataset")) {
    s->read("num_images", c.dataset.num_images);
    s->read("inshore_fraction", c.dataset.inshore_fraction);
    s->read("dense_fraction", c.dataset.dense_fraction);
    s->read("test_fraction", c.dataset.test_fraction);
    s->finish();
  }
  if (auto s = top.sub("model")) read_model(*s, c.model);
  if (auto s = top.sub("train")) {
    auto& t = c.train;
    s->read("epochs", t.epochs);
    s->read("batch_size", t.batch_size);
    s->read("lr", t.lr);
    s->read("weight_decay", t.weight_decay);
    s->read("lr_milestones", t.lr_milestones);
    s->read("lr_decay", t.lr_decay);
    s->read("max_steps", t.max_steps);
    if (auto a = s->sub("augment")) {
      a->read("enabled", t.augment.enabled);
      a->read("flip_prob", t.augment.flip_prob);
      a->read("scale_min", t.augment.scale_min);
      a->read("scale_max", t.augment.scale_max);
      a->read("crop", t.augment.crop);
      a->finish();
    }
    s->read("checkpoint_every", t.checkpoint_every);
    s->read("grad_clip_norm", t.grad_clip_norm);
    s->read("device", t.device);
    s->read("threads", t.threads);
    s->finish();
  }
  if (auto s = top.sub("eval")) {
    s->read("split", c.eval.split);
    std::string buckets = to_string(c.eval.buckets);
    s->read("size_buckets", buckets);
    c.eval.buckets = size_buckets_from_string(buckets);
    s->read("max_detections", c.eval.max_detections);
    s->read("oracle", c.eval.oracle);
    s->finish();
  }
  if (auto s = top.sub("ablate")) {
    s->read("image_size", c.ablate.image_size);
    s->read("num_images", c.ablate.num_images);
    s->read("max_steps", c.ablate.max_steps);
    s->read("loss_probe_step", c.ablate.loss_probe_step);
    s->finish();
  }
  top.finish();

  c.dataset.scene.seed = c.seed;
  if (!(j.contains("model") && j.at("model").contains("seed"))) {
    c.model.seed = static_cast<int64_t>(c.seed);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::optional<std::string>& profile,
                             const std::optional<uint64_t>& seed) {
  nlohmann::json j;
  try {
    j = load_json(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(j, profile, seed);
}

std::string config_hash(const nlohmann::json& j) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace o2former
