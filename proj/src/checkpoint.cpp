#include "o2former/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace o2former {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little endian");

constexpr char kMagic[8] = {'O', '2', 'F', 'C', 'K', 'P', 'T', '\0'};

std::string dtype_name(torch::Dtype d) {
  switch (d) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw IoError("checkpoint: unsupported tensor dtype");
  }
}

torch::Dtype dtype_from_name(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  throw IoError("checkpoint: unknown dtype '" + s + "'");
}

std::vector<std::pair<std::string, torch::Tensor>> module_entries(const torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : m.named_parameters(true)) out.emplace_back(p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) out.emplace_back(b.key(), b.value());
  return out;
}

}  // namespace

torch::Tensor Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  return {};
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json entries = nlohmann::json::array();
  std::vector<torch::Tensor> payload;
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    auto c = t.detach().to(torch::kCPU).contiguous();
    const uint64_t nbytes = static_cast<uint64_t>(c.numel()) * c.element_size();
    entries.push_back({{"name", name},
                       {"dtype", dtype_name(c.scalar_type())},
                       {"shape", c.sizes().vec()},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(std::move(c));
  }
  const std::string header = nlohmann::json{{"meta", ckpt.meta}, {"tensors", entries}}.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    const uint32_t version = kCheckpointVersion;
    const uint64_t header_len = header.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& t : payload) {
      out.write(static_cast<const char*>(t.data_ptr()),
                static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  uint32_t version = 0;
  uint64_t header_len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IoError(path.string() + ": not a checkpoint file");
  }
  if (version != kCheckpointVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError(path.string() + ": truncated header");

  Checkpoint ckpt;
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  ckpt.meta = h.at("meta");
  const auto base = in.tellg();
  for (const auto& e : h.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_name(e.at("dtype"))));
    const auto nbytes = e.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(t.numel() * t.element_size())) {
      throw IoError(path.string() + ": size mismatch for " + e.at("name").get<std::string>());
    }
    in.seekg(base + static_cast<std::streamoff>(e.at("offset").get<uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError(path.string() + ": truncated tensor " + e.at("name").get<std::string>());
    ckpt.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void add_module_state(Checkpoint& ckpt, const torch::nn::Module& module) {
  for (auto& e : module_entries(module)) ckpt.tensors.push_back(std::move(e));
}

void load_module_state(torch::nn::Module& module, const Checkpoint& ckpt) {
  std::string problems;
  std::set<std::string> known;
  torch::NoGradGuard guard;
  for (auto& [name, target] : module_entries(module)) {
    known.insert(name);
    const auto src = ckpt.find(name);
    if (!src.defined()) {
      problems += " missing '" + name + "';";
      continue;
    }
    if (src.sizes() != target.sizes()) {
      problems += " shape of '" + name + "' differs;";
      continue;
    }
    target.copy_(src);
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("optimizer/", 0) != 0 && !known.count(name)) problems += " unexpected '" + name + "';";
  }
  if (!problems.empty()) throw IoError("checkpoint does not match the model:" + problems);
}

void add_optimizer_state(Checkpoint& ckpt, const torch::nn::Module& module,
                         const torch::optim::AdamW& optimizer) {
  nlohmann::json steps = nlohmann::json::object();
  const auto& state = optimizer.state();
  for (const auto& p : module.named_parameters(true)) {
    const auto it = state.find(p.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    steps[p.key()] = s.step();
    ckpt.tensors.emplace_back("optimizer/" + p.key() + "/exp_avg", s.exp_avg());
    ckpt.tensors.emplace_back("optimizer/" + p.key() + "/exp_avg_sq", s.exp_avg_sq());
  }
  ckpt.meta["optimizer"] = {{"steps", steps}};
}

void load_optimizer_state(torch::optim::AdamW& optimizer, const torch::nn::Module& module,
                          const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("optimizer")) throw IoError("checkpoint has no optimizer state");
  const auto& steps = ckpt.meta.at("optimizer").at("steps");
  auto& state = optimizer.state();
  state.clear();
  for (const auto& p : module.named_parameters(true)) {
    if (!steps.contains(p.key())) continue;
    auto s = std::make_unique<torch::optim::AdamWParamState>();
    s->step(steps.at(p.key()).get<int64_t>());
    const auto m = ckpt.find("optimizer/" + p.key() + "/exp_avg");
    const auto v = ckpt.find("optimizer/" + p.key() + "/exp_avg_sq");
    if (!m.defined() || !v.defined()) throw IoError("optimizer moments missing for " + p.key());
    s->exp_avg(m.clone().to(p.value().device()));
    s->exp_avg_sq(v.clone().to(p.value().device()));
    state[p.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

}  // namespace o2former
